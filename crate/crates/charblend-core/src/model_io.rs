//! Bit-stable model serialization.
//!
//! A model file is a versioned container: an 8-byte magic, a little-
//! endian u32 format version, a little-endian u64 header length, a
//! self-describing JSON header (names, shapes, dtype, configuration
//! echo), then the raw little-endian f64 tensor payloads, member by
//! member in header order. Round-trips are byte-exact; a version
//! mismatch is a hard error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{HyperParams, ParamStore};
use crate::model::{validate_store, Architecture};
use crate::tensor::Matrix;
use crate::train::{EnsembleBundle, TrainConfig};
use crate::vocab::{Alphabet, Example};

pub const MAGIC: &[u8; 8] = b"CHBLENDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    alphabet: String,
    hyperparams: HyperParams,
    train_config: TrainConfig,
    data_fingerprint: String,
    subsample_fraction: f64,
    member_seeds: Vec<u64>,
    members: usize,
    dtype: String,
    tensors: Vec<TensorSpec>,
}

/// A trained model (or ensemble of models) with everything needed to
/// reproduce and reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub architecture: Architecture,
    pub alphabet: Alphabet,
    pub train_config: TrainConfig,
    /// SHA-256 of the canonicalized training data.
    pub data_fingerprint: String,
    pub subsample_fraction: f64,
    pub member_seeds: Vec<u64>,
    pub members: Vec<ParamStore>,
}

impl ModelFile {
    pub fn from_bundle(
        architecture: Architecture,
        bundle: &EnsembleBundle,
        alphabet: &Alphabet,
        train_config: &TrainConfig,
        data_fingerprint: &str,
    ) -> ModelFile {
        ModelFile {
            architecture,
            alphabet: alphabet.clone(),
            train_config: train_config.clone(),
            data_fingerprint: data_fingerprint.to_string(),
            subsample_fraction: bundle.subsample_fraction,
            member_seeds: bundle.member_seeds.clone(),
            members: bundle.members.clone(),
        }
    }

    pub fn hyper(&self) -> HyperParams {
        self.members[0].hyper
    }

    fn header(&self) -> Result<Header> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::ModelFormat("model file needs at least one member".into()))?;
        let tensors: Vec<TensorSpec> = first
            .iter()
            .map(|(name, m)| TensorSpec {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        Ok(Header {
            format_version: FORMAT_VERSION,
            architecture: self.architecture,
            alphabet: self.alphabet.symbols_string(),
            hyperparams: first.hyper,
            train_config: self.train_config.clone(),
            data_fingerprint: self.data_fingerprint.clone(),
            subsample_fraction: self.subsample_fraction,
            member_seeds: self.member_seeds.clone(),
            members: self.members.len(),
            dtype: "f64le".into(),
            tensors,
        })
    }

    /// Serialize to bytes (see module docs for the layout).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header()?;
        for m in &self.members {
            validate_store(m, self.architecture, &self.alphabet)?;
            if m.hyper != header.hyperparams {
                return Err(Error::ModelFormat(
                    "ensemble members disagree on hyperparameters".into(),
                ));
            }
        }
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::ModelFormat(format!("header serialization failed: {e}")))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for member in &self.members {
            for spec in &header.tensors {
                let m = member.get(&spec.name)?;
                for v in m.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Atomic write: a temp file in the same directory, then rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp-write");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
        let need = |n: usize, at: usize| -> Result<()> {
            if bytes.len() < at + n {
                Err(Error::ModelFormat(format!(
                    "file truncated at byte {at} (need {n} more)"
                )))
            } else {
                Ok(())
            }
        };
        need(8 + 4 + 8, 0)?;
        if &bytes[..8] != MAGIC {
            return Err(Error::ModelFormat("bad magic; not a model file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        need(header_len, 20)?;
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| Error::ModelFormat(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "header format version {} unsupported",
                header.format_version
            )));
        }
        if header.dtype != "f64le" {
            return Err(Error::ModelFormat(format!("unsupported dtype {}", header.dtype)));
        }
        if header.members == 0 {
            return Err(Error::ModelFormat("model file holds zero members".into()));
        }
        if header.member_seeds.len() != header.members {
            return Err(Error::ModelFormat(
                "member seed list does not match member count".into(),
            ));
        }
        let alphabet = Alphabet::from_symbols(&header.alphabet)?;

        let member_floats: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let payload_len = header.members * member_floats * 8;
        let payload_start = 20 + header_len;
        if bytes.len() != payload_start + payload_len {
            return Err(Error::ModelFormat(format!(
                "payload length {} does not match header ({} expected)",
                bytes.len() - payload_start,
                payload_len
            )));
        }

        let mut members = Vec::with_capacity(header.members);
        let mut offset = payload_start;
        for _ in 0..header.members {
            let mut store = ParamStore::new(header.hyperparams);
            for spec in &header.tensors {
                let n = spec.rows * spec.cols;
                let mut data = Vec::with_capacity(n);
                for k in 0..n {
                    let at = offset + k * 8;
                    data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
                }
                offset += n * 8;
                store.insert(spec.name.clone(), Matrix::from_vec(spec.rows, spec.cols, data));
            }
            validate_store(&store, header.architecture, &alphabet)?;
            members.push(store);
        }

        Ok(ModelFile {
            architecture: header.architecture,
            alphabet,
            train_config: header.train_config,
            data_fingerprint: header.data_fingerprint,
            subsample_fraction: header.subsample_fraction,
            member_seeds: header.member_seeds,
            members,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelFile> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 over the canonical TSV form of a dataset.
pub fn dataset_fingerprint(examples: &[Example]) -> String {
    let mut hasher = Sha256::new();
    for e in examples {
        hasher.update(e.root1.as_bytes());
        hasher.update(b"\t");
        hasher.update(e.root2.as_bytes());
        hasher.update(b"\t");
        hasher.update(e.target.as_deref().unwrap_or("").as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

/// SHA-256 over a word list, one word per line.
pub fn wordlist_fingerprint(words: &[String]) -> String {
    let mut hasher = Sha256::new();
    for w in words {
        hasher.update(w.as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
