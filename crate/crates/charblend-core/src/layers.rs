//! Parameter containers and the layers built on the tape: embedding
//! lookup, the LSTM cell, and the output projection.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Value};
use crate::vocab::Alphabet;

/// Uniform init range for all weights (forget-gate bias excepted).
pub const INIT_RANGE: f64 = 0.08;

/// Model hyperparameters, persisted alongside trained weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub d_emb: usize,
    pub d_h: usize,
    /// Dot-product attention on/off. Off replaces every context vector
    /// with zeros; the parameter set is identical either way.
    pub attention: bool,
    /// Fingerprint of the alphabet the model was built against.
    pub alphabet_fingerprint: u64,
}

impl HyperParams {
    pub fn new(d_emb: usize, d_h: usize, attention: bool, alphabet: &Alphabet) -> Self {
        HyperParams {
            d_emb,
            d_h,
            attention,
            alphabet_fingerprint: alphabet.fingerprint(),
        }
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams::new(50, 100, true, &Alphabet::standard())
    }
}

/// Named collection of trainable tensors for one model.
///
/// Mutable only by its single owning trainer; frozen stores are
/// read-only and shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    pub hyper: HyperParams,
}

impl ParamStore {
    pub fn new(hyper: HyperParams) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            hyper,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        let name = name.into();
        debug_assert!(!self.params.contains_key(&name), "duplicate param {name}");
        self.params.insert(name, m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    /// Replace an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, m: Matrix) -> Result<()> {
        let cur = self.get(name)?;
        if cur.rows() != m.rows() || cur.cols() != m.cols() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: cur.shape_str(),
                rhs: m.shape_str(),
            });
        }
        self.params.insert(name.to_string(), m);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(|s| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Register every parameter as a tape leaf, in name order.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Value> {
        self.params
            .iter()
            .map(|(name, m)| (name.clone(), tape.leaf(m.clone())))
            .collect()
    }
}

// ── Embedding ────────────────────────────────────────────────────────

/// Which side of a model an embedding table feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingRole {
    Encoder,
    Decoder,
    Shared,
}

/// A character embedding table with its role tag.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub role: EmbeddingRole,
    pub table: Matrix,
}

/// Row lookup on the tape; backward scatters into that row only.
pub fn embed(tape: &mut Tape, table: Value, id: usize) -> Result<Value> {
    tape.row(table, id)
}

// ── LSTM cell ────────────────────────────────────────────────────────

/// Shape contract of one LSTM cell with fused gate weights.
/// Gate order inside the fused dimension is input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmSpec {
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmSpec {
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.d_in + self.d_h, 4 * self.d_h)
    }

    pub fn bias_shape(&self) -> (usize, usize) {
        (1, 4 * self.d_h)
    }

    /// (d_in + d_h) * 4 d_h weights plus 4 d_h biases.
    pub fn param_count(&self) -> usize {
        (self.d_in + self.d_h) * 4 * self.d_h + 4 * self.d_h
    }
}

/// An LSTM cell bound to tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w: Value,
    pub b: Value,
    pub spec: LstmSpec,
}

impl BoundLstm {
    /// One step: gates sigma/sigma/tanh/sigma over `W·[x;h]+b`,
    /// c' = f⊙c + i⊙g, h' = o⊙tanh(c').
    pub fn step(&self, tape: &mut Tape, x: Value, h: Value, c: Value) -> Result<(Value, Value)> {
        let d_h = self.spec.d_h;
        let xh = tape.concat_cols(&[x, h])?;
        let z = tape.matmul(xh, self.w)?;
        let z = tape.add(z, self.b)?;
        let i_pre = tape.slice_cols(z, 0, d_h)?;
        let f_pre = tape.slice_cols(z, d_h, d_h)?;
        let g_pre = tape.slice_cols(z, 2 * d_h, d_h)?;
        let o_pre = tape.slice_cols(z, 3 * d_h, d_h)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Insert freshly initialized LSTM parameters `<prefix>.w` / `<prefix>.b`.
/// Everything is U(-0.08, 0.08) except the forget-gate bias, set to +1.
pub fn init_lstm(store: &mut ParamStore, prefix: &str, spec: LstmSpec, rng: &mut impl Rng) {
    let (wr, wc) = spec.weight_shape();
    let w = Matrix::from_fn(wr, wc, |_, _| rng.gen_range(-INIT_RANGE..INIT_RANGE));
    let mut b = init_matrix(1, 4 * spec.d_h, rng);
    for j in spec.d_h..2 * spec.d_h {
        b.set(0, j, 1.0);
    }
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), b);
}

/// Freshly initialized table of U(-0.08, 0.08) entries.
pub fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-INIT_RANGE..INIT_RANGE))
}

// ── Output projection ────────────────────────────────────────────────

/// The softmax layer over the alphabet, bound to tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub w: Value,
    pub b: Value,
}

impl BoundProjection {
    /// Raw logits W·input + b (input is the 1xK feature row).
    pub fn logits(&self, tape: &mut Tape, input: Value) -> Result<Value> {
        let z = tape.matmul(input, self.w)?;
        tape.add(z, self.b)
    }

    /// Probability distribution over the alphabet.
    pub fn distribution(&self, tape: &mut Tape, input: Value) -> Result<Value> {
        let z = self.logits(tape, input)?;
        tape.softmax_row(z)
    }
}

// ── Tape-free kernels for frozen-model inference ─────────────────────

/// Stable log-softmax into a fresh vector.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Dot-product attention over encoder states, tape-free: softmax of
/// scores, then the weighted sum of states.
pub fn attend_pure(h_dec: &[f64], encoder_states: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = encoder_states
        .iter()
        .map(|e| e.iter().zip(h_dec).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    let mut ctx = vec![0.0; h_dec.len()];
    for (w, e) in weights.iter().zip(encoder_states) {
        for (c, &v) in ctx.iter_mut().zip(e) {
            *c += w * v;
        }
    }
    ctx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Borrowed LSTM parameters for the pure inference path.
#[derive(Debug, Clone, Copy)]
pub struct LstmRef<'a> {
    pub w: &'a Matrix,
    pub b: &'a Matrix,
    pub spec: LstmSpec,
}

impl<'a> LstmRef<'a> {
    pub fn from_store(store: &'a ParamStore, prefix: &str, spec: LstmSpec) -> Result<Self> {
        let w = store.get(&format!("{prefix}.w"))?;
        let b = store.get(&format!("{prefix}.b"))?;
        if (w.rows(), w.cols()) != spec.weight_shape() || (b.rows(), b.cols()) != spec.bias_shape()
        {
            return Err(Error::Shape {
                op: "LstmRef::from_store",
                lhs: w.shape_str(),
                rhs: format!("{:?}", spec.weight_shape()),
            });
        }
        Ok(LstmRef { w, b, spec })
    }

    /// In-place step; `h` and `c` are updated to the next state.
    pub fn step(&self, x: &[f64], h: &mut [f64], c: &mut [f64]) {
        let d_h = self.spec.d_h;
        let d_in = self.spec.d_in;
        debug_assert_eq!(x.len(), d_in);
        debug_assert_eq!(h.len(), d_h);

        let mut z = self.b.data().to_vec();
        let w = self.w.data();
        let cols = 4 * d_h;
        for (p, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &w[p * cols..(p + 1) * cols];
            for (zv, &wv) in z.iter_mut().zip(row) {
                *zv += xv * wv;
            }
        }
        for (q, &hv) in h.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            let row = &w[(d_in + q) * cols..(d_in + q + 1) * cols];
            for (zv, &wv) in z.iter_mut().zip(row) {
                *zv += hv * wv;
            }
        }

        for j in 0..d_h {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[d_h + j]);
            let g = z[2 * d_h + j].tanh();
            let o = sigmoid(z[3 * d_h + j]);
            let c_next = f * c[j] + i * g;
            c[j] = c_next;
            h[j] = o * c_next.tanh();
        }
    }
}
