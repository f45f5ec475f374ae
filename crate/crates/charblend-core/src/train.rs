//! Teacher-forced maximum-likelihood training with per-example Adam
//! updates, gradient-norm clipping, early stopping on validation
//! metrics, dictionary pretraining of character embeddings, and
//! 80%-subsample ensembling.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{emission_mask, greedy_decode, ModelSet, MAX_LEN_SLACK};
use crate::error::{Error, Result};
use crate::layers::{EmbeddingRole, EmbeddingTable, HyperParams, ParamStore};
use crate::model::{
    bind_charlm, bind_seq2seq, encode_pair, init_store, transplant_embeddings, Architecture,
    Seq2SeqRef,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Matrix, Tape};
use crate::vocab::{encode_target_word, Alphabet, Example, SymbolId, WordList};

/// The only optimizer in the recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

/// Training hyperparameters; serialized alongside any trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Global gradient-norm clip applied to every update.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 300,
            patience: 10,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

/// One teacher-forcing example as a model sees it. The input is empty
/// for the character LM.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainPair {
    pub input: Vec<SymbolId>,
    pub output: Vec<SymbolId>,
}

/// Encode examples for a seq2seq architecture.
pub fn pairs_for(
    arch: Architecture,
    examples: &[Example],
    alphabet: &Alphabet,
) -> Result<Vec<TrainPair>> {
    examples
        .iter()
        .map(|e| {
            let (input, output) = encode_pair(arch, e, alphabet)?;
            Ok(TrainPair { input, output })
        })
        .collect()
}

/// Encode a word list for the character LM.
pub fn lm_pairs(words: &[String], alphabet: &Alphabet) -> Result<Vec<TrainPair>> {
    words
        .iter()
        .map(|w| {
            Ok(TrainPair {
                input: Vec::new(),
                output: encode_target_word(w, alphabet)?,
            })
        })
        .collect()
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_nll: f64,
    pub max_postclip_norm: f64,
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    /// Greedy exact-match percentage on validation; absent for the LM.
    pub valid_matches: Option<f64>,
    pub max_postclip_norm: f64,
}

/// Loss-curve CSV: `epoch,train_nll,valid_nll,valid_matches`.
pub fn loss_curve_csv(curve: &[EpochPoint]) -> String {
    let mut s = String::from("epoch,train_nll,valid_nll,valid_matches\n");
    for p in curve {
        let m = p.valid_matches.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", p.epoch, p.train_nll, p.valid_nll, m));
    }
    s
}

/// A model mid-training: parameters plus Adam state.
pub struct Trainer {
    pub store: ParamStore,
    arch: Architecture,
    alphabet: Alphabet,
    cfg: TrainConfig,
    adam_m: BTreeMap<String, Vec<f64>>,
    adam_v: BTreeMap<String, Vec<f64>>,
    step: u64,
    rng: rand_chacha::ChaCha8Rng,
}

impl Trainer {
    pub fn new(store: ParamStore, arch: Architecture, alphabet: Alphabet, cfg: TrainConfig) -> Self {
        let rng = rng_from_seed(derive_seed(cfg.seed, "epoch-shuffle"));
        Trainer {
            store,
            arch,
            alphabet,
            cfg,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            step: 0,
            rng,
        }
    }

    /// Loss and gradient of one example on a fresh tape.
    fn example_grads(&self, pair: &TrainPair) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut tape = Tape::new();
        let (loss, leaves) = match self.arch {
            Architecture::Forward | Architecture::Backward => {
                let (model, leaves) = bind_seq2seq(&mut tape, &self.store, &self.alphabet)?;
                (model.nll(&mut tape, &pair.input, &pair.output)?, leaves)
            }
            Architecture::CharLm => {
                let (model, leaves) = bind_charlm(&mut tape, &self.store, &self.alphabet)?;
                (model.nll(&mut tape, &pair.output)?, leaves)
            }
        };
        let loss_val = tape.value(loss).scalar();
        tape.backward(loss)?;
        let grads = leaves
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (name.clone(), g)
            })
            .collect();
        Ok((loss_val, grads))
    }

    /// One SGD-family update. Returns (loss, post-clip gradient norm).
    fn update_one(&mut self, pair: &TrainPair) -> Result<(f64, f64)> {
        let (loss, mut grads) = self.example_grads(pair)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {loss}")));
        }

        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm is {norm}")));
        }
        let postclip = if norm > self.cfg.clip_norm {
            let scale = self.cfg.clip_norm / norm;
            for g in grads.values_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            self.cfg.clip_norm
        } else {
            norm
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, g) in &grads {
            let p = self.store.get_mut(name)?;
            let m = self
                .adam_m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .adam_v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.adam_epsilon);
            }
        }
        Ok((loss, postclip))
    }

    /// One shuffled pass of per-example updates.
    pub fn train_epoch(&mut self, pairs: &[TrainPair], epoch: usize) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut max_postclip: f64 = 0.0;
        for &i in &order {
            let (loss, postclip) = self.update_one(&pairs[i]).map_err(|e| match e {
                Error::Diverged(msg) => {
                    Error::Diverged(format!("epoch {epoch}, example {i}: {msg}"))
                }
                other => other,
            })?;
            total += loss;
            max_postclip = max_postclip.max(postclip);
        }
        Ok(EpochStats {
            mean_nll: total / pairs.len() as f64,
            max_postclip_norm: max_postclip,
        })
    }
}

/// Mean NLL of pairs under a frozen store.
pub fn mean_nll(
    store: &ParamStore,
    arch: Architecture,
    alphabet: &Alphabet,
    pairs: &[TrainPair],
) -> Result<f64> {
    let mut total = 0.0;
    match arch {
        Architecture::Forward | Architecture::Backward => {
            let model = Seq2SeqRef::new(store, arch, alphabet)?;
            for p in pairs {
                total -= model.sequence_log_prob(&p.input, &p.output)?;
            }
        }
        Architecture::CharLm => {
            let lm = crate::model::CharLmRef::new(store, alphabet)?;
            for p in pairs {
                total -= lm.lm_log_prob(&p.output)?;
            }
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Greedy exact-match percentage of a frozen seq2seq store on its own
/// input->output pairs. Decoding is capped at the truth length plus
/// slack; anything longer cannot match anyway.
pub fn greedy_exact_match(
    store: &ParamStore,
    arch: Architecture,
    alphabet: &Alphabet,
    pairs: &[TrainPair],
) -> Result<f64> {
    let model = Seq2SeqRef::new(store, arch, alphabet)?;
    let mask = emission_mask(arch, alphabet);
    let mut hits = 0usize;
    for p in pairs {
        let surface_len = p.output.len().saturating_sub(1);
        let out = greedy_decode(&model, alphabet, &p.input, surface_len + MAX_LEN_SLACK, &mask)?;
        if !out.truncated && out.ids == p.output[..p.output.len() - 1] {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ValidMetric {
    matches: Option<f64>,
    nll: f64,
}

impl ValidMetric {
    /// Matches (higher better) first, NLL (lower better) as tiebreak.
    fn better_than(&self, other: &ValidMetric) -> bool {
        match (self.matches, other.matches) {
            (Some(a), Some(b)) if a != b => a > b,
            _ => self.nll < other.nll,
        }
    }
}

/// A trained model with its history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub curve: Vec<EpochPoint>,
    /// Epoch (1-based) whose snapshot is returned; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Train to convergence with early stopping.
///
/// Stops once the validation metric (greedy exact-match for seq2seq
/// models, NLL as tiebreak and for the LM) has failed to improve for
/// `patience` consecutive epochs, and returns the best-validation
/// snapshot, never the last epoch.
pub fn train(
    init: ParamStore,
    arch: Architecture,
    train_pairs: &[TrainPair],
    valid_pairs: &[TrainPair],
    cfg: &TrainConfig,
    alphabet: &Alphabet,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if valid_pairs.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let train_set: HashSet<&TrainPair> = train_pairs.iter().collect();
    if valid_pairs.iter().any(|p| train_set.contains(p)) {
        return Err(Error::Contract(
            "validation set overlaps the training set".into(),
        ));
    }

    let mut trainer = Trainer::new(init, arch, alphabet.clone(), cfg.clone());
    let mut curve = Vec::new();
    let mut best: Option<(ValidMetric, usize, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let stats = trainer.train_epoch(train_pairs, epoch)?;
        let valid_nll = mean_nll(&trainer.store, arch, alphabet, valid_pairs)?;
        let valid_matches = if arch.is_seq2seq() {
            Some(greedy_exact_match(&trainer.store, arch, alphabet, valid_pairs)?)
        } else {
            None
        };
        curve.push(EpochPoint {
            epoch,
            train_nll: stats.mean_nll,
            valid_nll,
            valid_matches,
            max_postclip_norm: stats.max_postclip_norm,
        });

        let metric = ValidMetric {
            matches: valid_matches,
            nll: valid_nll,
        };
        let improved = best.as_ref().is_none_or(|(b, _, _)| metric.better_than(b));
        if improved {
            best = Some((metric, epoch, trainer.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }

    match best {
        Some((_, best_epoch, store)) => Ok(TrainOutcome {
            store,
            curve,
            best_epoch,
        }),
        // max_epochs == 0: return the untouched init.
        None => Ok(TrainOutcome {
            store: trainer.store,
            curve,
            best_epoch: 0,
        }),
    }
}

// ── Embedding pretraining ────────────────────────────────────────────

/// Result of LM pretraining on a word list.
pub struct PretrainOutcome {
    /// The trained character LM (also the noisy-channel P(y)).
    pub lm: TrainOutcome,
    /// Its embedding table, ready to transplant into e_enc/e_dec.
    pub table: EmbeddingTable,
    /// Words skipped because they failed to encode.
    pub skipped: usize,
}

/// Train a character LM over a word list and return its embedding
/// table for transplant into downstream models.
pub fn pretrain_embeddings(
    wordlist: &WordList,
    hyper: HyperParams,
    cfg: &TrainConfig,
    alphabet: &Alphabet,
) -> Result<PretrainOutcome> {
    if wordlist.is_empty() {
        return Err(Error::Contract("word list is empty".into()));
    }
    let mut pairs = Vec::with_capacity(wordlist.len());
    let mut skipped = 0usize;
    for w in &wordlist.words {
        match encode_target_word(w, alphabet) {
            Ok(ids) => pairs.push(TrainPair {
                input: Vec::new(),
                output: ids,
            }),
            Err(_) => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract(
            "no word in the list is encodable over the alphabet".into(),
        ));
    }

    // Hold out ~10% (at least one word) for early stopping.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "pretrain-split")));
    let n_valid = (pairs.len() / 10).max(1);
    let valid: Vec<TrainPair> = order[..n_valid].iter().map(|&i| pairs[i].clone()).collect();
    let train_set: Vec<TrainPair> = order[n_valid..].iter().map(|&i| pairs[i].clone()).collect();
    if train_set.is_empty() {
        return Err(Error::Contract("word list too small to split".into()));
    }

    let init = init_store(
        Architecture::CharLm,
        hyper,
        alphabet,
        derive_seed(cfg.seed, "pretrain-init"),
    );
    let lm = train(init, Architecture::CharLm, &train_set, &valid, cfg, alphabet)?;
    let table = EmbeddingTable {
        role: EmbeddingRole::Shared,
        table: lm.store.get("emb")?.clone(),
    };
    Ok(PretrainOutcome { lm, table, skipped })
}

/// Per-character perplexity of words under a frozen LM (stop included).
pub fn perplexity(store: &ParamStore, words: &[String], alphabet: &Alphabet) -> Result<f64> {
    let lm = crate::model::CharLmRef::new(store, alphabet)?;
    let mut total_nll = 0.0;
    let mut total_chars = 0usize;
    for w in words {
        let ids = encode_target_word(w, alphabet)?;
        total_nll -= lm.lm_log_prob(&ids)?;
        total_chars += ids.len();
    }
    Ok((total_nll / total_chars as f64).exp())
}

// ── Ensembles ────────────────────────────────────────────────────────

/// M frozen models of one architecture trained on random subsamples.
#[derive(Debug, Clone)]
pub struct EnsembleBundle {
    pub members: Vec<ParamStore>,
    pub subsample_fraction: f64,
    pub member_seeds: Vec<u64>,
    pub curves: Vec<Vec<EpochPoint>>,
}

impl EnsembleBundle {
    pub fn m(&self) -> usize {
        self.members.len()
    }
}

/// Train M members concurrently, each on its own subsample drawn
/// without replacement (the validation set is never subsampled).
///
/// Member i's seed is `derive_seed(cfg.seed, "member/i")`; it drives
/// initialization, the subsample, and epoch shuffling, so
/// `train_ensemble` with M=1 and fraction 1.0 reproduces a plain
/// [`train`] call under that derived seed exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    arch: Architecture,
    hyper: HyperParams,
    init_embeddings: Option<&Matrix>,
    train_pairs: &[TrainPair],
    valid_pairs: &[TrainPair],
    cfg: &TrainConfig,
    m: usize,
    subsample_fraction: f64,
    alphabet: &Alphabet,
) -> Result<EnsembleBundle> {
    if m == 0 {
        return Err(Error::Contract("ensemble needs at least one member".into()));
    }
    if !(0.0 < subsample_fraction && subsample_fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "subsample fraction must be in (0, 1], got {subsample_fraction}"
        )));
    }
    let member_seeds: Vec<u64> = (0..m)
        .map(|i| derive_seed(cfg.seed, &format!("member/{i}")))
        .collect();

    let outcomes: Vec<TrainOutcome> = member_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let subsample: Vec<TrainPair> = if subsample_fraction >= 1.0 {
                train_pairs.to_vec()
            } else {
                let mut order: Vec<usize> = (0..train_pairs.len()).collect();
                order.shuffle(&mut rng_from_seed(derive_seed(seed, "subsample")));
                let keep = ((train_pairs.len() as f64 * subsample_fraction).floor() as usize).max(1);
                let mut idx: Vec<usize> = order.into_iter().take(keep).collect();
                idx.sort_unstable();
                idx.into_iter().map(|j| train_pairs[j].clone()).collect()
            };
            let mut init = init_store(arch, hyper, alphabet, seed);
            if let Some(table) = init_embeddings {
                transplant_embeddings(&mut init, arch, table)?;
            }
            let mut member_cfg = cfg.clone();
            member_cfg.seed = seed;
            train(init, arch, &subsample, valid_pairs, &member_cfg, alphabet).map_err(|e| {
                match e {
                    Error::Diverged(msg) => Error::Diverged(format!("ensemble member {i}: {msg}")),
                    other => Error::Config(format!("ensemble member {i}: {other}")),
                }
            })
        })
        .collect::<Result<_>>()?;

    Ok(EnsembleBundle {
        members: outcomes.iter().map(|o| o.store.clone()).collect(),
        subsample_fraction,
        member_seeds,
        curves: outcomes.into_iter().map(|o| o.curve).collect(),
    })
}

// ── Full training pipeline ───────────────────────────────────────────

/// Everything a prediction strategy needs trained, per run flags.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub strategy: crate::decode::DecodeStrategy,
    pub hyper: HyperParams,
    /// Initialize character embeddings from the pretrained LM.
    pub init_embeddings: bool,
    /// Ensemble size when the strategy scores with an ensemble.
    pub ensemble_m: usize,
    pub subsample_fraction: f64,
    pub train: TrainConfig,
}

/// The trained artifacts of one pipeline run.
pub struct PipelineModels {
    pub forward: Option<EnsembleBundle>,
    pub backward: Option<EnsembleBundle>,
    pub lm: Option<EnsembleBundle>,
}

impl PipelineModels {
    pub fn model_set(&self) -> ModelSet {
        ModelSet {
            forward: self
                .forward
                .as_ref()
                .map(|b| b.members.clone())
                .unwrap_or_default(),
            backward: self
                .backward
                .as_ref()
                .map(|b| b.members.clone())
                .unwrap_or_default(),
            lm: self.lm.as_ref().map(|b| b.members.clone()).unwrap_or_default(),
        }
    }
}

fn needs(strategy: &crate::decode::DecodeStrategy) -> (bool, bool) {
    use crate::decode::{DecodeStrategy, Scorer};
    match strategy {
        DecodeStrategy::Greedy | DecodeStrategy::Beam { .. } => (true, false),
        DecodeStrategy::Score { scorer } => match scorer {
            Scorer::Forward | Scorer::ForwardEnsemble => (true, false),
            Scorer::Backward { .. } | Scorer::BackwardEnsemble { .. } => (false, true),
        },
    }
}

fn ensemble_m_for(strategy: &crate::decode::DecodeStrategy, m: usize) -> usize {
    use crate::decode::{DecodeStrategy, Scorer};
    match strategy {
        DecodeStrategy::Score {
            scorer: Scorer::ForwardEnsemble | Scorer::BackwardEnsemble { .. },
        } => m,
        _ => 1,
    }
}

/// Train whatever the configured strategy needs: the seq2seq model(s),
/// and the character LM when the noisy channel or embedding
/// initialization calls for it.
pub fn train_pipeline(
    train_examples: &[Example],
    valid_examples: &[Example],
    wordlist: Option<&WordList>,
    pipeline: &PipelineConfig,
    alphabet: &Alphabet,
) -> Result<PipelineModels> {
    let (want_forward, want_backward) = needs(&pipeline.strategy);
    let want_lm = want_backward || pipeline.init_embeddings;

    let lm_bundle = if want_lm {
        let words = wordlist.ok_or_else(|| {
            Error::Config(
                "this configuration needs a word list (embedding init or noisy-channel LM)".into(),
            )
        })?;
        let mut lm_cfg = pipeline.train.clone();
        lm_cfg.seed = derive_seed(pipeline.train.seed, "charlm");
        let outcome = pretrain_embeddings(words, pipeline.hyper, &lm_cfg, alphabet)?;
        Some((
            EnsembleBundle {
                members: vec![outcome.lm.store.clone()],
                subsample_fraction: 1.0,
                member_seeds: vec![lm_cfg.seed],
                curves: vec![outcome.lm.curve.clone()],
            },
            outcome.table,
        ))
    } else {
        None
    };
    let init_table = if pipeline.init_embeddings {
        lm_bundle.as_ref().map(|(_, t)| t.table.clone())
    } else {
        None
    };

    let m = ensemble_m_for(&pipeline.strategy, pipeline.ensemble_m);
    // Subsampling is an ensembling device; a single model sees the
    // whole training set.
    let fraction = if m > 1 {
        pipeline.subsample_fraction
    } else {
        1.0
    };
    let train_arch = |arch: Architecture, role: &str| -> Result<EnsembleBundle> {
        let pairs = pairs_for(arch, train_examples, alphabet)?;
        let valid = pairs_for(arch, valid_examples, alphabet)?;
        let mut cfg = pipeline.train.clone();
        cfg.seed = derive_seed(pipeline.train.seed, role);
        train_ensemble(
            arch,
            pipeline.hyper,
            init_table.as_ref(),
            &pairs,
            &valid,
            &cfg,
            m,
            fraction,
            alphabet,
        )
    };

    let forward = if want_forward {
        Some(train_arch(Architecture::Forward, "forward")?)
    } else {
        None
    };
    let backward = if want_backward {
        Some(train_arch(Architecture::Backward, "backward")?)
    } else {
        None
    };

    Ok(PipelineModels {
        forward,
        backward,
        lm: lm_bundle.map(|(b, _)| b),
    })
}
