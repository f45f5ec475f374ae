//! The three model graphs: a forward attentional encoder-decoder
//! P(y|x), a backward model P(x|y) (the same graph with data roles
//! swapped), and a character language model P(y).
//!
//! Each graph exists twice: once on the tape for training and gradient
//! checks, and once as a pure computation over a frozen [`ParamStore`]
//! for fast thread-safe inference. Tests pin the two paths together.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    attend_pure, init_lstm, init_matrix, log_softmax, BoundLstm, BoundProjection, LstmRef,
    LstmSpec, HyperParams, ParamStore,
};
use crate::rng::rng_from_seed;
use crate::tensor::{Matrix, Tape, Value};
use crate::vocab::{encode_input, encode_target_word, Alphabet, Example, SymbolId};

/// Which graph a [`ParamStore`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// P(y | x): roots in, portmanteau out.
    Forward,
    /// P(x | y): portmanteau in, concatenated roots out.
    Backward,
    /// P(y): next-character language model.
    CharLm,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Forward => "forward",
            Architecture::Backward => "backward",
            Architecture::CharLm => "charlm",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "forward" => Ok(Architecture::Forward),
            "backward" => Ok(Architecture::Backward),
            "charlm" => Ok(Architecture::CharLm),
            other => Err(Error::ModelFormat(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn is_seq2seq(&self) -> bool {
        !matches!(self, Architecture::CharLm)
    }
}

/// The decoder's first input symbol y_0. The pad symbol is reserved for
/// this; the convention is shared by all three architectures.
pub fn start_of_sequence_convention(alphabet: &Alphabet) -> SymbolId {
    alphabet.pad()
}

// ── Parameter layout ─────────────────────────────────────────────────

fn enc_spec(h: &HyperParams) -> LstmSpec {
    LstmSpec {
        d_in: h.d_emb,
        d_h: h.d_h,
    }
}

fn dec_spec(h: &HyperParams) -> LstmSpec {
    // Decoder input is concat(e_dec(y_{t-1}), c_{t-1}).
    LstmSpec {
        d_in: h.d_emb + h.d_h,
        d_h: h.d_h,
    }
}

fn lm_spec(h: &HyperParams) -> LstmSpec {
    LstmSpec {
        d_in: h.d_emb,
        d_h: h.d_h,
    }
}

/// Exact expected parameter names and shapes for an architecture.
/// Deliberately independent of the attention flag: attention adds zero
/// parameters.
pub fn param_specs(
    arch: Architecture,
    hyper: &HyperParams,
    alphabet_len: usize,
) -> Vec<(String, (usize, usize))> {
    let a = alphabet_len;
    match arch {
        Architecture::Forward | Architecture::Backward => {
            let enc = enc_spec(hyper);
            let dec = dec_spec(hyper);
            vec![
                ("e_enc".into(), (a, hyper.d_emb)),
                ("e_dec".into(), (a, hyper.d_emb)),
                ("enc_fwd.w".into(), enc.weight_shape()),
                ("enc_fwd.b".into(), enc.bias_shape()),
                ("enc_bwd.w".into(), enc.weight_shape()),
                ("enc_bwd.b".into(), enc.bias_shape()),
                ("dec.w".into(), dec.weight_shape()),
                ("dec.b".into(), dec.bias_shape()),
                ("proj.w".into(), (2 * hyper.d_h, a)),
                ("proj.b".into(), (1, a)),
            ]
        }
        Architecture::CharLm => {
            let lstm = lm_spec(hyper);
            vec![
                ("emb".into(), (a, hyper.d_emb)),
                ("lstm.w".into(), lstm.weight_shape()),
                ("lstm.b".into(), lstm.bias_shape()),
                ("proj.w".into(), (hyper.d_h, a)),
                ("proj.b".into(), (1, a)),
            ]
        }
    }
}

/// Check a store carries exactly the expected names with the expected
/// shapes for the architecture.
pub fn validate_store(store: &ParamStore, arch: Architecture, alphabet: &Alphabet) -> Result<()> {
    if store.hyper.alphabet_fingerprint != alphabet.fingerprint() {
        return Err(Error::Config(
            "model was built against a different alphabet".into(),
        ));
    }
    let specs = param_specs(arch, &store.hyper, alphabet.len());
    let mut expected: Vec<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
    expected.sort_unstable();
    let actual = store.names();
    if actual != expected {
        return Err(Error::Config(format!(
            "parameter set {actual:?} does not match {} architecture {expected:?}",
            arch.tag()
        )));
    }
    for (name, (rows, cols)) in &specs {
        let m = store.get(name)?;
        if (m.rows(), m.cols()) != (*rows, *cols) {
            return Err(Error::Shape {
                op: "validate_store",
                lhs: m.shape_str(),
                rhs: format!("{rows}x{cols} for {name}"),
            });
        }
    }
    Ok(())
}

/// Fresh uniformly initialized parameters for an architecture.
pub fn init_store(
    arch: Architecture,
    hyper: HyperParams,
    alphabet: &Alphabet,
    seed: u64,
) -> ParamStore {
    let mut rng = rng_from_seed(seed);
    let a = alphabet.len();
    let mut store = ParamStore::new(hyper);
    match arch {
        Architecture::Forward | Architecture::Backward => {
            store.insert("e_enc", init_matrix(a, hyper.d_emb, &mut rng));
            store.insert("e_dec", init_matrix(a, hyper.d_emb, &mut rng));
            init_lstm(&mut store, "enc_fwd", enc_spec(&hyper), &mut rng);
            init_lstm(&mut store, "enc_bwd", enc_spec(&hyper), &mut rng);
            init_lstm(&mut store, "dec", dec_spec(&hyper), &mut rng);
            store.insert("proj.w", init_matrix(2 * hyper.d_h, a, &mut rng));
            store.insert("proj.b", init_matrix(1, a, &mut rng));
        }
        Architecture::CharLm => {
            store.insert("emb", init_matrix(a, hyper.d_emb, &mut rng));
            init_lstm(&mut store, "lstm", lm_spec(&hyper), &mut rng);
            store.insert("proj.w", init_matrix(hyper.d_h, a, &mut rng));
            store.insert("proj.b", init_matrix(1, a, &mut rng));
        }
    }
    store
}

/// All-zero parameters (used by tests that want uniform output
/// distributions).
pub fn zeros_store(arch: Architecture, hyper: HyperParams, alphabet: &Alphabet) -> ParamStore {
    let mut store = ParamStore::new(hyper);
    for (name, (rows, cols)) in param_specs(arch, &hyper, alphabet.len()) {
        store.insert(name, Matrix::zeros(rows, cols));
    }
    store
}

/// Parameters drawn U(-range, range) with the forget bias still at +1.
/// Gradient checks use this with a wider range than training init so no
/// true gradient entry sits below finite-difference resolution.
pub fn init_store_scaled(
    arch: Architecture,
    hyper: HyperParams,
    alphabet: &Alphabet,
    seed: u64,
    range: f64,
) -> ParamStore {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new(hyper);
    for (name, (rows, cols)) in param_specs(arch, &hyper, alphabet.len()) {
        let mut m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-range..range));
        if name.ends_with(".b") && cols == 4 * hyper.d_h {
            for j in hyper.d_h..2 * hyper.d_h {
                m.set(0, j, 1.0);
            }
        }
        store.insert(name, m);
    }
    store
}

/// Copy a pretrained embedding table into a store (both sides for
/// seq2seq, the shared table for the LM).
pub fn transplant_embeddings(store: &mut ParamStore, arch: Architecture, table: &Matrix) -> Result<()> {
    match arch {
        Architecture::Forward | Architecture::Backward => {
            store.set("e_enc", table.clone())?;
            store.set("e_dec", table.clone())
        }
        Architecture::CharLm => store.set("emb", table.clone()),
    }
}

/// Teacher-forcing pairs as each architecture sees them.
/// Forward: ("r1;r2", target + stop). Backward: (target, "r1;r2" + stop).
pub fn encode_pair(
    arch: Architecture,
    e: &Example,
    alphabet: &Alphabet,
) -> Result<(Vec<SymbolId>, Vec<SymbolId>)> {
    let truth = e.truth().ok_or_else(|| {
        Error::Contract(format!("example {e} has no target; cannot build a training pair"))
    })?;
    match arch {
        Architecture::Forward => Ok((
            encode_input(e, alphabet)?,
            encode_target_word(truth, alphabet)?,
        )),
        Architecture::Backward => {
            let mut out = encode_input(e, alphabet)?;
            out.push(alphabet.stop());
            Ok((alphabet.encode(truth)?, out))
        }
        Architecture::CharLm => Err(Error::Contract(
            "the language model trains on words, not root pairs".into(),
        )),
    }
}

// ── Attention ────────────────────────────────────────────────────────

/// Scores, weights, and context of one attention step.
pub struct AttentionState {
    pub scores: Value,
    pub weights: Value,
    pub context: Value,
}

/// Dot-product attention over stacked encoder states; adds no
/// parameters.
pub fn attend(tape: &mut Tape, h_dec: Value, encoder_states: Value) -> Result<AttentionState> {
    let scores = tape.matmul_nt(h_dec, encoder_states)?;
    let weights = tape.softmax_row(scores)?;
    let context = tape.matmul(weights, encoder_states)?;
    Ok(AttentionState {
        scores,
        weights,
        context,
    })
}

// ── Tape-bound seq2seq graph ─────────────────────────────────────────

/// A seq2seq model bound to tape leaves, ready to build loss graphs.
pub struct BoundSeq2Seq {
    pub e_enc: Value,
    pub e_dec: Value,
    pub enc_fwd: BoundLstm,
    pub enc_bwd: BoundLstm,
    pub dec: BoundLstm,
    pub proj: BoundProjection,
    pub hyper: HyperParams,
    sos: SymbolId,
}

/// Bind a seq2seq store onto a tape. Returns the bound graph plus the
/// name -> leaf map the trainer reads gradients from.
pub fn bind_seq2seq(
    tape: &mut Tape,
    store: &ParamStore,
    alphabet: &Alphabet,
) -> Result<(BoundSeq2Seq, BTreeMap<String, Value>)> {
    let leaves = store.bind(tape);
    let hyper = store.hyper;
    let model = BoundSeq2Seq {
        e_enc: leaves["e_enc"],
        e_dec: leaves["e_dec"],
        enc_fwd: BoundLstm {
            w: leaves["enc_fwd.w"],
            b: leaves["enc_fwd.b"],
            spec: enc_spec(&hyper),
        },
        enc_bwd: BoundLstm {
            w: leaves["enc_bwd.w"],
            b: leaves["enc_bwd.b"],
            spec: enc_spec(&hyper),
        },
        dec: BoundLstm {
            w: leaves["dec.w"],
            b: leaves["dec.b"],
            spec: dec_spec(&hyper),
        },
        proj: BoundProjection {
            w: leaves["proj.w"],
            b: leaves["proj.b"],
        },
        hyper,
        sos: start_of_sequence_convention(alphabet),
    };
    Ok((model, leaves))
}

impl BoundSeq2Seq {
    /// Summed bidirectional encoder states, one per input position.
    /// Both directions start from zero state.
    pub fn encode_bidirectional(&self, tape: &mut Tape, ids: &[SymbolId]) -> Result<Vec<Value>> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let d_h = self.hyper.d_h;
        let embs: Vec<Value> = ids
            .iter()
            .map(|id| tape.row(self.e_enc, id.0))
            .collect::<Result<_>>()?;

        let mut fwd = Vec::with_capacity(ids.len());
        let mut h = tape.leaf(Matrix::zeros(1, d_h));
        let mut c = tape.leaf(Matrix::zeros(1, d_h));
        for &e in &embs {
            let (h2, c2) = self.enc_fwd.step(tape, e, h, c)?;
            fwd.push(h2);
            h = h2;
            c = c2;
        }

        let mut bwd = vec![None; ids.len()];
        let mut h = tape.leaf(Matrix::zeros(1, d_h));
        let mut c = tape.leaf(Matrix::zeros(1, d_h));
        for (t, &e) in embs.iter().enumerate().rev() {
            let (h2, c2) = self.enc_bwd.step(tape, e, h, c)?;
            bwd[t] = Some(h2);
            h = h2;
            c = c2;
        }

        fwd.iter()
            .zip(bwd)
            .map(|(&f, b)| tape.add(f, b.expect("filled above")))
            .collect()
    }

    /// Teacher-forced negative log-likelihood of `output_ids` given
    /// `input_ids`. The output must end with the stop id.
    pub fn nll(
        &self,
        tape: &mut Tape,
        input_ids: &[SymbolId],
        output_ids: &[SymbolId],
    ) -> Result<Value> {
        let alphabet_len = tape.value(self.proj.b).cols();
        if output_ids.last().map(|id| id.0) != Some(alphabet_len - 1) {
            return Err(Error::Contract(
                "output sequence must end with the stop id".into(),
            ));
        }
        let enc = self.encode_bidirectional(tape, input_ids)?;
        let enc_stack = tape.stack_rows(&enc)?;
        let zero = tape.leaf(Matrix::zeros(1, self.hyper.d_h));

        // h_dec_0 is the last summed encoder state; cell and context
        // start at zero.
        let mut h = *enc.last().expect("non-empty input");
        let mut cell = zero;
        let mut ctx = zero;
        let mut prev = self.sos;
        let mut total: Option<Value> = None;

        for &y in output_ids {
            if y.0 >= alphabet_len {
                return Err(Error::Index {
                    what: "output symbol id",
                    index: y.0,
                    len: alphabet_len,
                });
            }
            let e = tape.row(self.e_dec, prev.0)?;
            let x = tape.concat_cols(&[e, ctx])?;
            let (h2, c2) = self.dec.step(tape, x, h, cell)?;
            h = h2;
            cell = c2;
            ctx = if self.hyper.attention {
                attend(tape, h, enc_stack)?.context
            } else {
                zero
            };
            let feat = tape.concat_cols(&[h, ctx])?;
            let logits = self.proj.logits(tape, feat)?;
            let step_loss = tape.softmax_cross_entropy(logits, y.0)?;
            total = Some(match total {
                None => step_loss,
                Some(t) => tape.add(t, step_loss)?,
            });
            prev = y;
        }
        Ok(total.expect("output has at least the stop id"))
    }
}

// ── Tape-bound character LM ──────────────────────────────────────────

/// The character LM bound to tape leaves.
pub struct BoundCharLm {
    pub emb: Value,
    pub lstm: BoundLstm,
    pub proj: BoundProjection,
    pub hyper: HyperParams,
    sos: SymbolId,
}

pub fn bind_charlm(
    tape: &mut Tape,
    store: &ParamStore,
    alphabet: &Alphabet,
) -> Result<(BoundCharLm, BTreeMap<String, Value>)> {
    let leaves = store.bind(tape);
    let hyper = store.hyper;
    let model = BoundCharLm {
        emb: leaves["emb"],
        lstm: BoundLstm {
            w: leaves["lstm.w"],
            b: leaves["lstm.b"],
            spec: lm_spec(&hyper),
        },
        proj: BoundProjection {
            w: leaves["proj.w"],
            b: leaves["proj.b"],
        },
        hyper,
        sos: start_of_sequence_convention(alphabet),
    };
    Ok((model, leaves))
}

impl BoundCharLm {
    /// Chain-rule NLL of a word (ids must end with stop), from the
    /// start-of-word state.
    pub fn nll(&self, tape: &mut Tape, ids: &[SymbolId]) -> Result<Value> {
        let alphabet_len = tape.value(self.proj.b).cols();
        if ids.last().map(|id| id.0) != Some(alphabet_len - 1) {
            return Err(Error::Contract(
                "word sequence must end with the stop id".into(),
            ));
        }
        let mut h = tape.leaf(Matrix::zeros(1, self.hyper.d_h));
        let mut cell = tape.leaf(Matrix::zeros(1, self.hyper.d_h));
        let mut prev = self.sos;
        let mut total: Option<Value> = None;
        for &y in ids {
            if y.0 >= alphabet_len {
                return Err(Error::Index {
                    what: "word symbol id",
                    index: y.0,
                    len: alphabet_len,
                });
            }
            let e = tape.row(self.emb, prev.0)?;
            let (h2, c2) = self.lstm.step(tape, e, h, cell)?;
            h = h2;
            cell = c2;
            let logits = self.proj.logits(tape, h)?;
            let step_loss = tape.softmax_cross_entropy(logits, y.0)?;
            total = Some(match total {
                None => step_loss,
                Some(t) => tape.add(t, step_loss)?,
            });
            prev = y;
        }
        Ok(total.expect("word has at least the stop id"))
    }
}

// ── Pure inference over frozen stores ────────────────────────────────

/// Mutable decoder state carried between steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub cell: Vec<f64>,
    pub ctx: Vec<f64>,
}

/// Borrowed view of a frozen seq2seq store for fast scoring and
/// decoding. Pure and thread-safe.
pub struct Seq2SeqRef<'a> {
    e_enc: &'a Matrix,
    e_dec: &'a Matrix,
    enc_fwd: LstmRef<'a>,
    enc_bwd: LstmRef<'a>,
    dec: LstmRef<'a>,
    proj_w: &'a Matrix,
    proj_b: &'a Matrix,
    pub hyper: HyperParams,
    sos: SymbolId,
    alphabet_len: usize,
}

impl<'a> Seq2SeqRef<'a> {
    pub fn new(store: &'a ParamStore, arch: Architecture, alphabet: &Alphabet) -> Result<Self> {
        if !arch.is_seq2seq() {
            return Err(Error::Config("expected a seq2seq architecture".into()));
        }
        validate_store(store, arch, alphabet)?;
        let hyper = store.hyper;
        Ok(Seq2SeqRef {
            e_enc: store.get("e_enc")?,
            e_dec: store.get("e_dec")?,
            enc_fwd: LstmRef::from_store(store, "enc_fwd", enc_spec(&hyper))?,
            enc_bwd: LstmRef::from_store(store, "enc_bwd", enc_spec(&hyper))?,
            dec: LstmRef::from_store(store, "dec", dec_spec(&hyper))?,
            proj_w: store.get("proj.w")?,
            proj_b: store.get("proj.b")?,
            hyper,
            sos: start_of_sequence_convention(alphabet),
            alphabet_len: alphabet.len(),
        })
    }

    pub fn alphabet_len(&self) -> usize {
        self.alphabet_len
    }

    fn check_ids(&self, ids: &[SymbolId], what: &'static str) -> Result<()> {
        for id in ids {
            if id.0 >= self.alphabet_len {
                return Err(Error::Index {
                    what,
                    index: id.0,
                    len: self.alphabet_len,
                });
            }
        }
        Ok(())
    }

    /// Summed bidirectional encoder states.
    pub fn encode(&self, ids: &[SymbolId]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        self.check_ids(ids, "input symbol id")?;
        let d_h = self.hyper.d_h;
        let n = ids.len();

        let mut states = vec![vec![0.0; d_h]; n];
        let mut h = vec![0.0; d_h];
        let mut c = vec![0.0; d_h];
        for (t, id) in ids.iter().enumerate() {
            self.enc_fwd.step(self.e_enc.row(id.0), &mut h, &mut c);
            states[t].copy_from_slice(&h);
        }
        let mut h = vec![0.0; d_h];
        let mut c = vec![0.0; d_h];
        for (t, id) in ids.iter().enumerate().rev() {
            self.enc_bwd.step(self.e_enc.row(id.0), &mut h, &mut c);
            for (s, hv) in states[t].iter_mut().zip(&h) {
                *s += hv;
            }
        }
        Ok(states)
    }

    /// Decoder state before the first step: h from the last encoder
    /// state, zero cell and zero context.
    pub fn init_state(&self, enc: &[Vec<f64>]) -> DecoderState {
        DecoderState {
            h: enc.last().expect("non-empty encoding").clone(),
            cell: vec![0.0; self.hyper.d_h],
            ctx: vec![0.0; self.hyper.d_h],
        }
    }

    /// The decoder start symbol.
    pub fn sos(&self) -> SymbolId {
        self.sos
    }

    /// Advance one decoder step consuming `prev`; returns log
    /// probabilities over the alphabet for the next symbol.
    pub fn step(&self, state: &mut DecoderState, prev: SymbolId, enc: &[Vec<f64>]) -> Vec<f64> {
        let d_emb = self.hyper.d_emb;
        let mut x = Vec::with_capacity(d_emb + self.hyper.d_h);
        x.extend_from_slice(self.e_dec.row(prev.0));
        x.extend_from_slice(&state.ctx);
        self.dec.step(&x, &mut state.h, &mut state.cell);

        if self.hyper.attention {
            state.ctx = attend_pure(&state.h, enc);
        }
        // else: ctx stays the zero vector it started as.

        let mut feat = Vec::with_capacity(2 * self.hyper.d_h);
        feat.extend_from_slice(&state.h);
        feat.extend_from_slice(&state.ctx);
        let mut logits = self.proj_b.data().to_vec();
        crate::tensor::matmul_acc(&feat, self.proj_w.data(), 1, feat.len(), self.alphabet_len, &mut logits);
        log_softmax(&logits)
    }

    /// Teacher-forced log P(output | input); always finite and <= 0.
    pub fn sequence_log_prob(&self, input_ids: &[SymbolId], output_ids: &[SymbolId]) -> Result<f64> {
        let enc = self.encode(input_ids)?;
        self.sequence_log_prob_given(&enc, output_ids)
    }

    /// Same, reusing a precomputed encoding of the input.
    pub fn sequence_log_prob_given(
        &self,
        enc: &[Vec<f64>],
        output_ids: &[SymbolId],
    ) -> Result<f64> {
        if output_ids.last() != Some(&SymbolId(self.alphabet_len - 1)) {
            return Err(Error::Contract(
                "output sequence must end with the stop id".into(),
            ));
        }
        self.check_ids(output_ids, "output symbol id")?;
        let mut state = self.init_state(enc);
        let mut prev = self.sos;
        let mut total = 0.0;
        for &y in output_ids {
            let lp = self.step(&mut state, prev, enc);
            total += lp[y.0];
            prev = y;
        }
        Ok(total)
    }
}

/// Log P(output | input) under a frozen seq2seq store.
pub fn sequence_log_prob(
    store: &ParamStore,
    arch: Architecture,
    alphabet: &Alphabet,
    input_ids: &[SymbolId],
    output_ids: &[SymbolId],
) -> Result<f64> {
    Seq2SeqRef::new(store, arch, alphabet)?.sequence_log_prob(input_ids, output_ids)
}

/// Borrowed view of a frozen character LM.
pub struct CharLmRef<'a> {
    emb: &'a Matrix,
    lstm: LstmRef<'a>,
    proj_w: &'a Matrix,
    proj_b: &'a Matrix,
    pub hyper: HyperParams,
    sos: SymbolId,
    alphabet_len: usize,
}

impl<'a> CharLmRef<'a> {
    pub fn new(store: &'a ParamStore, alphabet: &Alphabet) -> Result<Self> {
        validate_store(store, Architecture::CharLm, alphabet)?;
        let hyper = store.hyper;
        Ok(CharLmRef {
            emb: store.get("emb")?,
            lstm: LstmRef::from_store(store, "lstm", lm_spec(&hyper))?,
            proj_w: store.get("proj.w")?,
            proj_b: store.get("proj.b")?,
            hyper,
            sos: start_of_sequence_convention(alphabet),
            alphabet_len: alphabet.len(),
        })
    }

    /// Chain log P(ids); ids must end with the stop id.
    pub fn lm_log_prob(&self, ids: &[SymbolId]) -> Result<f64> {
        if ids.last() != Some(&SymbolId(self.alphabet_len - 1)) {
            return Err(Error::Contract(
                "word sequence must end with the stop id".into(),
            ));
        }
        let mut h = vec![0.0; self.hyper.d_h];
        let mut c = vec![0.0; self.hyper.d_h];
        let mut prev = self.sos;
        let mut total = 0.0;
        for &y in ids {
            if y.0 >= self.alphabet_len {
                return Err(Error::Index {
                    what: "word symbol id",
                    index: y.0,
                    len: self.alphabet_len,
                });
            }
            self.lstm.step(self.emb.row(prev.0), &mut h, &mut c);
            let mut logits = self.proj_b.data().to_vec();
            crate::tensor::matmul_acc(&h, self.proj_w.data(), 1, h.len(), self.alphabet_len, &mut logits);
            let lp = log_softmax(&logits);
            total += lp[y.0];
            prev = y;
        }
        Ok(total)
    }
}

/// Log P(ids) under a frozen character LM store.
pub fn lm_log_prob(store: &ParamStore, alphabet: &Alphabet, ids: &[SymbolId]) -> Result<f64> {
    CharLmRef::new(store, alphabet)?.lm_log_prob(ids)
}

// ── Whole-graph gradient checking ────────────────────────────────────

/// Sum of all entries of a value, as a tape scalar.
fn sum_all(tape: &mut Tape, v: Value) -> Result<Value> {
    let (r, c) = (tape.value(v).rows(), tape.value(v).cols());
    let ones_c = tape.leaf(Matrix::from_vec(c, 1, vec![1.0; c]));
    let col = tape.matmul(v, ones_c)?;
    let ones_r = tape.leaf(Matrix::from_vec(1, r, vec![1.0; r]));
    tape.matmul(ones_r, col)
}

/// Loss = model loss + a linear probe sum_i probe_i * theta_i.
///
/// The probe's own gradient is exact, so the check still measures the
/// model's backward pass; its purpose is to keep every parameter's
/// total gradient above the resolution floor of central differences
/// (true gradients below ~1e-6 drown in O(1e-10) difference noise and
/// would report spurious relative error).
fn add_probe(
    tape: &mut Tape,
    loss: Value,
    params: &[Value],
    probes: &[Matrix],
) -> Result<Value> {
    let mut total = loss;
    for (&p, probe) in params.iter().zip(probes) {
        let q = tape.leaf(probe.clone());
        let prod = tape.mul(p, q)?;
        let s = sum_all(tape, prod)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

fn make_probes(shapes: &[(usize, usize)], seed: u64) -> Vec<Matrix> {
    use rand::Rng;
    let mut rng = rng_from_seed(crate::rng::derive_seed(seed, "grad-probe"));
    shapes
        .iter()
        .map(|&(r, c)| {
            Matrix::from_fn(r, c, |_, _| {
                let mag = rng.gen_range(0.05..0.15);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
        })
        .collect()
}

/// Central finite-difference check of the full seq2seq graph: builds a
/// randomly initialized model and compares analytic gradients of the
/// teacher-forced loss (plus a linear probe term; see the module
/// source) over the given
/// pairs. Returns the worst relative error over every parameter entry.
pub fn seq2seq_grad_check(
    arch: Architecture,
    hyper: HyperParams,
    alphabet: &Alphabet,
    seed: u64,
    pairs: &[(Vec<SymbolId>, Vec<SymbolId>)],
    epsilon: f64,
) -> Result<f64> {
    let store = init_store_scaled(arch, hyper, alphabet, seed, 0.4);
    let names: Vec<String> = store.names().iter().map(|s| s.to_string()).collect();
    let params: Vec<Matrix> = names
        .iter()
        .map(|n| store.get(n).cloned())
        .collect::<Result<_>>()?;
    let shapes: Vec<(usize, usize)> = params.iter().map(|m| (m.rows(), m.cols())).collect();
    let probes = make_probes(&shapes, seed);
    let alphabet = alphabet.clone();
    let pairs = pairs.to_vec();

    crate::tensor::grad_check(&params, epsilon, move |tape, ps| {
        let at = |name: &str| ps[names.iter().position(|n| n == name).unwrap()];
        let model = BoundSeq2Seq {
            e_enc: at("e_enc"),
            e_dec: at("e_dec"),
            enc_fwd: BoundLstm {
                w: at("enc_fwd.w"),
                b: at("enc_fwd.b"),
                spec: enc_spec(&hyper),
            },
            enc_bwd: BoundLstm {
                w: at("enc_bwd.w"),
                b: at("enc_bwd.b"),
                spec: enc_spec(&hyper),
            },
            dec: BoundLstm {
                w: at("dec.w"),
                b: at("dec.b"),
                spec: dec_spec(&hyper),
            },
            proj: BoundProjection {
                w: at("proj.w"),
                b: at("proj.b"),
            },
            hyper,
            sos: start_of_sequence_convention(&alphabet),
        };
        let mut loss: Option<Value> = None;
        for (input, output) in &pairs {
            let l = model.nll(tape, input, output)?;
            loss = Some(match loss {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = loss.ok_or_else(|| Error::Contract("no pairs to check".into()))?;
        add_probe(tape, loss, ps, &probes)
    })
}

/// Central finite-difference check of the character LM graph; see
/// [`seq2seq_grad_check`].
pub fn charlm_grad_check(
    hyper: HyperParams,
    alphabet: &Alphabet,
    seed: u64,
    words: &[Vec<SymbolId>],
    epsilon: f64,
) -> Result<f64> {
    let store = init_store_scaled(Architecture::CharLm, hyper, alphabet, seed, 0.4);
    let names: Vec<String> = store.names().iter().map(|s| s.to_string()).collect();
    let params: Vec<Matrix> = names
        .iter()
        .map(|n| store.get(n).cloned())
        .collect::<Result<_>>()?;
    let shapes: Vec<(usize, usize)> = params.iter().map(|m| (m.rows(), m.cols())).collect();
    let probes = make_probes(&shapes, seed);
    let alphabet = alphabet.clone();
    let words = words.to_vec();

    crate::tensor::grad_check(&params, epsilon, move |tape, ps| {
        let at = |name: &str| ps[names.iter().position(|n| n == name).unwrap()];
        let model = BoundCharLm {
            emb: at("emb"),
            lstm: BoundLstm {
                w: at("lstm.w"),
                b: at("lstm.b"),
                spec: lm_spec(&hyper),
            },
            proj: BoundProjection {
                w: at("proj.w"),
                b: at("proj.b"),
            },
            hyper,
            sos: start_of_sequence_convention(&alphabet),
        };
        let mut loss: Option<Value> = None;
        for word in &words {
            let l = model.nll(tape, word)?;
            loss = Some(match loss {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = loss.ok_or_else(|| Error::Contract("no words to check".into()))?;
        add_probe(tape, loss, ps, &probes)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::NormalizePolicy;

    fn tiny_hyper(alphabet: &Alphabet) -> HyperParams {
        HyperParams::new(6, 8, true, alphabet)
    }

    fn ids(alphabet: &Alphabet, s: &str) -> Vec<SymbolId> {
        alphabet.encode(s).unwrap()
    }

    #[test]
    fn attention_adds_zero_parameters() {
        let a = Alphabet::standard();
        let mut on = tiny_hyper(&a);
        on.attention = true;
        let mut off = on;
        off.attention = false;
        assert_eq!(
            param_specs(Architecture::Forward, &on, a.len()),
            param_specs(Architecture::Forward, &off, a.len())
        );
        // Name-set equality on actual stores.
        let s_on = init_store(Architecture::Forward, on, &a, 3);
        let s_off = init_store(Architecture::Forward, off, &a, 3);
        assert_eq!(s_on.names(), s_off.names());
        assert_eq!(s_on.param_count(), s_off.param_count());
    }

    #[test]
    fn encoder_output_length_matches_input() {
        let a = Alphabet::standard();
        let store = init_store(Architecture::Forward, tiny_hyper(&a), &a, 5);
        let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
        for s in ["a", "ab", "space;time"] {
            let enc = model.encode(&ids(&a, s)).unwrap();
            assert_eq!(enc.len(), s.len());
        }
    }

    #[test]
    fn encoder_rejects_empty_input() {
        let a = Alphabet::standard();
        let store = init_store(Architecture::Forward, tiny_hyper(&a), &a, 5);
        let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
        assert!(matches!(model.encode(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_character_input_sums_both_directions() {
        let a = Alphabet::standard();
        let store = init_store(Architecture::Forward, tiny_hyper(&a), &a, 6);
        let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
        let enc = model.encode(&ids(&a, "q")).unwrap();
        assert_eq!(enc.len(), 1);
        assert!(enc[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn palindrome_with_tied_directions_gives_palindromic_states() {
        let a = Alphabet::standard();
        let mut store = init_store(Architecture::Forward, tiny_hyper(&a), &a, 8);
        // Tie the two encoder directions.
        let w = store.get("enc_fwd.w").unwrap().clone();
        let b = store.get("enc_fwd.b").unwrap().clone();
        store.set("enc_bwd.w", w).unwrap();
        store.set("enc_bwd.b", b).unwrap();

        let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
        let enc = model.encode(&ids(&a, "abcba")).unwrap();
        let n = enc.len();
        for t in 0..n {
            for (x, y) in enc[t].iter().zip(&enc[n - 1 - t]) {
                assert!((x - y).abs() < 1e-12, "position {t} not mirrored");
            }
        }
    }

    #[test]
    fn attend_uniform_over_identical_states() {
        let mut tape = Tape::new();
        let h = tape.leaf(Matrix::row_vec(vec![0.3, -0.2, 0.5]));
        let same = Matrix::from_vec(4, 3, [0.1, 0.7, -0.4].repeat(4));
        let enc = tape.leaf(same);
        let att = attend(&mut tape, h, enc).unwrap();
        for &w in tape.value(att.weights).data() {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_single_state_copies_it() {
        let mut tape = Tape::new();
        let h = tape.leaf(Matrix::row_vec(vec![1.0, 2.0]));
        let enc = tape.leaf(Matrix::from_vec(1, 2, vec![0.4, -0.9]));
        let att = attend(&mut tape, h, enc).unwrap();
        assert_eq!(tape.value(att.weights).data(), &[1.0]);
        assert_eq!(tape.value(att.context).data(), &[0.4, -0.9]);
    }

    #[test]
    fn every_decode_step_outputs_a_distribution() {
        let a = Alphabet::standard();
        for seed in 0..5 {
            let store = init_store(Architecture::Forward, tiny_hyper(&a), &a, seed);
            let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
            let enc = model.encode(&ids(&a, "random;words")).unwrap();
            let mut state = model.init_state(&enc);
            let mut prev = model.sos();
            for step in 0..10 {
                let lp = model.step(&mut state, prev, &enc);
                let sum: f64 = lp.iter().map(|v| v.exp()).sum();
                assert!((sum - 1.0).abs() < 1e-9, "seed {seed} step {step}: {sum}");
                prev = SymbolId(step % a.len());
            }
        }
    }

    #[test]
    fn attend_width_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let h = tape.leaf(Matrix::row_vec(vec![1.0, 2.0, 3.0]));
        let enc = tape.leaf(Matrix::zeros(4, 2));
        assert!(matches!(
            attend(&mut tape, h, enc),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_model_log_prob_is_uniform() {
        let a = Alphabet::standard();
        let hyper = tiny_hyper(&a);
        let store = zeros_store(Architecture::Forward, hyper, &a);
        let e = Example::new("space", "time", Some("spime"), NormalizePolicy::Drop).unwrap();
        let (input, output) = encode_pair(Architecture::Forward, &e, &a).unwrap();
        let lp = sequence_log_prob(&store, Architecture::Forward, &a, &input, &output).unwrap();
        let uniform = output.len() as f64 * (1.0 / a.len() as f64).ln();
        assert!(
            (lp - uniform).abs() < 0.1 * uniform.abs(),
            "{lp} vs uniform {uniform}"
        );
        assert!(lp <= 0.0);
    }

    #[test]
    fn zero_charlm_log_prob_is_uniform() {
        let a = Alphabet::standard();
        let store = zeros_store(Architecture::CharLm, tiny_hyper(&a), &a);
        let word = encode_target_word("spime", &a).unwrap();
        let lp = lm_log_prob(&store, &a, &word).unwrap();
        let uniform = word.len() as f64 * (1.0 / a.len() as f64).ln();
        assert!((lp - uniform).abs() < 0.1 * uniform.abs());
    }

    #[test]
    fn sequence_log_prob_finite_and_nonpositive() {
        let a = Alphabet::standard();
        for seed in 0..8 {
            let store = init_store(Architecture::Forward, tiny_hyper(&a), &a, seed);
            let e = Example::new("ben", "jennifer", Some("bennifer"), NormalizePolicy::Drop)
                .unwrap();
            let (input, output) = encode_pair(Architecture::Forward, &e, &a).unwrap();
            let lp = sequence_log_prob(&store, Architecture::Forward, &a, &input, &output).unwrap();
            assert!(lp.is_finite() && lp <= 0.0, "seed {seed}: {lp}");
        }
    }

    #[test]
    fn lm_length_one_mass_is_subdistribution() {
        let a = Alphabet::standard();
        let store = init_store(Architecture::CharLm, tiny_hyper(&a), &a, 3);
        let lm = CharLmRef::new(&store, &a).unwrap();
        let mut mass = 0.0;
        for c in 'a'..='z' {
            let word = encode_target_word(&c.to_string(), &a).unwrap();
            mass += lm.lm_log_prob(&word).unwrap().exp();
        }
        assert!(mass <= 1.0 + 1e-12, "mass {mass}");
    }

    #[test]
    fn output_must_end_with_stop() {
        let a = Alphabet::standard();
        let store = init_store(Architecture::Forward, tiny_hyper(&a), &a, 1);
        let input = ids(&a, "ab;cd");
        let bad = ids(&a, "abc"); // no stop
        assert!(matches!(
            sequence_log_prob(&store, Architecture::Forward, &a, &input, &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sos_convention_is_pad_everywhere() {
        let a = Alphabet::standard();
        assert_eq!(start_of_sequence_convention(&a), a.pad());
        let s2s = init_store(Architecture::Forward, tiny_hyper(&a), &a, 0);
        let lm = init_store(Architecture::CharLm, tiny_hyper(&a), &a, 0);
        let m = Seq2SeqRef::new(&s2s, Architecture::Forward, &a).unwrap();
        let l = CharLmRef::new(&lm, &a).unwrap();
        assert_eq!(m.sos(), l.sos);
        assert_eq!(m.sos(), a.pad());
    }

    #[test]
    fn tape_and_pure_paths_agree() {
        let a = Alphabet::standard();
        for seed in 0..5 {
            for arch in [Architecture::Forward, Architecture::Backward] {
                let store = init_store(arch, tiny_hyper(&a), &a, seed);
                let e = Example::new("shopping", "marathon", Some("shopathon"), NormalizePolicy::Drop)
                    .unwrap();
                let (input, output) = encode_pair(arch, &e, &a).unwrap();

                let pure = sequence_log_prob(&store, arch, &a, &input, &output).unwrap();

                let mut tape = Tape::new();
                let (model, _) = bind_seq2seq(&mut tape, &store, &a).unwrap();
                let nll = model.nll(&mut tape, &input, &output).unwrap();
                let tape_lp = -tape.value(nll).scalar();

                assert!(
                    (pure - tape_lp).abs() < 1e-9,
                    "seed {seed} {arch:?}: pure {pure} vs tape {tape_lp}"
                );
            }
        }
    }

    #[test]
    fn charlm_tape_and_pure_agree() {
        let a = Alphabet::standard();
        let store = init_store(Architecture::CharLm, tiny_hyper(&a), &a, 11);
        let word = encode_target_word("bennifer", &a).unwrap();
        let pure = lm_log_prob(&store, &a, &word).unwrap();

        let mut tape = Tape::new();
        let (lm, _) = bind_charlm(&mut tape, &store, &a).unwrap();
        let nll = lm.nll(&mut tape, &word).unwrap();
        assert!((pure + tape.value(nll).scalar()).abs() < 1e-9);
    }

    #[test]
    fn attention_off_uses_zero_context_and_same_params() {
        let a = Alphabet::standard();
        let mut hyper = tiny_hyper(&a);
        hyper.attention = false;
        let store = init_store(Architecture::Forward, hyper, &a, 2);
        validate_store(&store, Architecture::Forward, &a).unwrap();
        let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
        let enc = model.encode(&ids(&a, "ab;c")).unwrap();
        let mut state = model.init_state(&enc);
        let _ = model.step(&mut state, model.sos(), &enc);
        assert!(state.ctx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_graph_gradients_check_out() {
        let a = Alphabet::standard();
        let hyper = HyperParams::new(3, 4, true, &a);
        let e = Example::new("ab", "cd", Some("ad"), NormalizePolicy::Drop).unwrap();

        for arch in [Architecture::Forward, Architecture::Backward] {
            let pairs = vec![encode_pair(arch, &e, &a).unwrap()];
            let err = seq2seq_grad_check(arch, hyper, &a, 31, &pairs, 1e-5).unwrap();
            assert!(err < 1e-4, "{arch:?} max relative error {err}");
        }
    }

    #[test]
    fn charlm_graph_gradients_check_out() {
        let a = Alphabet::standard();
        let hyper = HyperParams::new(3, 4, true, &a);
        let words = vec![encode_target_word("abc", &a).unwrap()];
        let err = charlm_grad_check(hyper, &a, 13, &words, 1e-5).unwrap();
        assert!(err < 1e-4, "charlm max relative error {err}");
    }

    #[test]
    fn graph_gradients_across_ten_seeds() {
        let a = Alphabet::standard();
        let hyper = HyperParams::new(3, 4, true, &a);
        let e = Example::new("ab", "cd", Some("ad"), NormalizePolicy::Drop).unwrap();
        for seed in 0..10u64 {
            for arch in [Architecture::Forward, Architecture::Backward] {
                let pairs = vec![encode_pair(arch, &e, &a).unwrap()];
                let err = seq2seq_grad_check(arch, hyper, &a, seed, &pairs, 1e-5).unwrap();
                assert!(err < 1e-4, "{arch:?} seed {seed}: {err}");
            }
            let words = vec![encode_target_word("abc", &a).unwrap()];
            let err = charlm_grad_check(hyper, &a, seed, &words, 1e-5).unwrap();
            assert!(err < 1e-4, "charlm seed {seed}: {err}");
        }
    }
}
