//! Prediction strategies: greedy and beam decoding, exhaustive
//! prefix+suffix candidate generation, and candidate scoring under the
//! forward model or the noisy-channel (backward x LM) factorization,
//! with optional ensemble averaging of log probabilities.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::{Architecture, CharLmRef, Seq2SeqRef};
use crate::vocab::{encode_input, encode_target_word, Alphabet, Example, SymbolId};

/// Score-map keys used by the scorers.
pub const TAG_FORWARD: &str = "forward";
pub const TAG_BACKWARD: &str = "backward";
pub const TAG_LM: &str = "lm";
pub const TAG_TOTAL: &str = "total";

/// Extra decode steps allowed beyond the input length: portmanteaus are
/// shorter than the concatenated roots, the slack guards against
/// non-terminating untrained models.
pub const MAX_LEN_SLACK: usize = 5;

// ── Candidates ───────────────────────────────────────────────────────

/// A generated output string with its split provenance and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub surface: String,
    /// Characters taken from the front of root 1.
    pub prefix_len: usize,
    /// Characters taken from the back of root 2.
    pub suffix_len: usize,
    /// Per-model log probabilities, filled by scoring.
    pub scores: BTreeMap<String, f64>,
}

impl Candidate {
    pub fn total_score(&self) -> f64 {
        self.scores.get(TAG_TOTAL).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Deduplicated candidates plus the raw (i, j) grid size.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// |root1| * |root2|, before deduplication.
    pub raw_count: usize,
    /// Unique surfaces, sorted lexicographically; each keeps the
    /// longest-prefix split that produces it.
    pub candidates: Vec<Candidate>,
}

/// Every concatenation of a non-empty prefix of `root1` with a
/// non-empty suffix of `root2`.
pub fn generate_candidates(root1: &str, root2: &str) -> Result<CandidateSet> {
    if root1.is_empty() || root2.is_empty() {
        return Err(Error::Contract(
            "candidate generation requires non-empty roots".into(),
        ));
    }
    let c1: Vec<char> = root1.chars().collect();
    let c2: Vec<char> = root2.chars().collect();
    let raw_count = c1.len() * c2.len();

    let mut seen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for i in 1..=c1.len() {
        for j in 1..=c2.len() {
            let mut surface: String = c1[..i].iter().collect();
            surface.extend(&c2[c2.len() - j..]);
            // A surface may arise from several splits (i + j is fixed at
            // its length); keep the longest-prefix one, e.g. bennifer is
            // (3,5) = ben+nifer rather than (1,7) = b+ennifer.
            seen.insert(surface, (i, j));
        }
    }
    let candidates = seen
        .into_iter()
        .map(|(surface, (prefix_len, suffix_len))| Candidate {
            surface,
            prefix_len,
            suffix_len,
            scores: BTreeMap::new(),
        })
        .collect();
    Ok(CandidateSet {
        raw_count,
        candidates,
    })
}

// ── Strategies ───────────────────────────────────────────────────────

/// How candidates are scored under the `Score` strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scorer {
    /// log P(y|x) from a single forward model.
    Forward,
    /// log P(x|y) + lambda * log P(y), single members.
    Backward { lambda: f64 },
    /// Mean forward log-prob across ensemble members.
    ForwardEnsemble,
    /// Per-term ensemble means of the noisy-channel score.
    BackwardEnsemble { lambda: f64 },
}

/// Top-level prediction strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
    Score { scorer: Scorer },
}

impl DecodeStrategy {
    /// Build from CLI-style flags, enforcing the legal pairings:
    /// greedy and beam run only with the forward model.
    pub fn from_flags(
        strategy: &str,
        scorer: &str,
        lambda: f64,
        beam_width: usize,
        ensemble: bool,
    ) -> Result<DecodeStrategy> {
        if lambda <= 0.0 {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        match (strategy, scorer) {
            ("greedy", "forward") => Ok(DecodeStrategy::Greedy),
            ("beam", "forward") => {
                if beam_width == 0 {
                    return Err(Error::Config("beam width must be at least 1".into()));
                }
                Ok(DecodeStrategy::Beam { width: beam_width })
            }
            ("greedy" | "beam", other) => Err(Error::Config(format!(
                "{strategy} decoding requires the forward scorer, not {other:?}"
            ))),
            ("score", "forward") => Ok(DecodeStrategy::Score {
                scorer: if ensemble {
                    Scorer::ForwardEnsemble
                } else {
                    Scorer::Forward
                },
            }),
            ("score", "backward") => Ok(DecodeStrategy::Score {
                scorer: if ensemble {
                    Scorer::BackwardEnsemble { lambda }
                } else {
                    Scorer::Backward { lambda }
                },
            }),
            (s, sc) => Err(Error::Config(format!(
                "unknown strategy/scorer combination {s:?}/{sc:?}"
            ))),
        }
    }
}

impl std::fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeStrategy::Greedy => write!(f, "greedy"),
            DecodeStrategy::Beam { width } => write!(f, "beam({width})"),
            DecodeStrategy::Score { scorer } => match scorer {
                Scorer::Forward => write!(f, "score(forward)"),
                Scorer::ForwardEnsemble => write!(f, "score(forward,ens)"),
                Scorer::Backward { lambda } => write!(f, "score(backward,lambda={lambda})"),
                Scorer::BackwardEnsemble { lambda } => {
                    write!(f, "score(backward,ens,lambda={lambda})")
                }
            },
        }
    }
}

/// The trained models a strategy may draw on. Empty vectors mean the
/// model is absent; index 0 is the "single" member.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub forward: Vec<ParamStore>,
    pub backward: Vec<ParamStore>,
    pub lm: Vec<ParamStore>,
}

/// Symbols never emitted by autoregressive decoding for an
/// architecture. A portmanteau never contains the separator, so the
/// forward direction masks it; the backward direction must emit it.
/// Pad is never emitted; stop stays eligible.
pub fn emission_mask(arch: Architecture, alphabet: &Alphabet) -> Vec<SymbolId> {
    match arch {
        Architecture::Forward => vec![alphabet.pad(), alphabet.separator()],
        Architecture::Backward | Architecture::CharLm => vec![alphabet.pad()],
    }
}

// ── Autoregressive decoding ──────────────────────────────────────────

/// One decoded hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSeq {
    pub ids: Vec<SymbolId>,
    /// Total log probability of the emitted symbols, including the
    /// final stop when the sequence completed.
    pub log_prob: f64,
    /// True when the decoder hit `max_len` without emitting stop.
    pub truncated: bool,
}

fn allowed_symbols(alphabet_len: usize, mask: &[SymbolId]) -> Vec<usize> {
    (0..alphabet_len)
        .filter(|i| !mask.iter().any(|m| m.0 == *i))
        .collect()
}

/// Argmax decoding: pick the most probable allowed symbol each step
/// (ties break toward the lowest id) until stop or `max_len` characters.
pub fn greedy_decode(
    model: &Seq2SeqRef,
    alphabet: &Alphabet,
    input_ids: &[SymbolId],
    max_len: usize,
    mask: &[SymbolId],
) -> Result<DecodedSeq> {
    let enc = model.encode(input_ids)?;
    greedy_from_enc(model, alphabet, &enc, max_len, mask)
}

fn greedy_from_enc(
    model: &Seq2SeqRef,
    alphabet: &Alphabet,
    enc: &[Vec<f64>],
    max_len: usize,
    mask: &[SymbolId],
) -> Result<DecodedSeq> {
    let stop = alphabet.stop();
    if mask.contains(&stop) {
        return Err(Error::Contract("stop symbol cannot be masked".into()));
    }
    let allowed = allowed_symbols(model.alphabet_len(), mask);
    let mut state = model.init_state(enc);
    let mut prev = model.sos();
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = model.step(&mut state, prev, enc);
        let &best = allowed
            .iter()
            .max_by(|&&a, &&b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .expect("allowed set is non-empty");
        log_prob += lp[best];
        if best == stop.0 {
            return Ok(DecodedSeq {
                ids,
                log_prob,
                truncated: false,
            });
        }
        ids.push(SymbolId(best));
        prev = SymbolId(best);
    }
    Ok(DecodedSeq {
        ids,
        log_prob,
        truncated: true,
    })
}

struct Hyp {
    ids: Vec<SymbolId>,
    log_prob: f64,
    state: crate::model::DecoderState,
    prev: SymbolId,
}

/// Length-complete beam search over total log probability. Finished
/// hypotheses retire into a pool and compete with truncated ones by
/// total log-prob at the end; the greedy trajectory is always part of
/// the pool, so the result never scores below greedy. Width 1 is
/// exactly greedy.
pub fn beam_decode(
    model: &Seq2SeqRef,
    alphabet: &Alphabet,
    input_ids: &[SymbolId],
    width: usize,
    max_len: usize,
    mask: &[SymbolId],
) -> Result<DecodedSeq> {
    if width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let stop = alphabet.stop();
    if mask.contains(&stop) {
        return Err(Error::Contract("stop symbol cannot be masked".into()));
    }
    let enc = model.encode(input_ids)?;
    let allowed = allowed_symbols(model.alphabet_len(), mask);

    let mut pool: Vec<DecodedSeq> = vec![greedy_from_enc(model, alphabet, &enc, max_len, mask)?];
    if max_len == 0 {
        // Nothing may be emitted; the empty truncated hypothesis is the
        // only output, same as greedy.
        return Ok(pool.remove(0));
    }

    let mut live: Vec<Hyp> = vec![Hyp {
        ids: Vec::new(),
        log_prob: 0.0,
        state: model.init_state(&enc),
        prev: model.sos(),
    }];

    while !live.is_empty() {
        // Advance each live hypothesis one step; children share the
        // parent's post-step state.
        let stepped: Vec<(crate::model::DecoderState, Vec<f64>)> = live
            .iter()
            .map(|h| {
                let mut st = h.state.clone();
                let lp = model.step(&mut st, h.prev, &enc);
                (st, lp)
            })
            .collect();

        let mut children: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * allowed.len());
        for (pi, (_, lp)) in stepped.iter().enumerate() {
            for &sym in &allowed {
                children.push((live[pi].log_prob + lp[sym], sym, pi));
            }
        }
        children.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        children.truncate(width);

        let mut next_live = Vec::with_capacity(width);
        for (lp, sym, pi) in children {
            if sym == stop.0 {
                pool.push(DecodedSeq {
                    ids: live[pi].ids.clone(),
                    log_prob: lp,
                    truncated: false,
                });
            } else {
                let mut ids = live[pi].ids.clone();
                ids.push(SymbolId(sym));
                if ids.len() >= max_len {
                    pool.push(DecodedSeq {
                        ids,
                        log_prob: lp,
                        truncated: true,
                    });
                } else {
                    next_live.push(Hyp {
                        ids,
                        log_prob: lp,
                        state: stepped[pi].0.clone(),
                        prev: SymbolId(sym),
                    });
                }
            }
        }
        live = next_live;
    }

    pool.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then(a.truncated.cmp(&b.truncated))
            .then(a.ids.cmp(&b.ids))
    });
    Ok(pool.into_iter().next().expect("pool holds at least greedy"))
}

// ── Candidate scoring ────────────────────────────────────────────────

fn members<'a>(stores: &'a [ParamStore], all: bool, what: &str) -> Result<&'a [ParamStore]> {
    if stores.is_empty() {
        return Err(Error::Config(format!("scorer needs a {what} model, none loaded")));
    }
    Ok(if all { stores } else { &stores[..1] })
}

/// Mean in deviation form: exact when every member is identical, so an
/// ensemble of M equal models scores exactly like a single one.
fn ensemble_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Score candidates under a scorer and sort them best-first
/// (stable, ties break on the surface). Ensemble scores are the
/// arithmetic mean of member log probabilities, term by term.
pub fn score_candidates(
    mut candidates: Vec<Candidate>,
    scorer: &Scorer,
    models: &ModelSet,
    root1: &str,
    root2: &str,
    alphabet: &Alphabet,
) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidates to score".into()));
    }
    let example = Example {
        root1: root1.to_string(),
        root2: root2.to_string(),
        target: None,
    };
    let x_ids = encode_input(&example, alphabet)?;

    match scorer {
        Scorer::Forward | Scorer::ForwardEnsemble => {
            let all = matches!(scorer, Scorer::ForwardEnsemble);
            let members = members(&models.forward, all, "forward")?;
            // The input is shared by every candidate: encode it once
            // per member.
            let refs: Vec<(Seq2SeqRef, Vec<Vec<f64>>)> = members
                .iter()
                .map(|m| {
                    let r = Seq2SeqRef::new(m, Architecture::Forward, alphabet)?;
                    let enc = r.encode(&x_ids)?;
                    Ok((r, enc))
                })
                .collect::<Result<_>>()?;
            let scores: Vec<f64> = candidates
                .par_iter()
                .map(|c| {
                    let y = encode_target_word(&c.surface, alphabet)?;
                    let per_member: Vec<f64> = refs
                        .iter()
                        .map(|(r, enc)| r.sequence_log_prob_given(enc, &y))
                        .collect::<Result<_>>()?;
                    Ok(ensemble_mean(&per_member))
                })
                .collect::<Result<_>>()?;
            for (c, s) in candidates.iter_mut().zip(scores) {
                c.scores.insert(TAG_FORWARD.into(), s);
                c.scores.insert(TAG_TOTAL.into(), s);
            }
        }
        Scorer::Backward { lambda } | Scorer::BackwardEnsemble { lambda } => {
            let all = matches!(scorer, Scorer::BackwardEnsemble { .. });
            let bwd = members(&models.backward, all, "backward")?;
            let lms = members(&models.lm, all, "language")?;
            let bwd_refs: Vec<Seq2SeqRef> = bwd
                .iter()
                .map(|m| Seq2SeqRef::new(m, Architecture::Backward, alphabet))
                .collect::<Result<_>>()?;
            let lm_refs: Vec<CharLmRef> = lms
                .iter()
                .map(|m| CharLmRef::new(m, alphabet))
                .collect::<Result<_>>()?;
            let mut out_ids = x_ids.clone();
            out_ids.push(alphabet.stop());

            let scores: Vec<(f64, f64)> = candidates
                .par_iter()
                .map(|c| {
                    let y_in = alphabet.encode(&c.surface)?;
                    let y_word = encode_target_word(&c.surface, alphabet)?;
                    let b: Vec<f64> = bwd_refs
                        .iter()
                        .map(|r| r.sequence_log_prob(&y_in, &out_ids))
                        .collect::<Result<_>>()?;
                    let l: Vec<f64> = lm_refs
                        .iter()
                        .map(|r| r.lm_log_prob(&y_word))
                        .collect::<Result<_>>()?;
                    Ok((ensemble_mean(&b), ensemble_mean(&l)))
                })
                .collect::<Result<_>>()?;
            for (c, (b, l)) in candidates.iter_mut().zip(scores) {
                c.scores.insert(TAG_BACKWARD.into(), b);
                c.scores.insert(TAG_LM.into(), l);
                c.scores.insert(TAG_TOTAL.into(), b + lambda * l);
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.total_score()
            .total_cmp(&a.total_score())
            .then_with(|| a.surface.cmp(&b.surface))
    });
    Ok(candidates)
}

// ── Full prediction ──────────────────────────────────────────────────

/// A prediction with its diagnostics.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub surface: String,
    pub truncated: bool,
    pub raw_candidate_count: usize,
    pub candidate_count: usize,
    /// Whether the ground truth is expressible as prefix+suffix
    /// (only when the example carries a truth).
    pub truth_in_candidates: Option<bool>,
    /// Log probabilities of the emitted prediction.
    pub scores: BTreeMap<String, f64>,
    /// Candidates best-first (Score strategy only).
    pub ranked: Vec<Candidate>,
}

/// Run one example through a strategy. Greedy and beam require the
/// forward model; Score requires whatever its scorer names.
pub fn predict(
    example: &Example,
    strategy: &DecodeStrategy,
    models: &ModelSet,
    alphabet: &Alphabet,
) -> Result<Prediction> {
    let cands = generate_candidates(&example.root1, &example.root2)?;
    let truth_in_candidates = example
        .truth()
        .map(|t| cands.candidates.iter().any(|c| c.surface == t));
    let raw_candidate_count = cands.raw_count;
    let candidate_count = cands.candidates.len();

    let forward_ref = || -> Result<&ParamStore> {
        models.forward.first().ok_or_else(|| {
            Error::Config("greedy/beam decoding requires a forward model, none loaded".into())
        })
    };

    match strategy {
        DecodeStrategy::Greedy | DecodeStrategy::Beam { .. } => {
            let store = forward_ref()?;
            let model = Seq2SeqRef::new(store, Architecture::Forward, alphabet)?;
            let input = encode_input(example, alphabet)?;
            let max_len = input.len() + MAX_LEN_SLACK;
            let mask = emission_mask(Architecture::Forward, alphabet);
            let out = match strategy {
                DecodeStrategy::Greedy => greedy_decode(&model, alphabet, &input, max_len, &mask)?,
                DecodeStrategy::Beam { width } => {
                    beam_decode(&model, alphabet, &input, *width, max_len, &mask)?
                }
                DecodeStrategy::Score { .. } => unreachable!(),
            };
            let mut scores = BTreeMap::new();
            scores.insert(TAG_FORWARD.into(), out.log_prob);
            scores.insert(TAG_TOTAL.into(), out.log_prob);
            Ok(Prediction {
                surface: alphabet.decode(&out.ids),
                truncated: out.truncated,
                raw_candidate_count,
                candidate_count,
                truth_in_candidates,
                scores,
                ranked: Vec::new(),
            })
        }
        DecodeStrategy::Score { scorer } => {
            let ranked = score_candidates(
                cands.candidates,
                scorer,
                models,
                &example.root1,
                &example.root2,
                alphabet,
            )?;
            let top = ranked.first().expect("score_candidates keeps all candidates");
            Ok(Prediction {
                surface: top.surface.clone(),
                truncated: false,
                raw_candidate_count,
                candidate_count,
                truth_in_candidates,
                scores: top.scores.clone(),
                ranked,
            })
        }
    }
}

/// Per-example diagnostics TSV:
/// `root1 root2 truth prediction truth_in_candidates n_candidates top5`.
/// The top-5 column lists `surface:score` pairs, best first, and is
/// empty for strategies that do not rank candidates.
pub fn diagnostics_tsv(examples: &[Example], predictions: &[Prediction]) -> String {
    let mut s = String::from(
        "root1\troot2\ttruth\tprediction\ttruth_in_candidates\tn_candidates\ttop5\n",
    );
    for (e, p) in examples.iter().zip(predictions) {
        let tic = match p.truth_in_candidates {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        let top5: Vec<String> = p
            .ranked
            .iter()
            .take(5)
            .map(|c| format!("{}:{}", c.surface, c.total_score()))
            .collect();
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.root1,
            e.root2,
            e.truth().unwrap_or("-"),
            p.surface,
            tic,
            p.candidate_count,
            top5.join(";")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::HyperParams;
    use crate::model::{init_store, init_store_scaled};
    use crate::vocab::NormalizePolicy;
    use proptest::prelude::*;

    fn alpha() -> Alphabet {
        Alphabet::standard()
    }

    fn tiny_models(seed: u64) -> ModelSet {
        let a = alpha();
        let hyper = HyperParams::new(4, 6, true, &a);
        ModelSet {
            forward: vec![init_store(Architecture::Forward, hyper, &a, seed)],
            backward: vec![init_store(Architecture::Backward, hyper, &a, seed + 1000)],
            lm: vec![init_store(Architecture::CharLm, hyper, &a, seed + 2000)],
        }
    }

    #[test]
    fn candidates_space_time() {
        let set = generate_candidates("space", "time").unwrap();
        assert_eq!(set.raw_count, 20);
        let surfaces: Vec<&str> = set.candidates.iter().map(|c| c.surface.as_str()).collect();
        assert!(surfaces.contains(&"spime"));
        assert!(surfaces.contains(&"spacetime"));
        let spime = set.candidates.iter().find(|c| c.surface == "spime").unwrap();
        assert_eq!((spime.prefix_len, spime.suffix_len), (2, 3));
        let full = set
            .candidates
            .iter()
            .find(|c| c.surface == "spacetime")
            .unwrap();
        assert_eq!((full.prefix_len, full.suffix_len), (5, 4));
    }

    #[test]
    fn candidates_ben_jennifer() {
        let set = generate_candidates("ben", "jennifer").unwrap();
        let bennifer = set
            .candidates
            .iter()
            .find(|c| c.surface == "bennifer")
            .expect("bennifer generated");
        assert_eq!((bennifer.prefix_len, bennifer.suffix_len), (3, 5));
    }

    #[test]
    fn candidates_single_pair() {
        let set = generate_candidates("a", "b").unwrap();
        assert_eq!(set.raw_count, 1);
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].surface, "ab");
    }

    #[test]
    fn candidates_empty_root_rejected() {
        assert!(matches!(
            generate_candidates("", "b"),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn candidates_dedup_keeps_longest_prefix_split() {
        let set = generate_candidates("aa", "aa").unwrap();
        assert_eq!(set.raw_count, 4);
        let surfaces: Vec<(&str, usize, usize)> = set
            .candidates
            .iter()
            .map(|c| (c.surface.as_str(), c.prefix_len, c.suffix_len))
            .collect();
        assert_eq!(
            surfaces,
            vec![("aa", 1, 1), ("aaa", 2, 1), ("aaaa", 2, 2)]
        );
        // Sorted lexicographically.
        let mut sorted = surfaces.clone();
        sorted.sort();
        assert_eq!(surfaces, sorted);
    }

    #[test]
    fn strategy_flag_pairings() {
        assert!(DecodeStrategy::from_flags("greedy", "forward", 1.0, 5, false).is_ok());
        assert!(matches!(
            DecodeStrategy::from_flags("greedy", "backward", 1.0, 5, false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            DecodeStrategy::from_flags("beam", "backward", 1.0, 5, true),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            DecodeStrategy::from_flags("score", "backward", 0.0, 5, false),
            Err(Error::Config(_))
        ));
        assert_eq!(
            DecodeStrategy::from_flags("score", "backward", 1.0, 5, true).unwrap(),
            DecodeStrategy::Score {
                scorer: Scorer::BackwardEnsemble { lambda: 1.0 }
            }
        );
    }

    #[test]
    fn greedy_never_emits_separator_or_pad() {
        let a = alpha();
        for seed in 0..20 {
            let models = tiny_models(seed);
            let model = Seq2SeqRef::new(&models.forward[0], Architecture::Forward, &a).unwrap();
            let input = a.encode("abc;defg").unwrap();
            let mask = emission_mask(Architecture::Forward, &a);
            let out = greedy_decode(&model, &a, &input, input.len() + MAX_LEN_SLACK, &mask).unwrap();
            assert!(out.ids.len() <= input.len() + MAX_LEN_SLACK);
            for id in &out.ids {
                assert_ne!(*id, a.separator());
                assert_ne!(*id, a.pad());
            }
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let a = alpha();
        let inputs = ["ab;cd", "space;time", "q;zzz"];
        for seed in 0..100 {
            let models = tiny_models(seed);
            let model = Seq2SeqRef::new(&models.forward[0], Architecture::Forward, &a).unwrap();
            let mask = emission_mask(Architecture::Forward, &a);
            let input = a.encode(inputs[seed as usize % inputs.len()]).unwrap();
            let max_len = input.len() + MAX_LEN_SLACK;
            let g = greedy_decode(&model, &a, &input, max_len, &mask).unwrap();
            let b = beam_decode(&model, &a, &input, 1, max_len, &mask).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn zero_max_len_yields_empty_truncated_output() {
        let a = alpha();
        let models = tiny_models(1);
        let model = Seq2SeqRef::new(&models.forward[0], Architecture::Forward, &a).unwrap();
        let mask = emission_mask(Architecture::Forward, &a);
        let input = a.encode("ab;c").unwrap();
        let g = greedy_decode(&model, &a, &input, 0, &mask).unwrap();
        let b = beam_decode(&model, &a, &input, 4, 0, &mask).unwrap();
        assert!(g.ids.is_empty() && g.truncated);
        assert_eq!(g, b);
    }

    #[test]
    fn beam_dominates_greedy() {
        let a = alpha();
        for seed in 0..34 {
            let models = tiny_models(seed + 100);
            let model = Seq2SeqRef::new(&models.forward[0], Architecture::Forward, &a).unwrap();
            let mask = emission_mask(Architecture::Forward, &a);
            let input = a.encode("abcd;efg").unwrap();
            let max_len = input.len() + MAX_LEN_SLACK;
            let g = greedy_decode(&model, &a, &input, max_len, &mask).unwrap();
            for width in [2, 5, 8] {
                let b = beam_decode(&model, &a, &input, width, max_len, &mask).unwrap();
                assert!(
                    b.log_prob >= g.log_prob - 1e-12,
                    "seed {seed} width {width}: beam {} < greedy {}",
                    b.log_prob,
                    g.log_prob
                );
            }
        }
    }

    #[test]
    fn huge_beam_equals_exhaustive_argmax() {
        let a = alpha();
        let hyper = HyperParams::new(3, 4, true, &a);
        let mask = emission_mask(Architecture::Forward, &a);
        let allowed: Vec<usize> = allowed_symbols(a.len(), &mask)
            .into_iter()
            .filter(|&s| s != a.stop().0)
            .collect();
        let max_len = 2usize;

        for seed in 0..4 {
            let store = init_store_scaled(Architecture::Forward, hyper, &a, seed, 0.6);
            let model = Seq2SeqRef::new(&store, Architecture::Forward, &a).unwrap();
            let input = a.encode("ab;c").unwrap();
            let enc = model.encode(&input).unwrap();

            // Brute force over the exact hypothesis space the beam
            // explores: stop-terminated sequences shorter than max_len
            // plus truncated sequences of exactly max_len characters.
            let mut best: Option<DecodedSeq> = None;
            let mut consider = |cand: DecodedSeq| {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        cand.log_prob > b.log_prob
                            || (cand.log_prob == b.log_prob
                                && (cand.truncated, &cand.ids) < (b.truncated, &b.ids))
                    }
                };
                if better {
                    best = Some(cand);
                }
            };
            // Enumerate every symbol sequence of length <= max_len.
            // Stack entries carry the decoder state after the prefix and
            // the next-symbol log-probs from it.
            let mut init_state = model.init_state(&enc);
            let init_lp = model.step(&mut init_state, model.sos(), &enc);
            let mut stack = vec![(Vec::<SymbolId>::new(), 0.0f64, init_state, init_lp)];
            while let Some((prefix, total, state, step_lp)) = stack.pop() {
                if prefix.len() < max_len {
                    consider(DecodedSeq {
                        ids: prefix.clone(),
                        log_prob: total + step_lp[a.stop().0],
                        truncated: false,
                    });
                    for &s in &allowed {
                        let mut st = state.clone();
                        let next_lp = model.step(&mut st, SymbolId(s), &enc);
                        let mut ids = prefix.clone();
                        ids.push(SymbolId(s));
                        stack.push((ids, total + step_lp[s], st, next_lp));
                    }
                } else {
                    consider(DecodedSeq {
                        ids: prefix,
                        log_prob: total,
                        truncated: true,
                    });
                }
            }
            let brute = best.unwrap();

            let width = a.len().pow(max_len as u32); // >= every reachable hypothesis
            let beam = beam_decode(&model, &a, &input, width, max_len, &mask).unwrap();
            assert_eq!(beam.ids, brute.ids, "seed {seed}");
            assert!((beam.log_prob - brute.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn scorer_identity_and_shift_invariance() {
        let a = alpha();
        let models = tiny_models(7);
        let set = generate_candidates("space", "time").unwrap();
        let ranked = score_candidates(
            set.candidates.clone(),
            &Scorer::Backward { lambda: 1.0 },
            &models,
            "space",
            "time",
            &a,
        )
        .unwrap();
        for c in &ranked {
            let b = c.scores[TAG_BACKWARD];
            let l = c.scores[TAG_LM];
            assert_eq!(c.scores[TAG_TOTAL], b + l);
        }
        // Ranking is invariant under adding a constant to all scores.
        let order: Vec<&str> = ranked.iter().map(|c| c.surface.as_str()).collect();
        let mut shifted = ranked.clone();
        for c in shifted.iter_mut() {
            let t = c.scores[TAG_TOTAL];
            c.scores.insert(TAG_TOTAL.into(), t + 123.0);
        }
        shifted.sort_by(|x, y| {
            y.total_score()
                .total_cmp(&x.total_score())
                .then_with(|| x.surface.cmp(&y.surface))
        });
        let order2: Vec<&str> = shifted.iter().map(|c| c.surface.as_str()).collect();
        assert_eq!(order, order2);
    }

    #[test]
    fn ensemble_of_identical_members_equals_single() {
        let a = alpha();
        let single = tiny_models(3);
        let mut multi = single.clone();
        for _ in 0..2 {
            multi.forward.push(single.forward[0].clone());
            multi.backward.push(single.backward[0].clone());
            multi.lm.push(single.lm[0].clone());
        }
        let set = generate_candidates("ben", "jennifer").unwrap();
        for (s_single, s_multi) in [
            (Scorer::Forward, Scorer::ForwardEnsemble),
            (
                Scorer::Backward { lambda: 1.0 },
                Scorer::BackwardEnsemble { lambda: 1.0 },
            ),
        ] {
            let r1 = score_candidates(
                set.candidates.clone(),
                &s_single,
                &single,
                "ben",
                "jennifer",
                &a,
            )
            .unwrap();
            let r3 = score_candidates(
                set.candidates.clone(),
                &s_multi,
                &multi,
                "ben",
                "jennifer",
                &a,
            )
            .unwrap();
            for (c1, c3) in r1.iter().zip(&r3) {
                assert_eq!(c1.surface, c3.surface);
                assert_eq!(c1.scores[TAG_TOTAL], c3.scores[TAG_TOTAL]);
            }
        }
    }

    #[test]
    fn score_output_is_candidate_member() {
        let a = alpha();
        let models = tiny_models(11);
        let e = Example::new("clown", "president", Some("clownsident"), NormalizePolicy::Drop)
            .unwrap();
        let p = predict(
            &e,
            &DecodeStrategy::Score {
                scorer: Scorer::Backward { lambda: 1.0 },
            },
            &models,
            &a,
        )
        .unwrap();
        let set = generate_candidates("clown", "president").unwrap();
        assert!(set.candidates.iter().any(|c| c.surface == p.surface));
        assert_eq!(p.truth_in_candidates, Some(true));
        assert_eq!(p.raw_candidate_count, 5 * 9);
    }

    #[test]
    fn predict_is_deterministic() {
        let a = alpha();
        let models = tiny_models(19);
        let e = Example::new("wiki", "etiquette", Some("wikiquette"), NormalizePolicy::Drop)
            .unwrap();
        let strategy = DecodeStrategy::Score {
            scorer: Scorer::BackwardEnsemble { lambda: 1.0 },
        };
        let p1 = predict(&e, &strategy, &models, &a).unwrap();
        let p2 = predict(&e, &strategy, &models, &a).unwrap();
        assert_eq!(p1.surface, p2.surface);
        assert_eq!(p1.scores, p2.scores);
        let r1: Vec<&str> = p1.ranked.iter().map(|c| c.surface.as_str()).collect();
        let r2: Vec<&str> = p2.ranked.iter().map(|c| c.surface.as_str()).collect();
        assert_eq!(r1, r2);
    }

    #[test]
    fn predict_missing_model_is_config_error() {
        let a = alpha();
        let mut models = tiny_models(2);
        models.forward.clear();
        let e = Example::new("a", "b", None, NormalizePolicy::Drop).unwrap();
        assert!(matches!(
            predict(&e, &DecodeStrategy::Greedy, &models, &a),
            Err(Error::Config(_))
        ));
        models.lm.clear();
        assert!(matches!(
            predict(
                &e,
                &DecodeStrategy::Score {
                    scorer: Scorer::Backward { lambda: 1.0 }
                },
                &models,
                &a
            ),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn candidate_properties(r1 in "[a-z]{1,10}", r2 in "[a-z]{1,10}") {
            let set = generate_candidates(&r1, &r2).unwrap();
            prop_assert_eq!(set.raw_count, r1.len() * r2.len());
            prop_assert!(!set.candidates.is_empty());
            prop_assert!(set.candidates.len() <= set.raw_count);
            let first = r1.chars().next().unwrap();
            let last = r2.chars().last().unwrap();
            let mut prev: Option<&str> = None;
            for c in &set.candidates {
                prop_assert!(c.surface.len() >= 2);
                prop_assert_eq!(c.surface.chars().next().unwrap(), first);
                prop_assert_eq!(c.surface.chars().last().unwrap(), last);
                prop_assert!(c.prefix_len >= 1 && c.prefix_len <= r1.len());
                prop_assert!(c.suffix_len >= 1 && c.suffix_len <= r2.len());
                let rebuilt: String = r1.chars().take(c.prefix_len)
                    .chain(r2.chars().skip(r2.len() - c.suffix_len))
                    .collect();
                prop_assert_eq!(&rebuilt, &c.surface);
                if let Some(p) = prev {
                    prop_assert!(p < c.surface.as_str());
                }
                prev = Some(c.surface.as_str());
            }
        }
    }
}
