//! Metrics (Matches, Distance), coverage and uncovered-example
//! analysis, k-fold cross-validation orchestration, and paired
//! bootstrap significance testing.

use rayon::prelude::*;

use crate::decode::{generate_candidates, predict, Prediction};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::train::{train_pipeline, PipelineConfig};
use crate::vocab::{make_folds, Alphabet, Example, FoldPlan, WordList};

/// Unit-cost Levenshtein distance (insert / delete / substitute).
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ── Evaluation reports ───────────────────────────────────────────────

/// One evaluated example.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub truth: String,
    pub prediction: String,
    pub distance: usize,
    /// Whether the truth is expressible as prefix+suffix of its roots
    /// (present only when roots were available).
    pub covered: Option<bool>,
}

/// Aggregate metrics with the rows they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Percentage of exact matches, in [0, 100].
    pub matches_pct: f64,
    /// Mean Levenshtein distance to ground truth.
    pub mean_distance: f64,
    /// Percentage of covered truths, when coverage was computed.
    pub coverage_pct: Option<f64>,
}

impl EvalReport {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    fn from_rows(rows: Vec<EvalRow>) -> EvalReport {
        let n = rows.len() as f64;
        let matches = rows.iter().filter(|r| r.prediction == r.truth).count();
        let total_dist: usize = rows.iter().map(|r| r.distance).sum();
        let covered: Option<usize> = rows
            .iter()
            .map(|r| r.covered)
            .collect::<Option<Vec<bool>>>()
            .map(|v| v.iter().filter(|&&c| c).count());
        EvalReport {
            matches_pct: 100.0 * matches as f64 / n,
            mean_distance: total_dist as f64 / n,
            coverage_pct: covered.map(|c| 100.0 * c as f64 / n),
            rows,
        }
    }

    /// Per-example TSV: `truth prediction distance covered`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("truth\tprediction\tdistance\tcovered\n");
        for r in &self.rows {
            let cov = match r.covered {
                Some(true) => "1",
                Some(false) => "0",
                None => "-",
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.truth, r.prediction, r.distance, cov
            ));
        }
        s
    }

    /// Short human-readable block.
    pub fn summary_block(&self) -> String {
        let mut s = format!(
            "n        {}\nmatches  {:.2}%\ndistance {:.4}\n",
            self.n(),
            self.matches_pct,
            self.mean_distance
        );
        if let Some(c) = self.coverage_pct {
            s.push_str(&format!("coverage {c:.2}%\n"));
        }
        s
    }
}

/// Exact-match percentage and mean edit distance of aligned
/// prediction/truth lists.
pub fn evaluate(predictions: &[String], truths: &[String]) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let rows = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| EvalRow {
            truth: t.clone(),
            prediction: p.clone(),
            distance: edit_distance(p, t),
            covered: None,
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}

/// As [`evaluate`], with per-row coverage flags computed from the
/// examples' roots.
pub fn evaluate_with_coverage(examples: &[Example], predictions: &[String]) -> Result<EvalReport> {
    if predictions.len() != examples.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let rows = examples
        .iter()
        .zip(predictions)
        .map(|(e, p)| {
            let truth = e
                .truth()
                .ok_or_else(|| Error::Contract(format!("example {e} has no ground truth")))?
                .to_string();
            let covered = truth_covered(e)?;
            Ok(EvalRow {
                distance: edit_distance(p, &truth),
                truth,
                prediction: p.clone(),
                covered: Some(covered),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

fn truth_covered(e: &Example) -> Result<bool> {
    let truth = e
        .truth()
        .ok_or_else(|| Error::Contract(format!("example {e} has no ground truth")))?;
    let set = generate_candidates(&e.root1, &e.root2)?;
    Ok(set.candidates.iter().any(|c| c.surface == truth))
}

// ── Coverage / uncovered analysis ────────────────────────────────────

/// How much of a corpus the prefix+suffix rule can express.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub n: usize,
    pub n_covered: usize,
    pub coverage_pct: f64,
    pub uncovered_indices: Vec<usize>,
}

/// Fraction of ground-truth portmanteaus expressible as a prefix of
/// root 1 plus a suffix of root 2.
pub fn coverage_report(examples: &[Example]) -> Result<CoverageReport> {
    if examples.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    let mut uncovered_indices = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        if !truth_covered(e)? {
            uncovered_indices.push(i);
        }
    }
    let n = examples.len();
    let n_covered = n - uncovered_indices.len();
    Ok(CoverageReport {
        n,
        n_covered,
        coverage_pct: 100.0 * n_covered as f64 / n as f64,
        uncovered_indices,
    })
}

/// Metrics restricted to the examples whose truth the candidate rule
/// cannot express.
#[derive(Debug, Clone)]
pub struct UncoveredReport {
    pub n_total: usize,
    pub n_uncovered: usize,
    pub uncovered_indices: Vec<usize>,
    /// (system name, matches_pct, mean_distance) on the uncovered
    /// subset; empty when everything is covered.
    pub systems: Vec<(String, f64, f64)>,
}

impl UncoveredReport {
    pub fn all_covered(&self) -> bool {
        self.n_uncovered == 0
    }
}

/// Evaluate prediction sets on the uncovered subset only.
pub fn uncovered_analysis(
    examples: &[Example],
    systems: &[(String, Vec<String>)],
) -> Result<UncoveredReport> {
    let cov = coverage_report(examples)?;
    let mut out = UncoveredReport {
        n_total: cov.n,
        n_uncovered: cov.uncovered_indices.len(),
        uncovered_indices: cov.uncovered_indices.clone(),
        systems: Vec::new(),
    };
    if out.n_uncovered == 0 {
        return Ok(out);
    }
    for (name, preds) in systems {
        if preds.len() != examples.len() {
            return Err(Error::Contract(format!(
                "system {name:?} has {} predictions for {} examples",
                preds.len(),
                examples.len()
            )));
        }
        let sub_preds: Vec<String> = cov
            .uncovered_indices
            .iter()
            .map(|&i| preds[i].clone())
            .collect();
        let sub_truths: Vec<String> = cov
            .uncovered_indices
            .iter()
            .map(|&i| examples[i].truth().unwrap_or_default().to_string())
            .collect();
        let report = evaluate(&sub_preds, &sub_truths)?;
        out.systems
            .push((name.clone(), report.matches_pct, report.mean_distance));
    }
    Ok(out)
}

// ── Cross-validation ─────────────────────────────────────────────────

/// One fold's evaluation.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
}

/// Full k-fold outcome.
#[derive(Debug, Clone)]
pub struct CrossvalOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// Macro averages over folds.
    pub mean_matches_pct: f64,
    pub mean_distance: f64,
}

/// Train and evaluate per fold: test on fold i, validate on fold
/// (i+1) mod k, train on the rest. Folds run concurrently; each fold's
/// seeds derive from the master seed and fold id.
pub fn crossval(
    examples: &[Example],
    k: usize,
    pipeline: &PipelineConfig,
    wordlist: Option<&WordList>,
    alphabet: &Alphabet,
) -> Result<CrossvalOutcome> {
    let plan = make_folds(examples.len(), k, derive_seed(pipeline.train.seed, "folds"))?;

    let folds: Vec<FoldResult> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let pick = |idx: &[usize]| -> Vec<Example> {
                idx.iter().map(|&i| examples[i].clone()).collect()
            };
            let train_set = pick(&plan.train_indices(fold));
            let valid_set = pick(&plan.valid_indices(fold));
            let test_indices = plan.test_indices(fold);
            let test_set = pick(&test_indices);

            let mut fold_pipeline = pipeline.clone();
            fold_pipeline.train.seed =
                derive_seed(pipeline.train.seed, &format!("fold/{fold}"));
            let models = train_pipeline(&train_set, &valid_set, wordlist, &fold_pipeline, alphabet)
                .map_err(|e| Error::Config(format!("fold {fold}: {e}")))?;
            let set = models.model_set();

            let predictions: Vec<Prediction> = test_set
                .iter()
                .map(|e| predict(e, &pipeline.strategy, &set, alphabet))
                .collect::<Result<_>>()
                .map_err(|e| Error::Config(format!("fold {fold}: {e}")))?;
            let surfaces: Vec<String> = predictions.iter().map(|p| p.surface.clone()).collect();
            let report = evaluate_with_coverage(&test_set, &surfaces)?;
            Ok(FoldResult {
                fold,
                test_indices,
                predictions,
                report,
            })
        })
        .collect::<Result<_>>()?;

    let mean_matches_pct =
        folds.iter().map(|f| f.report.matches_pct).sum::<f64>() / k as f64;
    let mean_distance = folds.iter().map(|f| f.report.mean_distance).sum::<f64>() / k as f64;
    Ok(CrossvalOutcome {
        plan,
        folds,
        mean_matches_pct,
        mean_distance,
    })
}

// ── Paired bootstrap ─────────────────────────────────────────────────

/// Win fractions of system A over system B across resampled subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub m: usize,
    pub n_subset: usize,
    pub margin: f64,
    pub seed: u64,
    /// Fraction of subsets where A gets strictly more exact matches.
    pub p_better_matches: f64,
    /// Fraction of subsets where A's mean distance undercuts B's by at
    /// least `margin`.
    pub p_distance_margin: f64,
}

/// Compare two systems on `m` subsets of size `n_subset`, sampled
/// without replacement. Ties never count as wins. Deterministic given
/// the seed; the resampled index sets depend only on (n, n_subset, m,
/// seed), never on the predictions.
pub fn paired_bootstrap(
    preds_a: &[String],
    preds_b: &[String],
    truths: &[String],
    m: usize,
    n_subset: usize,
    margin: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    let n = truths.len();
    if preds_a.len() != n || preds_b.len() != n {
        return Err(Error::Contract(format!(
            "misaligned inputs: {} vs {} vs {} rows",
            preds_a.len(),
            preds_b.len(),
            n
        )));
    }
    if n == 0 || n_subset == 0 || n_subset > n {
        return Err(Error::Contract(format!(
            "subset size {n_subset} invalid for {n} examples"
        )));
    }
    if m == 0 {
        return Err(Error::Contract("need at least one resample".into()));
    }

    let match_a: Vec<bool> = preds_a.iter().zip(truths).map(|(p, t)| p == t).collect();
    let match_b: Vec<bool> = preds_b.iter().zip(truths).map(|(p, t)| p == t).collect();
    let dist_a: Vec<usize> = preds_a
        .iter()
        .zip(truths)
        .map(|(p, t)| edit_distance(p, t))
        .collect();
    let dist_b: Vec<usize> = preds_b
        .iter()
        .zip(truths)
        .map(|(p, t)| edit_distance(p, t))
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut wins_matches = 0usize;
    let mut wins_distance = 0usize;
    for _ in 0..m {
        // Partial Fisher-Yates: the first n_subset entries become the
        // sample.
        for i in 0..n_subset {
            let j = rand::Rng::gen_range(&mut rng, i..n);
            indices.swap(i, j);
        }
        let sample = &indices[..n_subset];
        let ma = sample.iter().filter(|&&i| match_a[i]).count();
        let mb = sample.iter().filter(|&&i| match_b[i]).count();
        if ma > mb {
            wins_matches += 1;
        }
        let da: usize = sample.iter().map(|&i| dist_a[i]).sum();
        let db: usize = sample.iter().map(|&i| dist_b[i]).sum();
        let mean_a = da as f64 / n_subset as f64;
        let mean_b = db as f64 / n_subset as f64;
        if mean_b - mean_a >= margin {
            wins_distance += 1;
        }
    }

    Ok(BootstrapResult {
        m,
        n_subset,
        margin,
        seed,
        p_better_matches: wins_matches as f64 / m as f64,
        p_distance_margin: wins_distance as f64 / m as f64,
    })
}
