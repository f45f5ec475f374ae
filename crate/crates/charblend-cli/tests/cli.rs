//! Binary-level tests of the `charblend` command surface: file
//! round-trips, determinism, exit codes, and output formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_charblend"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small fast flags shared by the training tests.
fn tiny_train_flags(cmd: &mut Command) -> &mut Command {
    cmd.args([
        "--init", "off", "--ensemble", "1", "--epochs", "6", "--patience", "6", "--d-emb", "8",
        "--d-h", "12",
    ])
}

#[test]
fn train_writes_model_files_that_reload_and_reproduce_predictions() {
    let dir = tempdir().unwrap();
    let stem = dir.path().join("m");
    let out = run(tiny_train_flags(
        bin()
            .args(["train", "--data"])
            .arg(fixture("train20.tsv"))
            .args(["--strategy", "greedy", "--scorer", "forward", "--seed", "5", "--model"])
            .arg(&stem),
    ));
    assert_success(&out);
    let model_path = PathBuf::from(format!("{}.forward.model", stem.display()));
    assert!(model_path.exists());

    // Two evals of the saved model produce byte-identical predictions.
    let eval_once = |out_dir: &Path| {
        let out = run(bin()
            .args(["eval", "--data"])
            .arg(fixture("train20.tsv"))
            .args(["--strategy", "greedy", "--scorer", "forward", "--ensemble", "1", "--model"])
            .arg(&stem)
            .arg("--out")
            .arg(out_dir));
        assert_success(&out);
        std::fs::read(out_dir.join("predictions.tsv")).unwrap()
    };
    let p1 = eval_once(&dir.path().join("e1"));
    let p2 = eval_once(&dir.path().join("e2"));
    assert_eq!(p1, p2);

    // The loaded model reproduces those predictions in-process.
    let file = charblend_core::ModelFile::load(&model_path).unwrap();
    let alphabet = file.alphabet.clone();
    let set = charblend_core::ModelSet {
        forward: file.members.clone(),
        ..Default::default()
    };
    let load = charblend_core::vocab::load_dataset(
        fixture("train20.tsv"),
        charblend_core::vocab::NormalizePolicy::Drop,
    )
    .unwrap();
    let text = String::from_utf8(p1).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), load.examples.len());
    for (row, example) in rows.iter().zip(&load.examples) {
        let cols: Vec<&str> = row.split('\t').collect();
        let p = charblend_core::predict(
            example,
            &charblend_core::DecodeStrategy::Greedy,
            &set,
            &alphabet,
        )
        .unwrap();
        assert_eq!(cols[3], p.surface, "row {row}");
    }
}

#[test]
fn identical_train_runs_write_byte_identical_models() {
    let dir = tempdir().unwrap();
    let train_to = |stem: &Path| {
        let out = run(tiny_train_flags(
            bin()
                .args(["train", "--data"])
                .arg(fixture("train20.tsv"))
                .args(["--strategy", "score", "--scorer", "forward", "--seed", "11", "--model"])
                .arg(stem),
        ));
        assert_success(&out);
        std::fs::read(format!("{}.forward.model", stem.display())).unwrap()
    };
    let a = train_to(&dir.path().join("a"));
    let b = train_to(&dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn missing_dataset_exits_2_with_message() {
    let dir = tempdir().unwrap();
    let out = run(bin()
        .args(["train", "--data", "/nonexistent/nope.tsv", "--model"])
        .arg(dir.path().join("m")));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.tsv"), "{stderr}");
}

#[test]
fn greedy_with_backward_scorer_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let out = run(bin()
        .args(["train", "--data"])
        .arg(fixture("train20.tsv"))
        .args(["--strategy", "greedy", "--scorer", "backward", "--model"])
        .arg(dir.path().join("m")));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("forward"), "{stderr}");
}

#[test]
fn suggest_lists_all_candidates_when_top_k_exceeds_count() {
    let dir = tempdir().unwrap();
    let stem = dir.path().join("m");
    let out = run(tiny_train_flags(
        bin()
            .args(["train", "--data"])
            .arg(fixture("train20.tsv"))
            .args(["--strategy", "score", "--scorer", "forward", "--seed", "2", "--model"])
            .arg(&stem),
    ));
    assert_success(&out);

    let out = run(bin()
        .args(["suggest", "we", "go", "--scorer", "forward", "--ensemble", "1", "--top-k", "999", "--model"])
        .arg(&stem));
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    // we;go -> "wo", "wgo", "weo", "wego" (4 unique of 4 raw).
    let data_rows: Vec<&str> = stdout
        .lines()
        .skip_while(|l| !l.starts_with("rank"))
        .skip(1)
        .collect();
    assert_eq!(data_rows.len(), 4, "{stdout}");
    for row in data_rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), 5);
        let i: usize = cols[2].parse().unwrap();
        let j: usize = cols[3].parse().unwrap();
        assert!((1..=2).contains(&i) && (1..=2).contains(&j));
    }
}

#[test]
fn significance_echoes_defaults_and_handles_equal_systems() {
    let dir = tempdir().unwrap();
    let write = |name: &str, lines: &[&str]| {
        let p = dir.path().join(name);
        std::fs::write(&p, lines.join("\n") + "\n").unwrap();
        p
    };
    let truths: Vec<String> = (0..9).map(|i| format!("t{i}")).collect();
    let truth_refs: Vec<&str> = truths.iter().map(|s| s.as_str()).collect();
    let t = write("t.txt", &truth_refs);
    let a = write("a.txt", &truth_refs);
    let out_file = dir.path().join("sig.csv");

    let out = run(bin()
        .args(["significance", "--preds-a"])
        .arg(&a)
        .arg("--preds-b")
        .arg(&a)
        .arg("--truths")
        .arg(&t)
        .arg("--out")
        .arg(&out_file));
    assert_success(&out);
    let text = std::fs::read_to_string(&out_file).unwrap();
    // Defaults echoed: M=1000, N = floor(9/2) = 4.
    assert!(text.contains("seed,M,N,p_better"), "{text}");
    assert!(text.contains("42,1000,4,0"), "{text}");

    // A different seed changes the resamples, never the input hashes.
    let out_file2 = dir.path().join("sig2.csv");
    let out = run(bin()
        .args(["significance", "--seed", "7", "--preds-a"])
        .arg(&a)
        .arg("--preds-b")
        .arg(&a)
        .arg("--truths")
        .arg(&t)
        .arg("--out")
        .arg(&out_file2));
    assert_success(&out);
    let text2 = std::fs::read_to_string(&out_file2).unwrap();
    let fp = |s: &str, key: &str| -> String {
        let at = s.find(key).unwrap() + key.len();
        s[at..at + 70].to_string()
    };
    for key in ["preds_a_fingerprint\":\"", "preds_b_fingerprint\":\"", "truths_fingerprint\":\""] {
        assert_eq!(fp(&text, key), fp(&text2, key));
    }
    assert!(text2.contains("\"seed\":7"), "{text2}");

    // Misaligned files exit 2 and name the row counts.
    let short = write("short.txt", &truth_refs[..5]);
    let out = run(bin()
        .args(["significance", "--preds-a"])
        .arg(&short)
        .arg("--preds-b")
        .arg(&a)
        .arg("--truths")
        .arg(&t));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains('5') && stderr.contains('9'), "{stderr}");
}

#[test]
fn crossval_summary_is_recomputable_from_fold_reports() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("cv");
    let out = run(bin()
        .args(["crossval", "--data"])
        .arg(fixture("train20.tsv"))
        .args([
            "--folds", "5", "--strategy", "greedy", "--scorer", "forward", "--init", "off",
            "--ensemble", "1", "--epochs", "3", "--patience", "3", "--d-emb", "8", "--d-h", "12",
            "--seed", "4",
        ])
        .arg("--out")
        .arg(&out_dir));
    assert_success(&out);

    // Recompute each fold's metrics from its per-example rows.
    let mut matches_sum = 0.0f64;
    let mut dist_sum = 0.0f64;
    for fold in 0..5 {
        let text =
            std::fs::read_to_string(out_dir.join(format!("fold{fold}.report.tsv"))).unwrap();
        let rows: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .collect();
        assert_eq!(rows.len(), 4);
        let mut hits = 0usize;
        let mut dist = 0usize;
        for row in &rows {
            let cols: Vec<&str> = row.split('\t').collect();
            if cols[0] == cols[1] {
                hits += 1;
            }
            dist += cols[2].parse::<usize>().unwrap();
        }
        matches_sum += 100.0 * hits as f64 / rows.len() as f64;
        dist_sum += dist as f64 / rows.len() as f64;
    }
    let expect_matches = matches_sum / 5.0;
    let expect_dist = dist_sum / 5.0;

    let summary = std::fs::read_to_string(out_dir.join("summary.tsv")).unwrap();
    let row = summary
        .lines()
        .find(|l| l.starts_with("forward\t"))
        .expect("summary row present");
    let cols: Vec<&str> = row.split('\t').collect();
    assert_eq!(cols[1], "on"); // attn default
    assert_eq!(cols[2], "1");
    assert_eq!(cols[3], "off");
    assert_eq!(cols[4], "greedy");
    let matches: f64 = cols[5].parse().unwrap();
    let distance: f64 = cols[6].parse().unwrap();
    assert!((matches - expect_matches).abs() < 1e-9);
    assert!((distance - expect_dist).abs() < 1e-9);

    // Fold plan export exists and partitions 20 examples.
    let folds = std::fs::read_to_string(out_dir.join("folds.tsv")).unwrap();
    let assignments: Vec<usize> = folds
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(assignments.len(), 20);
    assert!(assignments.iter().all(|&f| f < 5));
}

#[test]
fn pretrain_embeddings_writes_model_and_curve() {
    let dir = tempdir().unwrap();
    let model = dir.path().join("lm.model");
    let out = run(bin()
        .args(["pretrain-embeddings", "--wordlist"])
        .arg(fixture("words.txt"))
        .args(["--epochs", "3", "--patience", "3", "--d-emb", "8", "--d-h", "12", "--model"])
        .arg(&model));
    assert_success(&out);
    assert!(model.exists());
    assert!(dir.path().join("lm.model.losscurve.csv").exists());

    let file = charblend_core::ModelFile::load(&model).unwrap();
    assert_eq!(file.architecture.tag(), "charlm");
    assert_eq!(file.members.len(), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("perplexity"), "{stdout}");
}
