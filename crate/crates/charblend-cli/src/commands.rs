//! Subcommand implementations.

use std::path::{Path, PathBuf};

use charblend_core::decode::{
    diagnostics_tsv, generate_candidates, predict, score_candidates, DecodeStrategy, ModelSet,
    Scorer,
};
use charblend_core::error::{Error, Result};
use charblend_core::eval::{
    crossval, evaluate_with_coverage, paired_bootstrap, uncovered_analysis, EvalReport,
};
use charblend_core::layers::HyperParams;
use charblend_core::model::Architecture;
use charblend_core::model_io::{dataset_fingerprint, wordlist_fingerprint, ModelFile};
use charblend_core::rng::{derive_seed, rng_from_seed};
use charblend_core::train::{
    loss_curve_csv, pretrain_embeddings, train_pipeline, EnsembleBundle, PipelineConfig,
    TrainConfig,
};
use charblend_core::vocab::{
    load_dataset, Alphabet, Example, NormalizePolicy, WordList,
};
use rand::seq::SliceRandom;

use crate::{
    CrossvalArgs, EvalArgs, ModelFlags, PretrainArgs, SignificanceArgs, SuggestArgs, TrainArgs,
};

// ── Shared plumbing ──────────────────────────────────────────────────

fn strategy_from(flags: &ModelFlags) -> Result<DecodeStrategy> {
    DecodeStrategy::from_flags(
        &flags.strategy,
        &flags.scorer,
        flags.lambda,
        flags.beam_width,
        flags.ensemble > 1,
    )
}

fn train_config(flags: &ModelFlags) -> TrainConfig {
    TrainConfig {
        learning_rate: flags.learning_rate,
        max_epochs: flags.epochs,
        patience: flags.patience,
        clip_norm: flags.clip_norm,
        seed: flags.seed,
        ..TrainConfig::default()
    }
}

fn pipeline_config(flags: &ModelFlags, alphabet: &Alphabet) -> Result<PipelineConfig> {
    Ok(PipelineConfig {
        strategy: strategy_from(flags)?,
        hyper: HyperParams::new(flags.d_emb, flags.d_h, flags.attn, alphabet),
        init_embeddings: flags.init,
        ensemble_m: flags.ensemble,
        subsample_fraction: flags.subsample,
        train: train_config(flags),
    })
}

/// JSON config echo embedded in every output file so a run can be
/// regenerated. Deliberately path-free: two runs of the same
/// configuration produce byte-identical reports wherever they land.
fn run_echo(command: &str, flags: &ModelFlags, extra: &[(&str, serde_json::Value)]) -> String {
    let mut map = serde_json::Map::new();
    map.insert("command".into(), command.into());
    map.insert("attn".into(), flags.attn.into());
    map.insert("ensemble".into(), flags.ensemble.into());
    map.insert("init".into(), flags.init.into());
    map.insert("strategy".into(), flags.strategy.clone().into());
    map.insert("scorer".into(), flags.scorer.clone().into());
    map.insert("lambda".into(), flags.lambda.into());
    map.insert("beam_width".into(), flags.beam_width.into());
    map.insert("seed".into(), flags.seed.into());
    map.insert("d_emb".into(), flags.d_emb.into());
    map.insert("d_h".into(), flags.d_h.into());
    map.insert("epochs".into(), flags.epochs.into());
    map.insert("patience".into(), flags.patience.into());
    map.insert("lr".into(), flags.learning_rate.into());
    map.insert("clip".into(), flags.clip_norm.into());
    map.insert("subsample".into(), flags.subsample.into());
    for (k, v) in extra {
        map.insert((*k).into(), v.clone());
    }
    // serde_json::Map sorts keys, so the serialization is stable.
    serde_json::Value::Object(map).to_string()
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_lines(path: &str) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.to_string(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn load_examples(path: &str) -> Result<Vec<Example>> {
    let load = load_dataset(path, NormalizePolicy::Drop)?;
    if !load.rejections.is_empty() {
        eprintln!("{}: {} line(s) rejected:", path, load.rejections.len());
        for r in &load.rejections {
            eprintln!("  line {}: {}", r.line_no, r.cause);
        }
    }
    if load.examples.is_empty() {
        return Err(Error::Contract(format!("{path} holds no usable examples")));
    }
    Ok(load.examples)
}

fn load_words(path: &str) -> Result<WordList> {
    let wl = WordList::load(path, NormalizePolicy::Drop)?;
    if wl.skipped > 0 {
        eprintln!("{path}: {} word(s) skipped during normalization", wl.skipped);
    }
    if wl.is_empty() {
        return Err(Error::Contract(format!("{path} holds no usable words")));
    }
    Ok(wl)
}

fn model_path(stem: &str, arch: Architecture) -> PathBuf {
    PathBuf::from(format!("{stem}.{}.model", arch.tag()))
}

fn save_bundle(
    stem: &str,
    arch: Architecture,
    bundle: &EnsembleBundle,
    alphabet: &Alphabet,
    cfg: &TrainConfig,
    fingerprint: &str,
    echo: &str,
) -> Result<PathBuf> {
    let path = model_path(stem, arch);
    let file = ModelFile::from_bundle(arch, bundle, alphabet, cfg, fingerprint);
    file.save(&path)?;
    for (i, curve) in bundle.curves.iter().enumerate() {
        let curve_path = PathBuf::from(format!("{stem}.{}.member{i}.losscurve.csv", arch.tag()));
        write_atomic(
            &curve_path,
            &format!("# config: {echo}\n# member_seed: {}\n{}", bundle.member_seeds[i], loss_curve_csv(curve)),
        )?;
    }
    Ok(path)
}

fn needs_arches(strategy: &DecodeStrategy) -> (bool, bool) {
    match strategy {
        DecodeStrategy::Greedy | DecodeStrategy::Beam { .. } => (true, false),
        DecodeStrategy::Score { scorer } => match scorer {
            Scorer::Forward | Scorer::ForwardEnsemble => (true, false),
            Scorer::Backward { .. } | Scorer::BackwardEnsemble { .. } => (false, true),
        },
    }
}

fn load_model_file(stem: &str, arch: Architecture) -> Result<ModelFile> {
    let path = model_path(stem, arch);
    let file = ModelFile::load(&path)?;
    if file.architecture != arch {
        return Err(Error::Config(format!(
            "{} holds a {} model, expected {}",
            path.display(),
            file.architecture.tag(),
            arch.tag()
        )));
    }
    Ok(file)
}

fn load_model_set(stem: &str, strategy: &DecodeStrategy) -> Result<(ModelSet, Alphabet)> {
    let (want_forward, want_backward) = needs_arches(strategy);
    let mut set = ModelSet::default();
    let mut alphabet = Alphabet::standard();
    if want_forward {
        let f = load_model_file(stem, Architecture::Forward)?;
        alphabet = f.alphabet.clone();
        set.forward = f.members;
    }
    if want_backward {
        let b = load_model_file(stem, Architecture::Backward)?;
        alphabet = b.alphabet.clone();
        set.backward = b.members;
        let lm = load_model_file(stem, Architecture::CharLm)?;
        set.lm = lm.members;
    }
    Ok((set, alphabet))
}

/// Hold out roughly 10% (at least one example) as the validation set.
fn train_valid_split(examples: &[Example], seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, "train-valid-split")));
    let n_valid = (examples.len() / 10).max(1);
    let valid: Vec<Example> = order[..n_valid].iter().map(|&i| examples[i].clone()).collect();
    let train: Vec<Example> = order[n_valid..].iter().map(|&i| examples[i].clone()).collect();
    (train, valid)
}

// ── train ────────────────────────────────────────────────────────────

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let alphabet = Alphabet::standard();
    let examples = load_examples(&args.data)?;
    if examples.len() < 2 {
        return Err(Error::Contract(
            "need at least two examples to split off a validation set".into(),
        ));
    }
    let wordlist = args.wordlist.as_deref().map(load_words).transpose()?;
    let pipeline = pipeline_config(&args.flags, &alphabet)?;
    let fingerprint = dataset_fingerprint(&examples);

    let (train_set, valid_set) = train_valid_split(&examples, args.flags.seed);
    let models = train_pipeline(
        &train_set,
        &valid_set,
        wordlist.as_ref(),
        &pipeline,
        &alphabet,
    )?;
    let echo = run_echo(
        "train",
        &args.flags,
        &[("data_fingerprint", fingerprint.clone().into())],
    );

    let mut written = Vec::new();
    if let Some(b) = &models.forward {
        written.push(save_bundle(
            &args.model,
            Architecture::Forward,
            b,
            &alphabet,
            &pipeline.train,
            &fingerprint,
            &echo,
        )?);
    }
    if let Some(b) = &models.backward {
        written.push(save_bundle(
            &args.model,
            Architecture::Backward,
            b,
            &alphabet,
            &pipeline.train,
            &fingerprint,
            &echo,
        )?);
    }
    if let Some(b) = &models.lm {
        let wl_fp = wordlist
            .as_ref()
            .map(|w| wordlist_fingerprint(&w.words))
            .unwrap_or_default();
        written.push(save_bundle(
            &args.model,
            Architecture::CharLm,
            b,
            &alphabet,
            &pipeline.train,
            &wl_fp,
            &echo,
        )?);
    }

    println!(
        "trained on {} examples ({} validation); strategy {}",
        train_set.len(),
        valid_set.len(),
        pipeline.strategy
    );
    for p in &written {
        println!("wrote {}", p.display());
    }
    println!("loss curves: {}.<arch>.member<i>.losscurve.csv", args.model);
    Ok(())
}

// ── crossval ─────────────────────────────────────────────────────────

pub fn cmd_crossval(args: CrossvalArgs) -> Result<()> {
    let alphabet = Alphabet::standard();
    let examples = load_examples(&args.data)?;
    let wordlist = args.wordlist.as_deref().map(load_words).transpose()?;
    let pipeline = pipeline_config(&args.flags, &alphabet)?;
    let echo = run_echo(
        "crossval",
        &args.flags,
        &[
            ("folds", args.folds.into()),
            ("data_fingerprint", dataset_fingerprint(&examples).into()),
        ],
    );

    let outcome = crossval(&examples, args.folds, &pipeline, wordlist.as_ref(), &alphabet)?;

    let out = PathBuf::from(&args.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    write_atomic(
        &out.join("folds.tsv"),
        &format!("# config: {echo}\n{}", outcome.plan.to_tsv()),
    )?;

    for fold in &outcome.folds {
        write_atomic(
            &out.join(format!("fold{}.report.tsv", fold.fold)),
            &format!("# config: {echo}\n# fold: {}\n{}", fold.fold, fold.report.to_tsv()),
        )?;
        let test_examples: Vec<Example> = fold
            .test_indices
            .iter()
            .map(|&i| examples[i].clone())
            .collect();
        write_atomic(
            &out.join(format!("fold{}.diagnostics.tsv", fold.fold)),
            &format!(
                "# config: {echo}\n# fold: {}\n{}",
                fold.fold,
                diagnostics_tsv(&test_examples, &fold.predictions)
            ),
        )?;
    }

    let model_label = if needs_arches(&pipeline.strategy).1 {
        "backward"
    } else {
        "forward"
    };
    let onoff = |b: bool| if b { "on" } else { "off" };
    let summary_tsv = format!(
        "# config: {echo}\nmodel\tattn\tens\tinit\tprediction\tmatches\tdistance\n{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        model_label,
        onoff(args.flags.attn),
        args.flags.ensemble,
        onoff(args.flags.init),
        args.flags.strategy,
        outcome.mean_matches_pct,
        outcome.mean_distance,
    );
    write_atomic(&out.join("summary.tsv"), &summary_tsv)?;

    let mut text = format!("# config: {echo}\n{}-fold cross-validation\n", args.folds);
    for fold in &outcome.folds {
        text.push_str(&format!(
            "fold {}: matches {:.2}%  distance {:.4}  (n={})\n",
            fold.fold,
            fold.report.matches_pct,
            fold.report.mean_distance,
            fold.report.n()
        ));
    }
    text.push_str(&format!(
        "mean: matches {:.2}%  distance {:.4}\n",
        outcome.mean_matches_pct, outcome.mean_distance
    ));
    write_atomic(&out.join("summary.txt"), &text)?;

    print!("{text}");
    println!("reports written to {}", out.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let examples = load_examples(&args.data)?;
    let strategy = strategy_from(&args.flags)?;
    let (set, alphabet) = load_model_set(&args.model, &strategy)?;
    let echo = run_echo(
        "eval",
        &args.flags,
        &[("data_fingerprint", dataset_fingerprint(&examples).into())],
    );

    let predictions: Vec<_> = examples
        .iter()
        .map(|e| predict(e, &strategy, &set, &alphabet))
        .collect::<Result<_>>()?;
    let surfaces: Vec<String> = predictions.iter().map(|p| p.surface.clone()).collect();
    let report: EvalReport = evaluate_with_coverage(&examples, &surfaces)?;

    let mut systems = vec![("this".to_string(), surfaces.clone())];
    if let Some(path) = &args.baseline_preds {
        let baseline = read_lines(path)?;
        if baseline.len() != examples.len() {
            return Err(Error::Contract(format!(
                "{} baseline predictions for {} examples",
                baseline.len(),
                examples.len()
            )));
        }
        systems.push(("baseline".to_string(), baseline));
    }
    let uncovered = uncovered_analysis(&examples, &systems)?;

    let out = PathBuf::from(&args.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_atomic(
        &out.join("predictions.tsv"),
        &format!("# config: {echo}\n{}", diagnostics_tsv(&examples, &predictions)),
    )?;
    write_atomic(
        &out.join("report.tsv"),
        &format!("# config: {echo}\n{}", report.to_tsv()),
    )?;

    let mut text = format!("# config: {echo}\n{}", report.summary_block());
    text.push_str(&format!(
        "uncovered {} of {}\n",
        uncovered.n_uncovered, uncovered.n_total
    ));
    if uncovered.all_covered() {
        text.push_str("uncovered subset empty: every truth is expressible as prefix+suffix\n");
    }
    for (name, matches, distance) in &uncovered.systems {
        text.push_str(&format!(
            "uncovered[{name}]: matches {matches:.2}%  distance {distance:.4}\n"
        ));
    }
    write_atomic(&out.join("summary.txt"), &text)?;

    print!("{text}");
    println!("reports written to {}", out.display());
    Ok(())
}

// ── suggest ──────────────────────────────────────────────────────────

pub fn cmd_suggest(args: SuggestArgs) -> Result<()> {
    let scorer = match (args.flags.scorer.as_str(), args.flags.ensemble > 1) {
        ("forward", false) => Scorer::Forward,
        ("forward", true) => Scorer::ForwardEnsemble,
        ("backward", false) => Scorer::Backward {
            lambda: args.flags.lambda,
        },
        ("backward", true) => Scorer::BackwardEnsemble {
            lambda: args.flags.lambda,
        },
        (other, _) => {
            return Err(Error::Config(format!("unknown scorer {other:?}")));
        }
    };
    let strategy = DecodeStrategy::Score { scorer };
    let (set, alphabet) = load_model_set(&args.model, &strategy)?;

    let example = Example::new(&args.root1, &args.root2, None, NormalizePolicy::Drop)?;
    let cands = generate_candidates(&example.root1, &example.root2)?;
    let ranked = score_candidates(
        cands.candidates,
        &scorer,
        &set,
        &example.root1,
        &example.root2,
        &alphabet,
    )?;

    println!(
        "{} candidates for {};{} ({} raw)",
        ranked.len(),
        example.root1,
        example.root2,
        cands.raw_count
    );
    println!("rank\tsurface\tprefix\tsuffix\tscore");
    for (rank, c) in ranked.iter().take(args.top_k).enumerate() {
        println!(
            "{}\t{}\t{}\t{}\t{:.4}",
            rank + 1,
            c.surface,
            c.prefix_len,
            c.suffix_len,
            c.total_score()
        );
    }
    Ok(())
}

// ── pretrain-embeddings ──────────────────────────────────────────────

pub fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let alphabet = Alphabet::standard();
    let words = load_words(&args.wordlist)?;
    let hyper = HyperParams::new(args.flags.d_emb, args.flags.d_h, args.flags.attn, &alphabet);
    let cfg = train_config(&args.flags);
    let outcome = pretrain_embeddings(&words, hyper, &cfg, &alphabet)?;

    let bundle = EnsembleBundle {
        members: vec![outcome.lm.store.clone()],
        subsample_fraction: 1.0,
        member_seeds: vec![cfg.seed],
        curves: vec![outcome.lm.curve.clone()],
    };
    let file = ModelFile::from_bundle(
        Architecture::CharLm,
        &bundle,
        &alphabet,
        &cfg,
        &wordlist_fingerprint(&words.words),
    );
    file.save(&args.model)?;
    let echo = run_echo(
        "pretrain-embeddings",
        &args.flags,
        &[("wordlist_fingerprint", wordlist_fingerprint(&words.words).into())],
    );
    write_atomic(
        &PathBuf::from(format!("{}.losscurve.csv", args.model)),
        &format!("# config: {echo}\n{}", loss_curve_csv(&outcome.lm.curve)),
    )?;

    let ppl = charblend_core::train::perplexity(&outcome.lm.store, &words.words, &alphabet)?;
    println!(
        "pretrained on {} words ({} skipped); perplexity {:.3} (uniform baseline {})",
        words.len(),
        outcome.skipped,
        ppl,
        alphabet.len()
    );
    println!("wrote {}", args.model);
    Ok(())
}

// ── significance ─────────────────────────────────────────────────────

pub fn cmd_significance(args: SignificanceArgs) -> Result<()> {
    let preds_a = read_lines(&args.preds_a)?;
    let preds_b = read_lines(&args.preds_b)?;
    let truths = read_lines(&args.truths)?;
    if preds_a.len() != truths.len() || preds_b.len() != truths.len() {
        return Err(Error::Contract(format!(
            "misaligned files: {} vs {} vs {} rows",
            preds_a.len(),
            preds_b.len(),
            truths.len()
        )));
    }
    let n_subset = args.n.unwrap_or(truths.len() / 2);
    let result = paired_bootstrap(
        &preds_a,
        &preds_b,
        &truths,
        args.m,
        n_subset,
        args.margin,
        args.seed,
    )?;

    let mut config = serde_json::Map::new();
    config.insert("command".into(), "significance".into());
    config.insert("m".into(), args.m.into());
    config.insert("n".into(), n_subset.into());
    config.insert("margin".into(), args.margin.into());
    config.insert("seed".into(), args.seed.into());
    config.insert("preds_a_fingerprint".into(), wordlist_fingerprint(&preds_a).into());
    config.insert("preds_b_fingerprint".into(), wordlist_fingerprint(&preds_b).into());
    config.insert("truths_fingerprint".into(), wordlist_fingerprint(&truths).into());
    let echo = serde_json::Value::Object(config).to_string();

    let text = format!(
        "# config: {echo}\nseed,M,N,p_better\n{},{},{},{}\n\
         # distance margin variant: A wins a subset when dist_B - dist_A >= margin\n\
         seed,M,N,margin,p_better\n{},{},{},{},{}\n",
        result.seed,
        result.m,
        result.n_subset,
        result.p_better_matches,
        result.seed,
        result.m,
        result.n_subset,
        result.margin,
        result.p_distance_margin,
    );
    write_atomic(&PathBuf::from(&args.out), &text)?;
    print!("{text}");
    Ok(())
}
