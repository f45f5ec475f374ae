//! Shared helpers for integration tests: a small real-portmanteau
//! fixture and an overfitting loop that establishes the trained-model
//! premise the decoding oracles need.

use charblend_core::layers::{HyperParams, ParamStore};
use charblend_core::model::{init_store, Architecture};
use charblend_core::train::{
    greedy_exact_match, lm_pairs, pairs_for, TrainConfig, TrainPair, Trainer,
};
use charblend_core::vocab::{Alphabet, Example, NormalizePolicy, WordList};

pub const FIXTURE: &[(&str, &str, &str)] = &[
    ("ben", "jennifer", "bennifer"),
    ("space", "time", "spime"),
    ("shopping", "marathon", "shopathon"),
    ("fashion", "fascism", "fashism"),
    ("wiki", "etiquette", "wikiquette"),
    ("clown", "president", "clownsident"),
    ("slider", "curve", "slurve"),
    ("breakfast", "lunch", "brunch"),
    ("britain", "exit", "brexit"),
    ("spoon", "fork", "spork"),
    ("smoke", "fog", "smog"),
    ("motor", "hotel", "motel"),
    ("web", "seminar", "webinar"),
    ("situation", "comedy", "sitcom"),
    ("chill", "relax", "chillax"),
    ("guess", "estimate", "guesstimate"),
    ("glamour", "camping", "glamping"),
    ("jeans", "leggings", "jeggings"),
    ("bro", "romance", "bromance"),
    ("friend", "enemy", "frenemy"),
];

pub fn fixture_examples() -> Vec<Example> {
    FIXTURE
        .iter()
        .map(|(a, b, c)| Example::new(a, b, Some(c), NormalizePolicy::Drop).unwrap())
        .collect()
}

pub fn small_hyper(alphabet: &Alphabet) -> HyperParams {
    HyperParams::new(16, 32, true, alphabet)
}

/// Train on the pairs until greedy exact match hits 100% (or the epoch
/// budget runs out); returns the fitted store and the epoch it hit.
pub fn overfit(
    arch: Architecture,
    pairs: &[TrainPair],
    hyper: HyperParams,
    alphabet: &Alphabet,
    seed: u64,
    max_epochs: usize,
) -> (ParamStore, Option<usize>) {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let init = init_store(arch, hyper, alphabet, seed);
    let mut trainer = Trainer::new(init, arch, alphabet.clone(), cfg);
    for epoch in 1..=max_epochs {
        trainer.train_epoch(pairs, epoch).unwrap();
        if greedy_exact_match(&trainer.store, arch, alphabet, pairs).unwrap() == 100.0 {
            return (trainer.store, Some(epoch));
        }
    }
    (trainer.store, None)
}

/// Train the character LM on words until mean NLL per word drops below
/// the threshold.
pub fn overfit_lm(
    words: &[String],
    hyper: HyperParams,
    alphabet: &Alphabet,
    seed: u64,
    max_epochs: usize,
    target_nll: f64,
) -> ParamStore {
    let cfg = TrainConfig {
        seed,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let wl = WordList::from_words(words.iter().cloned());
    let pairs = lm_pairs(&wl.words, alphabet).unwrap();
    let init = init_store(Architecture::CharLm, hyper, alphabet, seed);
    let mut trainer = Trainer::new(init, Architecture::CharLm, alphabet.clone(), cfg);
    for epoch in 1..=max_epochs {
        let stats = trainer.train_epoch(&pairs, epoch).unwrap();
        if stats.mean_nll < target_nll {
            break;
        }
    }
    trainer.store
}

pub fn forward_pairs(examples: &[Example], alphabet: &Alphabet) -> Vec<TrainPair> {
    pairs_for(Architecture::Forward, examples, alphabet).unwrap()
}

pub fn backward_pairs(examples: &[Example], alphabet: &Alphabet) -> Vec<TrainPair> {
    pairs_for(Architecture::Backward, examples, alphabet).unwrap()
}
