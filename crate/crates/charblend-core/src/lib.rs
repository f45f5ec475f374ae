//! Character-level neural portmanteau generation.
//!
//! Given two root words ("space", "time") the library predicts a blend
//! ("spime") with character-level sequence models: a forward attentional
//! encoder-decoder P(y|x), and a noisy-channel backward decomposition
//! P(x|y)·P(y) that combines a reverse model with a character language
//! model. Prediction runs either by autoregressive decoding (greedy or
//! beam) or by exhaustively generating prefix+suffix candidates and
//! scoring them. The evaluation half covers exact-match and edit-distance
//! metrics, k-fold cross-validation, coverage analysis, and paired
//! bootstrap significance testing.

pub mod decode;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod model_io;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use decode::{
    generate_candidates, predict, score_candidates, Candidate, DecodeStrategy, ModelSet,
    Prediction, Scorer,
};
pub use error::{Error, Result};
pub use eval::{
    coverage_report, crossval, edit_distance, evaluate, paired_bootstrap, BootstrapResult,
    CoverageReport, CrossvalOutcome, EvalReport,
};
pub use layers::{HyperParams, ParamStore};
pub use model::Architecture;
pub use model_io::ModelFile;
pub use tensor::{grad_check, Matrix, Tape, Value};
pub use train::{
    pretrain_embeddings, train, train_ensemble, train_pipeline, EnsembleBundle, PipelineConfig,
    TrainConfig,
};
pub use vocab::{Alphabet, Example, FoldPlan, SymbolId, WordList};
