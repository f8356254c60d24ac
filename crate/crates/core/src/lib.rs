//! Sentence-pair inference for clinical text: a small reverse-mode autodiff
//! engine, two classifiers (a transformer encoder and a compare-aggregate
//! matcher), training with early stopping and sequential transfer,
//! abbreviation expansion, evaluation, and synthetic corpora.

pub mod abbrev;
pub mod compaggr;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use data::{Label, NliExample, NliTriple};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelKind, NliModel};
pub use tensor::{ParamStore, Tape, Tensor, Var};
pub use tokenizer::{Tokenizer, TokenizerMode};
pub use training::{Checkpoint, TrainConfig};
