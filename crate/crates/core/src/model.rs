//! A trainable sentence-pair classifier of either architecture, bundled
//! with its tokenizer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compaggr::{self, CompAggrConfig, CompAggrParams};
use crate::data::NliExample;
use crate::error::{Error, Result};
use crate::nn::Dropout;
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::tokenizer::{encode_ids, EncodedPair, Tokenizer, TokenizerMode};
use crate::transformer::{self, TransformerConfig, TransformerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    CompAggr,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::CompAggr => "compaggr",
        }
    }

    pub fn default_tokenizer(self) -> TokenizerMode {
        match self {
            ModelKind::Transformer => TokenizerMode::WordPiece,
            ModelKind::CompAggr => TokenizerMode::Word,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(ModelKind::Transformer),
            "compaggr" => Ok(ModelKind::CompAggr),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    CompAggr(CompAggrConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Transformer(_) => ModelKind::Transformer,
            ModelConfig::CompAggr(_) => ModelKind::CompAggr,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Transformer => ModelConfig::Transformer(TransformerConfig::default()),
            ModelKind::CompAggr => ModelConfig::CompAggr(CompAggrConfig::default()),
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            ModelConfig::Transformer(c) => c.dropout,
            ModelConfig::CompAggr(c) => c.dropout,
        }
    }

    pub fn set_dropout(&mut self, ratio: f64) {
        match self {
            ModelConfig::Transformer(c) => c.dropout = ratio,
            ModelConfig::CompAggr(c) => c.dropout = ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::CompAggr(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Transformer(TransformerParams),
    CompAggr(CompAggrParams),
}

/// Model-ready encoding of one premise/hypothesis pair.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Pair(EncodedPair),
    Words {
        premise: Vec<usize>,
        hypothesis: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct NliModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    store: ParamStore,
    layout: Layout,
}

impl NliModel {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab_size = tokenizer.vocab.len();
        let layout = match &config {
            ModelConfig::Transformer(c) => {
                Layout::Transformer(TransformerParams::init(c, vocab_size, &mut store, &mut rng)?)
            }
            ModelConfig::CompAggr(c) => Layout::CompAggr(CompAggrParams::init(c, vocab_size, &mut store, &mut rng)?),
        };
        Ok(NliModel {
            config,
            tokenizer,
            store,
            layout,
        })
    }

    /// Rebuilds a model around existing parameters, which must match the
    /// architecture's names and shapes exactly.
    pub fn from_params(config: ModelConfig, tokenizer: Tokenizer, params: ParamStore) -> Result<Self> {
        let mut model = NliModel::new(config, tokenizer, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (id, name, tensor) in params.iter() {
            let target = model
                .store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
            if model.store.get(target).shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.store.get(target).shape()
                )));
            }
            model.store.set_data(target, params.get(id).data())?;
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Overrides the dropout ratio used in training mode.
    pub fn set_dropout(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("dropout {ratio} outside [0, 1)")));
        }
        self.config.set_dropout(ratio);
        Ok(())
    }

    /// Classifier weight and bias.
    pub fn head_ids(&self) -> [ParamId; 2] {
        match &self.layout {
            Layout::Transformer(p) => p.head(),
            Layout::CompAggr(p) => p.head(),
        }
    }

    /// Re-draws the classifier head from `seed`, leaving everything else intact.
    pub fn reset_head(&mut self, seed: u64) -> Result<()> {
        let fresh = NliModel::new(self.config.clone(), self.tokenizer.clone(), seed)?;
        for id in self.head_ids() {
            let name = self.store.name(id).to_string();
            let src = fresh.store.id(&name).expect("same architecture");
            self.store.set_data(id, fresh.store.get(src).data())?;
        }
        Ok(())
    }

    pub fn encode(&self, premise: &str, hypothesis: &str) -> Result<ModelInput> {
        let p = self.tokenizer.tokenize(premise);
        let h = self.tokenizer.tokenize(hypothesis);
        if p.is_empty() || h.is_empty() {
            return Err(Error::Data("premise or hypothesis has no tokens".into()));
        }
        match &self.config {
            ModelConfig::Transformer(c) => Ok(ModelInput::Pair(encode_ids(&p, &h, c.max_len)?)),
            ModelConfig::CompAggr(_) => Ok(ModelInput::Words {
                premise: p,
                hypothesis: h,
            }),
        }
    }

    pub fn encode_example(&self, ex: &NliExample) -> Result<ModelInput> {
        self.encode(&ex.premise, &ex.hypothesis)
    }

    /// Forward pass to a `[1 × 3]` probability row on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput, dropout: &mut Dropout) -> Result<Var> {
        self.forward_with(&self.store, tape, input, dropout)
    }

    /// Like [`NliModel::forward`] but reading parameters from `store`, which
    /// must have this model's layout (for example a perturbed copy).
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        input: &ModelInput,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        if store.len() != self.store.len() {
            return Err(Error::Contract(format!(
                "parameter store has {} entries, model expects {}",
                store.len(),
                self.store.len()
            )));
        }
        match (&self.layout, &self.config, input) {
            (Layout::Transformer(p), ModelConfig::Transformer(c), ModelInput::Pair(e)) => {
                transformer::classify(tape, store, p, c, e, dropout)
            }
            (Layout::CompAggr(p), ModelConfig::CompAggr(c), ModelInput::Words { premise, hypothesis }) => {
                compaggr::classify(tape, store, p, c, premise, hypothesis, dropout)
            }
            _ => Err(Error::Contract(format!(
                "input encoding does not match a {} model",
                self.kind()
            ))),
        }
    }

    /// Inference-mode class probabilities in label order.
    pub fn probabilities(&self, input: &ModelInput) -> Result<[f64; 3]> {
        let mut tape = Tape::new();
        let p = self.forward(&mut tape, input, &mut Dropout::eval())?;
        let d = tape.value(p).data();
        Ok([d[0], d[1], d[2]])
    }

    pub fn predict(&self, premise: &str, hypothesis: &str) -> Result<[f64; 3]> {
        self.probabilities(&self.encode(premise, hypothesis)?)
    }
}
