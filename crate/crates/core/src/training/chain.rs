//! Sequential transfer: train on each stage's data in turn, carrying the
//! best parameters from one stage into the next.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::trainer::{train, TrainConfig};
use crate::data::NliExample;
use crate::error::{Error, Result};
use crate::model::NliModel;
use crate::tokenizer::{pretokenize, TokenizerMode, UNK};

/// What happens to the classifier head when a stage starts from the
/// previous stage's checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPolicy {
    #[default]
    Keep,
    /// Re-draw the head from the stage's seed.
    Reset,
}

impl FromStr for HeadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep" => Ok(HeadPolicy::Keep),
            "reset" => Ok(HeadPolicy::Reset),
            other => Err(Error::Config(format!("unknown head policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub train: Vec<NliExample>,
    pub dev: Vec<NliExample>,
    pub config: TrainConfig,
    /// Ignored for the first stage.
    pub head: HeadPolicy,
}

#[derive(Debug, Clone, Default)]
pub struct TransferChain {
    pub stages: Vec<Stage>,
}

impl TransferChain {
    pub fn new(stages: Vec<Stage>) -> Self {
        TransferChain { stages }
    }

    /// Every premise and hypothesis across all stages, in stage order.
    pub fn corpus(&self) -> Vec<String> {
        self.stages
            .iter()
            .flat_map(|s| s.train.iter().chain(&s.dev))
            .flat_map(|e| [e.premise.clone(), e.hypothesis.clone()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a transfer chain needs at least one stage".into()));
        }
        for s in &self.stages {
            s.config.validate()?;
        }
        Ok(())
    }
}

/// Fails when `model`'s vocabulary cannot represent some of `corpus`.
fn check_coverage(model: &NliModel, corpus: &[String]) -> Result<()> {
    let tok = model.tokenizer();
    let unk = tok.vocab.id(UNK);
    for text in corpus {
        let missing = match tok.mode {
            TokenizerMode::Word => pretokenize(text).into_iter().find(|w| !tok.vocab.contains(w)),
            TokenizerMode::WordPiece => tok
                .tokenize(text)
                .contains(&unk.expect("specials are always present"))
                .then(|| text.clone()),
        };
        if let Some(m) = missing {
            return Err(Error::Config(format!(
                "vocabulary does not cover {m:?}; build it from the union of all chain corpora"
            )));
        }
    }
    Ok(())
}

/// Runs every stage of `chain`. `factory` receives the texts of all stages
/// and builds the initial model, so one vocabulary serves the whole chain.
///
/// The returned checkpoint's history concatenates all stages with
/// continuing step numbers; its provenance lists the stage names in order.
pub fn run_chain<F>(factory: F, chain: &TransferChain) -> Result<Checkpoint>
where
    F: FnOnce(&[String]) -> Result<NliModel>,
{
    chain.validate()?;
    let corpus = chain.corpus();
    let model = factory(&corpus)?;
    check_coverage(&model, &corpus)?;

    let mut model = model;
    let mut provenance = Vec::new();
    let mut history = Vec::new();
    let mut last = None;
    for (k, stage) in chain.stages.iter().enumerate() {
        if k > 0 && stage.head == HeadPolicy::Reset {
            model.reset_head(stage.config.seed)?;
        }
        log::info!(
            "stage {} ({}): {} training examples",
            k + 1,
            stage.name,
            stage.train.len()
        );
        let mut ck = train(model, &stage.train, &stage.dev, &stage.config)?;
        let offset = history.len();
        for r in &mut ck.history {
            r.step += offset;
        }
        if let Some(b) = &mut ck.best {
            b.step += offset;
        }
        history.extend(ck.history.iter().copied());
        provenance.push(stage.name.clone());
        model = ck.model.clone();
        last = Some(ck);
    }
    let mut ck = last.expect("validated non-empty");
    ck.provenance = provenance;
    ck.history = history;
    Ok(ck)
}
