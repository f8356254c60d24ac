//! Run descriptions for `train` and `transfer`, read from TOML and checked
//! in full before anything runs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clinli::compaggr::CompAggrConfig;
use clinli::training::HeadPolicy;
use clinli::transformer::TransformerConfig;
use clinli::{ModelConfig, ModelKind, TokenizerMode, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT_DIR: &str = "out";
pub const DEFAULT_WORDPIECE_SIZE: usize = 2000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    model: Option<String>,
    tokenizer: Option<String>,
    wordpiece_size: Option<usize>,
    preset: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    abbreviations: Option<PathBuf>,
    data: Option<RawData>,
    train: Option<toml::Table>,
    transformer: Option<toml::Table>,
    compaggr: Option<toml::Table>,
    #[serde(default)]
    stages: Vec<RawStage>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    train: PathBuf,
    dev: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    name: String,
    train: PathBuf,
    dev: PathBuf,
    head: Option<String>,
    /// Per-stage overrides on top of the run's `[train]` table.
    config: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub head: HeadPolicy,
    pub config: TrainConfig,
}

/// A validated run: every referenced path existed when it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tokenizer: TokenizerMode,
    pub wordpiece_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub abbreviations: Option<PathBuf>,
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    /// One `[data]` table.
    Train,
    /// One or more `[[stages]]`.
    Transfer,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// Overlays `overrides` onto `base` key by key and deserializes the result,
/// so unknown keys and bad types are rejected by the target type.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<&toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).with_context(|| format!("[{what}]"))?;
    if let Some(o) = overrides {
        for (k, v) in o {
            table.insert(k.clone(), v.clone());
        }
    }
    toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid [{what}] table"))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, kind: RunKind, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, kind, overrides).with_context(|| format!("config {}", path.display()))
    }

    /// Parses and validates; relative paths are taken from `base`.
    pub fn parse(text: &str, base: &Path, kind: RunKind, overrides: &Overrides) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text)?;

        let file_model = raw.model.as_deref().map(str::parse::<ModelKind>).transpose()?;
        let model_kind = match (overrides.model, file_model) {
            (Some(a), Some(b)) if a != b => bail!("--model {a} conflicts with model = \"{b}\" in the config"),
            (Some(k), _) | (None, Some(k)) => k,
            (None, None) => match (&raw.transformer, &raw.compaggr) {
                (Some(_), None) => ModelKind::Transformer,
                (None, Some(_)) => ModelKind::CompAggr,
                _ => bail!("no model kind: set model = \"transformer\" or \"compaggr\""),
            },
        };
        let foreign = match model_kind {
            ModelKind::Transformer => raw.compaggr.is_some(),
            ModelKind::CompAggr => raw.transformer.is_some(),
        };
        if foreign {
            bail!("exactly one model kind is allowed, but the config has a table for the other one");
        }

        let preset = raw.preset.as_deref().unwrap_or("desk");
        let (compaggr_base, train_base) = match preset {
            "desk" => (CompAggrConfig::desk(), TrainConfig::default()),
            "full" => (CompAggrConfig::default(), TrainConfig::finetune()),
            other => bail!("unknown preset {other:?}; expected \"desk\" or \"full\""),
        };
        let model = match model_kind {
            ModelKind::Transformer => ModelConfig::Transformer(overlay(
                &TransformerConfig::default(),
                raw.transformer.as_ref(),
                "transformer",
            )?),
            ModelKind::CompAggr => ModelConfig::CompAggr(overlay(&compaggr_base, raw.compaggr.as_ref(), "compaggr")?),
        };
        model.validate()?;

        let tokenizer = match raw.tokenizer.as_deref() {
            Some(t) => t.parse()?,
            None => model_kind.default_tokenizer(),
        };
        let wordpiece_size = raw.wordpiece_size.unwrap_or(DEFAULT_WORDPIECE_SIZE);
        if tokenizer == TokenizerMode::WordPiece && wordpiece_size == 0 {
            bail!("wordpiece_size must be positive");
        }

        let seed = overrides.seed.or(raw.seed).unwrap_or(0);
        let out_dir = match (&overrides.out_dir, &raw.out_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => resolve(base, p),
            (None, None) => PathBuf::from(DEFAULT_OUT_DIR),
        };

        let no_seed = |t: Option<&toml::Table>, what: &str| -> Result<()> {
            if t.is_some_and(|t| t.contains_key("seed")) {
                bail!("{what} may not set seed; use the top-level seed or --seed");
            }
            Ok(())
        };
        no_seed(raw.train.as_ref(), "[train]")?;
        let run_train = overlay(&train_base, raw.train.as_ref(), "train")?;

        let stages = match (kind, raw.data, raw.stages.is_empty()) {
            (RunKind::Train, Some(d), true) => vec![StageConfig {
                name: "train".into(),
                train: resolve(base, &d.train),
                dev: resolve(base, &d.dev),
                head: HeadPolicy::Keep,
                config: TrainConfig { seed, ..run_train },
            }],
            (RunKind::Train, _, _) => bail!("train needs a [data] table and no [[stages]]"),
            (RunKind::Transfer, None, false) => raw
                .stages
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let what = format!("stage {:?} config", s.name);
                    no_seed(s.config.as_ref(), &what)?;
                    let config = overlay(&run_train, s.config.as_ref(), &what)?;
                    Ok(StageConfig {
                        name: s.name.clone(),
                        train: resolve(base, &s.train),
                        dev: resolve(base, &s.dev),
                        head: s.head.as_deref().map(str::parse).transpose()?.unwrap_or_default(),
                        config: TrainConfig {
                            seed: seed.wrapping_add(k as u64),
                            ..config
                        },
                    })
                })
                .collect::<Result<_>>()?,
            (RunKind::Transfer, _, _) => bail!("transfer needs one or more [[stages]] and no [data] table"),
        };

        let mut names = std::collections::HashSet::new();
        for s in &stages {
            if s.name.trim().is_empty() || s.name.contains(['\t', '\n']) {
                bail!("stage name {:?} must be non-empty without tabs or newlines", s.name);
            }
            if !names.insert(s.name.as_str()) {
                bail!("duplicate stage name {:?}", s.name);
            }
            s.config.validate().map_err(|e| anyhow!("stage {:?}: {e}", s.name))?;
            require_file(&s.train, "training set")?;
            require_file(&s.dev, "dev set")?;
        }
        let abbreviations = raw.abbreviations.map(|p| resolve(base, &p));
        if let Some(p) = &abbreviations {
            require_file(p, "abbreviation table")?;
        }

        Ok(RunConfig {
            model,
            tokenizer,
            wordpiece_size,
            seed,
            out_dir,
            abbreviations,
            stages,
        })
    }
}
