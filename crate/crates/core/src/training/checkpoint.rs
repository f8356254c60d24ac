//! Binary checkpoint container and the metric-history sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "NLICKPT\0" | u32 version | u64 header_len | header (JSON)
//! u32 block_count
//! per block: u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[∏dims]
//! ```
//!
//! Blocks are named `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::trainer::{MetricRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind, NliModel};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::{Tokenizer, TokenizerMode, Vocabulary};

pub const MAGIC: &[u8; 8] = b"NLICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const MEAN_PREFIX: &str = "adam.m/";
const VAR_PREFIX: &str = "adam.v/";

/// A trained model with everything needed to resume or audit it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: NliModel,
    pub train_config: TrainConfig,
    pub optimizer: Adam,
    /// Names of the datasets trained on, in order.
    pub provenance: Vec<String>,
    pub history: Vec<MetricRecord>,
    /// The evaluation whose parameters this checkpoint holds.
    pub best: Option<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    model: ModelConfig,
    tokenizer: TokenizerMode,
    vocabulary: Vec<String>,
    train: TrainConfig,
    provenance: Vec<String>,
    adam_step: u64,
    history: Vec<MetricRecord>,
    best: Option<MetricRecord>,
}

/// A named tensor block as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.model.kind(),
            model: self.model.config().clone(),
            tokenizer: self.model.tokenizer().mode,
            vocabulary: self.model.tokenizer().vocab.tokens().to_vec(),
            train: self.train_config.clone(),
            provenance: self.provenance.clone(),
            adam_step: self.optimizer.step,
            history: self.history.clone(),
            best: self.best,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 16 + 8 * self.model.params().numel() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let store = self.model.params();
        let mut blocks: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (_, name, t) in store.iter() {
            blocks.push((format!("{PARAM_PREFIX}{name}"), t.shape(), t.data()));
        }
        for (prefix, moments) in [(MEAN_PREFIX, &self.optimizer.m), (VAR_PREFIX, &self.optimizer.v)] {
            for (id, name, t) in store.iter() {
                let buf = &moments[id.index()];
                if !buf.is_empty() {
                    blocks.push((format!("{prefix}{name}"), t.shape(), buf));
                }
            }
        }
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, shape, data) in blocks {
            write_block(&mut out, &name, shape, data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.kind != header.model.kind() {
            return Err(Error::Format(format!(
                "header kind {} disagrees with model config {}",
                header.kind,
                header.model.kind()
            )));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut moments = Vec::new();
        for _ in 0..count {
            let block = r.block()?;
            if let Some(name) = block.name.strip_prefix(PARAM_PREFIX) {
                params.add(name, Tensor::new(block.shape.clone(), block.data)?)?;
            } else if block.name.starts_with(MEAN_PREFIX) || block.name.starts_with(VAR_PREFIX) {
                moments.push(block);
            } else {
                return Err(Error::Format(format!("unknown block {}", block.name)));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last block",
                bytes.len() - r.pos
            )));
        }
        let vocab = Vocabulary::from_tokens(header.vocabulary)?;
        let tokenizer = Tokenizer::new(header.tokenizer, vocab);
        let model = NliModel::from_params(header.model, tokenizer, params)?;

        let mut optimizer = Adam::new(model.params());
        optimizer.step = header.adam_step;
        for block in moments {
            let (slot, name) = match block.name.strip_prefix(MEAN_PREFIX) {
                Some(n) => (&mut optimizer.m, n),
                None => (&mut optimizer.v, &block.name[VAR_PREFIX.len()..]),
            };
            let id = model
                .params()
                .id(name)
                .ok_or_else(|| Error::Format(format!("moments for unknown parameter {name}")))?;
            if model.params().get(id).shape() != block.shape.as_slice() {
                return Err(Error::Format(format!("moment shape mismatch for {name}")));
            }
            slot[id.index()] = block.data;
        }
        Ok(Checkpoint {
            model,
            train_config: header.train,
            optimizer,
            provenance: header.provenance,
            history: header.history,
            best: header.best,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn history_tsv(&self) -> String {
        history_tsv(&self.history)
    }

    /// `best_dev_loss=…, best_dev_acc=…`
    pub fn summary(&self) -> String {
        match self.best {
            Some(b) => format!("best_dev_loss={}, best_dev_acc={}", b.dev_loss, b.dev_accuracy),
            None => "best_dev_loss=nan, best_dev_acc=nan".to_string(),
        }
    }
}

pub const HISTORY_HEADER: &str = "step\ttrain_loss\tdev_loss\tdev_accuracy";

pub fn history_tsv(history: &[MetricRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.step, r.train_loss, r.dev_loss, r.dev_accuracy);
    }
    s
}

pub fn parse_history_tsv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {HISTORY_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            Ok(MetricRecord {
                step: f[0].parse().map_err(|e| err(format!("{:?}: {e}", f[0])))?,
                train_loss: num(f[1])?,
                dev_loss: num(f[2])?,
                dev_accuracy: num(f[3])?,
            })
        })
        .collect()
}

/// Lists the tensor blocks of a checkpoint without rebuilding the model.
pub fn read_blocks(bytes: &[u8]) -> Result<(serde_json::Value, Vec<Block>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    r.u32()?;
    let len = r.u64()? as usize;
    let header = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let blocks = (0..count).map(|_| r.block()).collect::<Result<_>>()?;
    Ok((header, blocks))
}

fn write_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<Block> {
        let len = self.u32()? as usize;
        let name =
            String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Format(format!("block {name} has an impossible shape {shape:?}")))?;
        let raw = self.take(8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Block { name, shape, data })
    }
}
