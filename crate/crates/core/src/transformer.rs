//! BERT-style encoder classifier.
//!
//! Input rows are the sum of token, position and segment embeddings. Each
//! block is post-norm: `LN(x + MHA(x))` followed by `LN(h + FFN(h))` with a
//! ReLU feed-forward layer. The `[CLS]` row of the last block feeds an
//! affine layer and a softmax over the three labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{linear, Dropout};
use crate::tensor::{normal_init, xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::EncodedPair;

/// Logit added to masked (padding) key positions.
pub const MASKED_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    /// Embedding and hidden width.
    pub d_model: usize,
    pub heads: usize,
    pub num_blocks: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            heads: 4,
            num_blocks: 2,
            d_ff: 128,
            max_len: 64,
            num_classes: 3,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.num_blocks == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 5 {
            return Err(Error::Config("max_len must be at least 5".into()));
        }
        if self.num_classes != 3 {
            return Err(Error::Config("the classifier head has exactly 3 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub query: (ParamId, ParamId),
    pub key: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    /// Output projection applied to the concatenated heads.
    pub output: (ParamId, ParamId),
    pub attn_norm: (ParamId, ParamId),
    pub ff_in: (ParamId, ParamId),
    pub ff_out: (ParamId, ParamId),
    pub ff_norm: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub token_emb: ParamId,
    pub position_emb: ParamId,
    pub segment_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub classifier: (ParamId, ParamId),
}

fn dense<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = store.add(
        format!("{name}.weight"),
        xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)?,
    )?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])?)?;
    Ok((w, b))
}

fn norm(store: &mut ParamStore, name: &str, width: usize) -> Result<(ParamId, ParamId)> {
    let g = store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)?)?;
    let b = store.add(format!("{name}.shift"), Tensor::zeros(&[width])?)?;
    Ok((g, b))
}

impl TransformerParams {
    pub fn init<R: Rng>(
        config: &TransformerConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_emb = store.add("embeddings.token", normal_init(&[vocab_size, d], 0.02, rng)?)?;
        let position_emb = store.add("embeddings.position", normal_init(&[config.max_len, d], 0.02, rng)?)?;
        let segment_emb = store.add("embeddings.segment", normal_init(&[2, d], 0.02, rng)?)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let p = format!("block{i}");
            blocks.push(BlockParams {
                query: dense(store, &format!("{p}.attn.query"), d, d, rng)?,
                key: dense(store, &format!("{p}.attn.key"), d, d, rng)?,
                value: dense(store, &format!("{p}.attn.value"), d, d, rng)?,
                output: dense(store, &format!("{p}.attn.output"), d, d, rng)?,
                attn_norm: norm(store, &format!("{p}.attn.norm"), d)?,
                ff_in: dense(store, &format!("{p}.ff.in"), d, config.d_ff, rng)?,
                ff_out: dense(store, &format!("{p}.ff.out"), config.d_ff, d, rng)?,
                ff_norm: norm(store, &format!("{p}.ff.norm"), d)?,
            });
        }
        let classifier = dense(store, "classifier", d, config.num_classes, rng)?;
        Ok(TransformerParams {
            token_emb,
            position_emb,
            segment_emb,
            blocks,
            classifier,
        })
    }

    pub fn head(&self) -> [ParamId; 2] {
        [self.classifier.0, self.classifier.1]
    }
}

/// Row `i` is `token[token_ids[i]] + position[position_ids[i]] + segment[segment_ids[i]]`.
pub fn embed(tape: &mut Tape, store: &ParamStore, params: &TransformerParams, encoded: &EncodedPair) -> Result<Var> {
    let tok = tape.param(store, params.token_emb);
    let pos = tape.param(store, params.position_emb);
    let seg = tape.param(store, params.segment_emb);
    let t = tape.gather_rows(tok, &encoded.token_ids)?;
    let p = tape.gather_rows(pos, &encoded.position_ids)?;
    let s = tape.gather_rows(seg, &encoded.segment_ids)?;
    let tp = tape.add(t, p)?;
    tape.add(tp, s)
}

/// Additive key mask: 0 on real tokens, [`MASKED_LOGIT`] on padding.
pub fn key_mask(attention_mask: &[u8]) -> Result<Tensor> {
    Tensor::vector(
        attention_mask
            .iter()
            .map(|&m| if m == 1 { 0.0 } else { MASKED_LOGIT })
            .collect(),
    )
}

/// Multi-head scaled dot-product self-attention.
///
/// Returns the projected output `[L × d]` and each head's attention matrix
/// `[L × L]` (rows are queries).
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    x: Var,
    attention_mask: &[u8],
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (len, d) = tape.value(x).dims2()?;
    if attention_mask.len() != len {
        return Err(dim_err!(
            "attention mask of length {} for {len} positions",
            attention_mask.len()
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(dim_err!("width {d} does not split into {heads} heads"));
    }
    let dk = d / heads;
    let q = linear(tape, store, x, block.query.0, block.query.1)?;
    let k = linear(tape, store, x, block.key.0, block.key.1)?;
    let v = linear(tape, store, x, block.value.0, block.value.1)?;
    let mask = tape.constant(key_mask(attention_mask)?);
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let masked = tape.add(scaled, mask)?;
        let attn = tape.softmax(masked, 1)?;
        outputs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = tape.concat_cols(&outputs)?;
    let out = linear(tape, store, concat, block.output.0, block.output.1)?;
    Ok((out, weights))
}

pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    x: Var,
    attention_mask: &[u8],
    heads: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let (attn, _) = multi_head_attention(tape, store, block, x, attention_mask, heads)?;
    let attn = dropout.apply(tape, attn)?;
    let res = tape.add(x, attn)?;
    let (g, b) = (
        tape.param(store, block.attn_norm.0),
        tape.param(store, block.attn_norm.1),
    );
    let h = tape.layer_norm(res, g, b, LAYER_NORM_EPS)?;

    let inner = linear(tape, store, h, block.ff_in.0, block.ff_in.1)?;
    let inner = tape.relu(inner)?;
    let ff = linear(tape, store, inner, block.ff_out.0, block.ff_out.1)?;
    let ff = dropout.apply(tape, ff)?;
    let res = tape.add(h, ff)?;
    let (g, b) = (tape.param(store, block.ff_norm.0), tape.param(store, block.ff_norm.1));
    tape.layer_norm(res, g, b, LAYER_NORM_EPS)
}

/// Full forward pass to a `[1 × 3]` probability row.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    params: &TransformerParams,
    config: &TransformerConfig,
    encoded: &EncodedPair,
    dropout: &mut Dropout,
) -> Result<Var> {
    if encoded.len() > config.max_len {
        return Err(Error::Data(format!(
            "sequence of length {} exceeds max_len {}",
            encoded.len(),
            config.max_len
        )));
    }
    let mut x = embed(tape, store, params, encoded)?;
    x = dropout.apply(tape, x)?;
    for block in &params.blocks {
        x = transformer_block(tape, store, block, x, &encoded.attention_mask, config.heads, dropout)?;
    }
    let cls = tape.select_row(x, 0)?;
    let logits = linear(tape, store, cls, params.classifier.0, params.classifier.1)?;
    tape.softmax(logits, 1)
}
