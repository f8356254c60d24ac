//! Compare-aggregate sentence matcher.
//!
//! Sentences are column matrices `[d × len]`. Each word's embedding is
//! joined with the states of a bidirectional tanh recurrence and projected to
//! width `d`. Every hypothesis column attends over the premise columns
//! (`A = Ep · softmax((W Ep)ᵀ Eh)`, normalized over premise positions), the
//! aligned columns are compared with the hypothesis by element-wise product,
//! and a multi-width convolution with max-over-time pooling aggregates the
//! comparison into one vector for the softmax classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{linear, param, Dropout};
use crate::tensor::{normal_init, xavier_uniform, ConvActivation, ConvBank, ParamId, ParamStore, Tape, Tensor, Var};

pub use crate::nn::nll_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompAggrConfig {
    pub embed_dim: usize,
    /// Recurrent state width per direction.
    pub hidden: usize,
    /// Width `d` of the projected word representations.
    pub projection: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub num_classes: usize,
    /// Applied to the pooled vector before the classifier.
    pub dropout: f64,
    /// Keep word embeddings and the recurrent encoder fixed during training.
    pub freeze_encoder: bool,
    pub activation: ConvActivation,
}

impl Default for CompAggrConfig {
    fn default() -> Self {
        CompAggrConfig {
            embed_dim: 100,
            hidden: 50,
            projection: 100,
            filter_widths: vec![1, 2, 3, 4, 5],
            filters_per_width: 100,
            num_classes: 3,
            dropout: 0.7,
            freeze_encoder: false,
            activation: ConvActivation::Relu,
        }
    }
}

impl CompAggrConfig {
    /// Reduced widths for quick local experiments.
    pub fn desk() -> Self {
        CompAggrConfig {
            embed_dim: 24,
            hidden: 16,
            projection: 24,
            filters_per_width: 12,
            dropout: 0.2,
            ..Self::default()
        }
    }

    pub fn total_filters(&self) -> usize {
        self.filter_widths.len() * self.filters_per_width
    }

    pub fn max_width(&self) -> usize {
        self.filter_widths.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.projection == 0 {
            return Err(Error::Config("compare-aggregate widths must be positive".into()));
        }
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) || self.filters_per_width == 0 {
            return Err(Error::Config("filter widths and counts must be positive".into()));
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
pub struct RecurrentParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub forward: RecurrentParams,
    pub backward: RecurrentParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompAggrParams {
    pub encoder: EncoderParams,
    pub projection: (ParamId, ParamId),
    /// `W` in the attention logits `(W Ep)ᵀ Eh`.
    pub attention: ParamId,
    /// `(weight, bias, width)` per filter bank.
    pub filters: Vec<(ParamId, ParamId, usize)>,
    pub classifier: (ParamId, ParamId),
}

impl CompAggrParams {
    pub fn init<R: Rng>(
        config: &CompAggrConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (e, h, d) = (config.embed_dim, config.hidden, config.projection);
        let word_emb = store.add("encoder.embedding", normal_init(&[vocab_size, e], 0.1, rng)?)?;
        let mut rnn = |name: &str, rng: &mut R| -> Result<RecurrentParams> {
            Ok(RecurrentParams {
                input: store.add(format!("encoder.{name}.input"), xavier_uniform(&[e, h], e, h, rng)?)?,
                recurrent: store.add(format!("encoder.{name}.recurrent"), xavier_uniform(&[h, h], h, h, rng)?)?,
                bias: store.add(format!("encoder.{name}.bias"), Tensor::zeros(&[h])?)?,
            })
        };
        let forward = rnn("forward", rng)?;
        let backward = rnn("backward", rng)?;
        let projection = (
            store.add("projection.weight", xavier_uniform(&[e + 2 * h, d], e + 2 * h, d, rng)?)?,
            store.add("projection.bias", Tensor::zeros(&[d])?)?,
        );
        let attention = store.add("attention.weight", xavier_uniform(&[d, d], d, d, rng)?)?;
        let mut filters = Vec::new();
        for &w in &config.filter_widths {
            let f = config.filters_per_width;
            let weight = store.add(
                format!("aggregate.width{w}.weight"),
                xavier_uniform(&[f, d * w], d * w, f, rng)?,
            )?;
            let bias = store.add(format!("aggregate.width{w}.bias"), Tensor::zeros(&[f])?)?;
            filters.push((weight, bias, w));
        }
        let total = config.total_filters();
        let classifier = (
            store.add(
                "classifier.weight",
                xavier_uniform(&[total, config.num_classes], total, config.num_classes, rng)?,
            )?,
            store.add("classifier.bias", Tensor::zeros(&[config.num_classes])?)?,
        );
        Ok(CompAggrParams {
            encoder: EncoderParams {
                word_emb,
                forward,
                backward,
            },
            projection,
            attention,
            filters,
            classifier,
        })
    }

    pub fn head(&self) -> [ParamId; 2] {
        [self.classifier.0, self.classifier.1]
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let enc = &self.encoder;
        let mut ids = vec![enc.word_emb];
        for r in [&enc.forward, &enc.backward] {
            ids.extend([r.input, r.recurrent, r.bias]);
        }
        ids
    }
}

fn run_direction(
    tape: &mut Tape,
    store: &ParamStore,
    rnn: &RecurrentParams,
    x: Var,
    len: usize,
    reverse: bool,
    frozen: bool,
) -> Result<Vec<Var>> {
    let w_in = param(tape, store, rnn.input, frozen);
    let w_rec = param(tape, store, rnn.recurrent, frozen);
    let bias = param(tape, store, rnn.bias, frozen);
    let xw = tape.matmul(x, w_in)?;
    let pre = tape.add(xw, bias)?;
    let mut states: Vec<Option<Var>> = vec![None; len];
    let mut prev: Option<Var> = None;
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let mut z = tape.select_row(pre, t)?;
        if let Some(p) = prev {
            let r = tape.matmul(p, w_rec)?;
            z = tape.add(z, r)?;
        }
        let s = tape.tanh(z)?;
        states[t] = Some(s);
        prev = Some(s);
    }
    Ok(states.into_iter().map(Option::unwrap).collect())
}

/// Token layer plus bidirectional recurrence: column `t` is
/// `[embedding_t; forward_t; backward_t]`, a `[(embed + 2·hidden) × len]` matrix.
pub fn contextual_encode(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &EncoderParams,
    word_ids: &[usize],
    frozen: bool,
) -> Result<Var> {
    if word_ids.is_empty() {
        return Err(Error::Data("cannot encode an empty sentence".into()));
    }
    let emb = param(tape, store, encoder.word_emb, frozen);
    let x = tape.gather_rows(emb, word_ids)?;
    let len = word_ids.len();
    let fwd = run_direction(tape, store, &encoder.forward, x, len, false, frozen)?;
    let bwd = run_direction(tape, store, &encoder.backward, x, len, true, frozen)?;
    let f = tape.concat_rows(&fwd)?;
    let b = tape.concat_rows(&bwd)?;
    let rows = tape.concat_cols(&[x, f, b])?;
    tape.transpose(rows)
}

/// Contextual encoding followed by the tanh projection to width `d`; `[d × len]`.
pub fn encode_sentence(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CompAggrParams,
    config: &CompAggrConfig,
    word_ids: &[usize],
) -> Result<Var> {
    let ctx = contextual_encode(tape, store, &params.encoder, word_ids, config.freeze_encoder)?;
    let rows = tape.transpose(ctx)?;
    let proj = linear(tape, store, rows, params.projection.0, params.projection.1)?;
    let proj = tape.tanh(proj)?;
    tape.transpose(proj)
}

/// Soft alignment of the premise onto each hypothesis position.
///
/// Returns `A` (`[d × m]`) and the attention weights (`[n × m]`, each
/// column summing to one over premise positions).
pub fn cross_attention(tape: &mut Tape, ep: Var, eh: Var, w: Var) -> Result<(Var, Var)> {
    let (dp, _) = tape.value(ep).dims2()?;
    let (dh, _) = tape.value(eh).dims2()?;
    if dp != dh {
        return Err(dim_err!("premise width {dp} differs from hypothesis width {dh}"));
    }
    let wep = tape.matmul(w, ep)?;
    let wep_t = tape.transpose(wep)?;
    let logits = tape.matmul(wep_t, eh)?;
    let weights = tape.softmax(logits, 0)?;
    let aligned = tape.matmul(ep, weights)?;
    Ok((aligned, weights))
}

/// Element-wise comparison `C = A ⊙ Eh`.
pub fn compare(tape: &mut Tape, aligned: Var, eh: Var) -> Result<Var> {
    let (sa, sh) = (tape.value(aligned).shape(), tape.value(eh).shape());
    if sa != sh {
        return Err(dim_err!("cannot compare shapes {sa:?} and {sh:?}"));
    }
    tape.mul(aligned, eh)
}

/// Convolution + max-over-time pooling over the columns of `C`, then the
/// affine classifier and softmax. Sequences shorter than the widest filter
/// are right-padded with zero columns.
pub fn aggregate_classify(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CompAggrParams,
    config: &CompAggrConfig,
    c: Var,
    dropout: &mut Dropout,
) -> Result<Var> {
    let (d, m) = tape.value(c).dims2()?;
    let widest = config.max_width();
    let input = if m < widest {
        let pad = tape.constant(Tensor::zeros(&[d, widest - m])?);
        tape.concat_cols(&[c, pad])?
    } else {
        c
    };
    let banks: Vec<ConvBank> = params
        .filters
        .iter()
        .map(|&(w, b, width)| ConvBank {
            weight: tape.param(store, w),
            bias: tape.param(store, b),
            width,
        })
        .collect();
    let pooled = tape.conv1d_maxpool(input, &banks, config.activation)?;
    let pooled = dropout.apply(tape, pooled)?;
    let logits = linear(tape, store, pooled, params.classifier.0, params.classifier.1)?;
    tape.softmax(logits, 1)
}

/// Full forward pass to a `[1 × 3]` probability row.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    params: &CompAggrParams,
    config: &CompAggrConfig,
    premise: &[usize],
    hypothesis: &[usize],
    dropout: &mut Dropout,
) -> Result<Var> {
    let ep = encode_sentence(tape, store, params, config, premise)?;
    let eh = encode_sentence(tape, store, params, config, hypothesis)?;
    let w = tape.param(store, params.attention);
    let (aligned, _) = cross_attention(tape, ep, eh, w)?;
    let c = compare(tape, aligned, eh)?;
    aggregate_classify(tape, store, params, config, c, dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CompAggrConfig {
        CompAggrConfig {
            embed_dim: 6,
            hidden: 4,
            projection: 8,
            filters_per_width: 2,
            dropout: 0.0,
            ..CompAggrConfig::default()
        }
    }

    fn setup(seed: u64) -> (ParamStore, CompAggrParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CompAggrParams::init(&tiny(), 12, &mut store, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn full_sized_defaults() {
        let c = CompAggrConfig::default();
        assert_eq!(c.total_filters(), 500);
        assert_eq!(c.projection, 100);
        assert_eq!(c.dropout, 0.7);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn empty_sentence_is_rejected() {
        let (store, p) = setup(1);
        let mut tape = Tape::new();
        assert!(matches!(
            contextual_encode(&mut tape, &store, &p.encoder, &[], false),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn single_premise_token_is_copied() {
        let mut tape = Tape::new();
        let ep = tape.constant(Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap());
        let eh = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = tape.constant(Tensor::identity(3).unwrap());
        let (a, _) = cross_attention(&mut tape, ep, eh, w).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_attention_matrix_averages_premise() {
        let mut tape = Tape::new();
        let ep = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 6.0, 0.0, -3.0, 3.0]).unwrap());
        let eh = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let (a, _) = cross_attention(&mut tape, ep, eh, w).unwrap();
        let v = tape.value(a).data();
        for (got, want) in v.iter().zip([3.0, 3.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let ep = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        let eh = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let w = tape.constant(Tensor::identity(3).unwrap());
        assert!(matches!(
            cross_attention(&mut tape, ep, eh, w),
            Err(Error::Dimension(_))
        ));
        let a = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3, 1]).unwrap());
        assert!(compare(&mut tape, a, b).is_err());
    }

    #[test]
    fn compare_identities() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let ones = tape.constant(Tensor::full(&[2, 2], 1.0).unwrap());
        let zeros = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let c = compare(&mut tape, a, ones).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(a).data());
        let z = compare(&mut tape, zeros, ones).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_comparison_is_padded_and_head_paths() {
        let (mut store, p) = setup(2);
        let cfg = tiny();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[8, 2], 0.3).unwrap());
        let probs = aggregate_classify(&mut tape, &store, &p, &cfg, c, &mut Dropout::eval()).unwrap();
        assert!((tape.value(probs).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let n = store.get(p.classifier.0).len();
        store.set_data(p.classifier.0, &vec![0.0; n]).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[8, 6], -0.7).unwrap());
        let probs = aggregate_classify(&mut tape, &store, &p, &cfg, c, &mut Dropout::eval()).unwrap();
        assert!(tape.value(probs).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        store.set_data(p.classifier.1, &[5.0, 0.0, 0.0]).unwrap();
        for (w, b, _) in &p.filters {
            let (nw, nb) = (store.get(*w).len(), store.get(*b).len());
            store.set_data(*w, &vec![0.0; nw]).unwrap();
            store.set_data(*b, &vec![0.0; nb]).unwrap();
        }
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[8, 3], 1.0).unwrap());
        let probs = aggregate_classify(&mut tape, &store, &p, &cfg, c, &mut Dropout::eval()).unwrap();
        let v = tape.value(probs).data();
        assert!(v[0] > v[1] && v[0] > v[2]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, p) = setup(3);
        let run = || {
            let mut tape = Tape::new();
            let e = encode_sentence(&mut tape, &store, &p, &tiny(), &[4, 5, 6]).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_encoder_receives_no_gradient() {
        let (store, p) = setup(4);
        let mut cfg = tiny();
        cfg.freeze_encoder = true;
        let mut tape = Tape::new();
        let probs = classify(&mut tape, &store, &p, &cfg, &[4, 5], &[6, 7, 8], &mut Dropout::eval()).unwrap();
        let loss = nll_loss(&mut tape, probs, &[1]).unwrap();
        let g = tape.backward(loss).unwrap();
        for id in p.encoder_ids() {
            assert!(g.param(id).is_none(), "{}", store.name(id));
        }
        assert!(g.param(p.attention).is_some());
        assert!(g.param(p.projection.0).is_some());
    }
}
