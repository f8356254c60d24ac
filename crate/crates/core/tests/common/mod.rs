//! Independent reference implementations and fixtures shared by the
//! integration tests. Oracles work on plain row-major `Vec<f64>` with
//! explicit loops and share no code with the library.

#![allow(dead_code)]

use clinli::compaggr::CompAggrConfig;
use clinli::data::{Label, NliExample};
use clinli::eval::Prediction;
use clinli::synth::{generate_corpus, SynthSpec};
use clinli::transformer::TransformerConfig;
use clinli::{ModelConfig, NliModel, Tokenizer, TokenizerMode};
use rand::{Rng, SeedableRng};

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `a [n×k] · b [k×m]`.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

pub fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Weights of one self-attention layer, row-major, `x · W + b` convention.
pub struct AttentionWeights {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = naive_matmul(x, w, n, d_in, d_out);
    for i in 0..n {
        for j in 0..d_out {
            out[i * d_out + j] += b[j];
        }
    }
    out
}

/// Multi-head attention computed head by head, query by query.
pub fn naive_mha(x: &[f64], len: usize, d: usize, heads: usize, mask: &[u8], w: &AttentionWeights) -> Vec<f64> {
    let dk = d / heads;
    let q = affine(x, &w.wq, &w.bq, len, d, d);
    let k = affine(x, &w.wk, &w.bk, len, d, d);
    let v = affine(x, &w.wv, &w.bv, len, d, d);
    let mut concat = vec![0.0; len * d];
    for h in 0..heads {
        for i in 0..len {
            let mut logits = vec![0.0; len];
            for j in 0..len {
                let mut s = 0.0;
                for c in 0..dk {
                    s += q[i * d + h * dk + c] * k[j * d + h * dk + c];
                }
                logits[j] = s / (dk as f64).sqrt() + if mask[j] == 1 { 0.0 } else { -1e9 };
            }
            let a = naive_softmax(&logits);
            for c in 0..dk {
                let mut s = 0.0;
                for j in 0..len {
                    s += a[j] * v[j * d + h * dk + c];
                }
                concat[i * d + h * dk + c] = s;
            }
        }
    }
    affine(&concat, &w.wo, &w.bo, len, d, d)
}

/// Column-wise cross attention: for hypothesis column `j`, weights over
/// premise columns `i` are `softmax_i((W·Ep)[:, i] · Eh[:, j])`.
/// Returns (`A` as `[d × m]`, weights as `[n × m]`).
pub fn naive_cross_attention(ep: &[f64], eh: &[f64], w: &[f64], d: usize, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let wep = naive_matmul(w, ep, d, d, n);
    let mut aligned = vec![0.0; d * m];
    let mut weights = vec![0.0; n * m];
    for j in 0..m {
        let logits: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|k| wep[k * n + i] * eh[k * m + j]).sum())
            .collect();
        let a = naive_softmax(&logits);
        for i in 0..n {
            weights[i * m + j] = a[i];
            for k in 0..d {
                aligned[k * m + j] += a[i] * ep[k * n + i];
            }
        }
    }
    (aligned, weights)
}

/// One filter bank: `weight[f][k][j]` flattened as `f·(d·w) + k·w + j`.
pub struct Bank {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub filters: usize,
    pub width: usize,
}

/// Max over time of ReLU(convolution) for each filter of each bank, in order.
pub fn naive_conv_maxpool(c: &[f64], d: usize, m: usize, banks: &[Bank]) -> Vec<f64> {
    let mut out = Vec::new();
    for bank in banks {
        let w = bank.width;
        for f in 0..bank.filters {
            let mut best = f64::NEG_INFINITY;
            for t in 0..=(m - w) {
                let mut z = bank.bias[f];
                for k in 0..d {
                    for j in 0..w {
                        z += bank.weight[f * d * w + k * w + j] * c[k * m + t + j];
                    }
                }
                best = best.max(z.max(0.0));
            }
            out.push(best);
        }
    }
    out
}

/// Exhaustive search over every bijection pairs→labels, enumerated by
/// nested loops; ties keep the lexicographically smallest assignment.
pub fn brute_force_assignment(p: &[[f64; 3]; 3]) -> ([usize; 3], f64) {
    let mut best: Option<([usize; 3], f64)> = None;
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                if a == b || b == c || a == c {
                    continue;
                }
                let score = p[0][a].ln() + p[1][b].ln() + p[2][c].ln();
                let better = match best {
                    None => true,
                    Some((_, s)) => score > s || (s.is_nan() && !score.is_nan()),
                };
                if better {
                    best = Some(([a, b, c], score));
                }
            }
        }
    }
    best.unwrap()
}

pub fn random_stochastic_row<R: Rng>(rng: &mut R) -> [f64; 3] {
    let raw: [f64; 3] = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let s: f64 = raw.iter().sum();
    raw.map(|x| x / s)
}

pub fn texts(examples: &[NliExample]) -> Vec<String> {
    examples
        .iter()
        .flat_map(|e| [e.premise.clone(), e.hypothesis.clone()])
        .collect()
}

pub fn tiny_transformer() -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        d_model: 8,
        heads: 2,
        num_blocks: 2,
        d_ff: 16,
        max_len: 8,
        num_classes: 3,
        dropout: 0.0,
    })
}

pub fn tiny_compaggr() -> ModelConfig {
    ModelConfig::CompAggr(CompAggrConfig {
        embed_dim: 8,
        hidden: 4,
        projection: 8,
        filters_per_width: 2,
        dropout: 0.0,
        ..CompAggrConfig::default()
    })
}

/// Adds uniform noise to every parameter. Zero-initialized biases together
/// with zero padding can put a ReLU exactly on its kink, where finite
/// differences are meaningless; gradient checks run at a generic point.
pub fn jitter_params(model: &mut NliModel, scale: f64, seed: u64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noisy: Vec<f64> = store
            .get(id)
            .data()
            .iter()
            .map(|x| x + rng.gen_range(-scale..scale))
            .collect();
        store.set_data(id, &noisy).unwrap();
    }
}

/// A model over the vocabulary of `corpus`.
pub fn model_for(config: ModelConfig, corpus: &[NliExample], seed: u64) -> NliModel {
    let mode = config.kind().default_tokenizer();
    let size = if mode == TokenizerMode::WordPiece { 120 } else { 0 };
    let tok = Tokenizer::train(mode, &texts(corpus), size).unwrap();
    NliModel::new(config, tok, seed).unwrap()
}

pub fn small_corpus(examples: usize, seed: u64) -> Vec<NliExample> {
    generate_corpus(&SynthSpec {
        examples,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Gold examples `g0..g{n-1}` and two prediction sets in which the first
/// system alone is right on `only_a` examples, the second alone on
/// `only_b`, both on `both`, and neither on the rest.
pub fn agreement_fixture(
    n: usize,
    both: usize,
    only_a: usize,
    only_b: usize,
) -> (Vec<NliExample>, Vec<Prediction>, Vec<Prediction>) {
    assert!(both + only_a + only_b <= n);
    let right = [0.7, 0.2, 0.1];
    let wrong = [0.1, 0.6, 0.3];
    let mut golds = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("g{i}");
        golds.push(NliExample::new("p", "h", Label::Entailment).with_id(id.clone()));
        let (ra, rb) = if i < both {
            (true, true)
        } else if i < both + only_a {
            (true, false)
        } else if i < both + only_a + only_b {
            (false, true)
        } else {
            (false, false)
        };
        a.push(Prediction::new(id.clone(), if ra { right } else { wrong }).unwrap());
        b.push(Prediction::new(id, if rb { right } else { wrong }).unwrap());
    }
    (golds, a, b)
}
