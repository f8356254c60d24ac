//! Model components against naive oracles, gradient checks, and
//! whole-model properties.

mod common;

use clinli::compaggr::{
    aggregate_classify, compare, contextual_encode, cross_attention, CompAggrConfig, CompAggrParams,
};
use clinli::data::{Label, NliExample};
use clinli::gradcheck::check_params;
use clinli::model::ModelInput;
use clinli::nn::Dropout;
use clinli::tensor::{ConvActivation, ConvBank};
use clinli::tokenizer::encode_ids;
use clinli::training::Adam;
use clinli::transformer::{embed, multi_head_attention, transformer_block, TransformerConfig, TransformerParams};
use clinli::{NliModel, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn data_of<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store
        .get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
        .data()
}

fn transformer_setup(config: &TransformerConfig, vocab: usize, seed: u64) -> (ParamStore, TransformerParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = TransformerParams::init(config, vocab, &mut store, &mut rng).unwrap();
    // Re-draw everything at unit scale so the oracles see non-trivial values.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        store.set_data(id, &random_vec(&mut rng, n, 1.0)).unwrap();
    }
    (store, params)
}

fn compaggr_setup(config: &CompAggrConfig, vocab: usize, seed: u64) -> (ParamStore, CompAggrParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CompAggrParams::init(config, vocab, &mut store, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        store.set_data(id, &random_vec(&mut rng, n, 0.8)).unwrap();
    }
    (store, params)
}

fn tiny_transformer_config(max_len: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 4,
        heads: 2,
        num_blocks: 1,
        d_ff: 8,
        max_len,
        num_classes: 3,
        dropout: 0.0,
    }
}

#[test]
fn embedding_matches_table_lookups() {
    let config = tiny_transformer_config(9);
    for seed in 0..5 {
        let (store, params) = transformer_setup(&config, 15, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let p: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..15)).collect();
        let h: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..15)).collect();
        let e = encode_ids(&p, &h, 9).unwrap();
        let mut tape = Tape::new();
        let out = embed(&mut tape, &store, &params, &e).unwrap();
        let (tok, pos, seg) = (
            data_of(&store, "embeddings.token"),
            data_of(&store, "embeddings.position"),
            data_of(&store, "embeddings.segment"),
        );
        let d = config.d_model;
        let mut expected = Vec::new();
        for i in 0..e.len() {
            for c in 0..d {
                expected
                    .push(tok[e.token_ids[i] * d + c] + pos[e.position_ids[i] * d + c] + seg[e.segment_ids[i] * d + c]);
            }
        }
        assert_eq!(tape.value(out).data(), expected.as_slice());
    }
}

#[test]
fn attention_matches_naive_heads_on_small_case() {
    let config = tiny_transformer_config(8);
    let (store, params) = transformer_setup(&config, 10, 7);
    let block = &params.blocks[0];
    let (len, d) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_vec(&mut rng, len * d, 1.0);
    let w = AttentionWeights {
        wq: data_of(&store, "block0.attn.query.weight").to_vec(),
        bq: data_of(&store, "block0.attn.query.bias").to_vec(),
        wk: data_of(&store, "block0.attn.key.weight").to_vec(),
        bk: data_of(&store, "block0.attn.key.bias").to_vec(),
        wv: data_of(&store, "block0.attn.value.weight").to_vec(),
        bv: data_of(&store, "block0.attn.value.bias").to_vec(),
        wo: data_of(&store, "block0.attn.output.weight").to_vec(),
        bo: data_of(&store, "block0.attn.output.bias").to_vec(),
    };
    let mask = [1u8; 3];
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::matrix(len, d, x.clone()).unwrap());
    let (out, attn) = multi_head_attention(&mut tape, &store, block, xv, &mask, 2).unwrap();
    assert!(max_abs_diff(tape.value(out).data(), &naive_mha(&x, len, d, 2, &mask, &w)) <= 1e-10);
    for a in attn {
        for row in tape.value(a).data().chunks(len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn transformer_block_gradients() {
    let config = tiny_transformer_config(8);
    for seed in 0..3 {
        let (store, params) = transformer_setup(&config, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let x = Tensor::matrix(4, 4, random_vec(&mut rng, 16, 1.0)).unwrap();
        let weights = Tensor::matrix(4, 4, random_vec(&mut rng, 16, 1.0)).unwrap();
        let mask = [1, 1, 1, 0];
        let report = check_params(&store, 1e-5, |tape, store| {
            let xv = tape.constant(x.clone());
            let out = transformer_block(tape, store, &params.blocks[0], xv, &mask, 2, &mut Dropout::eval())?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn recurrence_matches_step_by_step_oracle() {
    let config = CompAggrConfig {
        embed_dim: 8,
        hidden: 5,
        projection: 8,
        filters_per_width: 1,
        ..CompAggrConfig::default()
    };
    let (e, h) = (config.embed_dim, config.hidden);
    for seed in 0..5 {
        let (store, params) = compaggr_setup(&config, 10, seed);
        let words = [3usize, 7, 1];
        let mut tape = Tape::new();
        let out = contextual_encode(&mut tape, &store, &params.encoder, &words, false).unwrap();
        let emb = data_of(&store, "encoder.embedding");
        let run = |dir: &str, order: Vec<usize>| -> Vec<Vec<f64>> {
            let w_in = data_of(&store, &format!("encoder.{dir}.input"));
            let w_rec = data_of(&store, &format!("encoder.{dir}.recurrent"));
            let b = data_of(&store, &format!("encoder.{dir}.bias"));
            let mut states = vec![vec![0.0; h]; words.len()];
            let mut prev = vec![0.0; h];
            for t in order {
                let mut s = vec![0.0; h];
                for j in 0..h {
                    let mut z = b[j];
                    for k in 0..e {
                        z += emb[words[t] * e + k] * w_in[k * h + j];
                    }
                    for k in 0..h {
                        z += prev[k] * w_rec[k * h + j];
                    }
                    s[j] = z.tanh();
                }
                states[t] = s.clone();
                prev = s;
            }
            states
        };
        let fwd = run("forward", vec![0, 1, 2]);
        let bwd = run("backward", vec![2, 1, 0]);
        let len = words.len();
        let mut expected = vec![0.0; (e + 2 * h) * len];
        for t in 0..len {
            for k in 0..e {
                expected[k * len + t] = emb[words[t] * e + k];
            }
            for j in 0..h {
                expected[(e + j) * len + t] = fwd[t][j];
                expected[(e + h + j) * len + t] = bwd[t][j];
            }
        }
        assert_eq!(tape.value(out).shape(), &[e + 2 * h, len]);
        assert!(max_abs_diff(tape.value(out).data(), &expected) <= 1e-10);
    }
}

#[test]
fn cross_attention_small_case_and_convex_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, n, m) = (4, 3, 2);
    let ep = random_vec(&mut rng, d * n, 1.0);
    let eh = random_vec(&mut rng, d * m, 1.0);
    let w = random_vec(&mut rng, d * d, 1.0);
    let mut tape = Tape::new();
    let epv = tape.constant(Tensor::matrix(d, n, ep.clone()).unwrap());
    let ehv = tape.constant(Tensor::matrix(d, m, eh.clone()).unwrap());
    let wv = tape.constant(Tensor::matrix(d, d, w.clone()).unwrap());
    let (aligned, weights) = cross_attention(&mut tape, epv, ehv, wv).unwrap();
    let (ea, ew) = naive_cross_attention(&ep, &eh, &w, d, n, m);
    assert!(max_abs_diff(tape.value(aligned).data(), &ea) <= 1e-10);
    let wd = tape.value(weights).data();
    assert!(max_abs_diff(wd, &ew) <= 1e-10);
    for j in 0..m {
        let col: f64 = (0..n).map(|i| wd[i * m + j]).sum();
        assert!((col - 1.0).abs() < 1e-9);
        assert!((0..n).all(|i| wd[i * m + j] >= 0.0));
    }
}

#[test]
fn compare_is_entrywise_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_vec(&mut rng, 6, 1.0);
    let b = random_vec(&mut rng, 6, 1.0);
    let mut tape = Tape::new();
    let av = tape.constant(Tensor::matrix(3, 2, a.clone()).unwrap());
    let bv = tape.constant(Tensor::matrix(3, 2, b.clone()).unwrap());
    let c = compare(&mut tape, av, bv).unwrap();
    let expected: Vec<f64> = (0..6).map(|i| a[i] * b[i]).collect();
    assert_eq!(tape.value(c).data(), expected.as_slice());
}

fn conv_banks(store: &ParamStore, config: &CompAggrConfig) -> Vec<Bank> {
    config
        .filter_widths
        .iter()
        .map(|&w| Bank {
            weight: data_of(store, &format!("aggregate.width{w}.weight")).to_vec(),
            bias: data_of(store, &format!("aggregate.width{w}.bias")).to_vec(),
            filters: config.filters_per_width,
            width: w,
        })
        .collect()
}

#[test]
fn aggregation_matches_composed_oracle() {
    let config = CompAggrConfig {
        embed_dim: 4,
        hidden: 2,
        projection: 6,
        filters_per_width: 2,
        dropout: 0.0,
        ..CompAggrConfig::default()
    };
    let d = 6;
    for (seed, m) in [(0, 3), (1, 5), (2, 7)] {
        let (store, params) = compaggr_setup(&config, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
        let c = random_vec(&mut rng, d * m, 1.0);
        let mut tape = Tape::new();
        let cv = tape.constant(Tensor::matrix(d, m, c.clone()).unwrap());
        let probs = aggregate_classify(&mut tape, &store, &params, &config, cv, &mut Dropout::eval()).unwrap();

        let width = m.max(config.max_width());
        let mut padded = vec![0.0; d * width];
        for k in 0..d {
            padded[k * width..k * width + m].copy_from_slice(&c[k * m..(k + 1) * m]);
        }
        let pooled = naive_conv_maxpool(&padded, d, width, &conv_banks(&store, &config));
        let total = config.total_filters();
        let wc = data_of(&store, "classifier.weight");
        let bc = data_of(&store, "classifier.bias");
        let logits: Vec<f64> = (0..3)
            .map(|j| bc[j] + (0..total).map(|i| pooled[i] * wc[i * 3 + j]).sum::<f64>())
            .collect();
        assert!(
            max_abs_diff(tape.value(probs).data(), &naive_softmax(&logits)) <= 1e-10,
            "m={m}"
        );
    }
}

#[test]
fn conv_small_case_matches_oracle_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (d, m) = (4, 6);
    let input = random_vec(&mut rng, d * m, 1.0);
    let banks: Vec<Bank> = [1, 2, 3]
        .iter()
        .map(|&w| Bank {
            weight: random_vec(&mut rng, 2 * d * w, 1.0),
            bias: random_vec(&mut rng, 2, 0.3),
            filters: 2,
            width: w,
        })
        .collect();
    let mut inputs = vec![Tensor::matrix(d, m, input.clone()).unwrap()];
    for b in &banks {
        inputs.push(Tensor::matrix(2, d * b.width, b.weight.clone()).unwrap());
        inputs.push(Tensor::vector(b.bias.clone()).unwrap());
    }
    let build = |tape: &mut Tape, v: &[clinli::Var]| {
        let conv: Vec<ConvBank> = (0..3)
            .map(|i| ConvBank {
                weight: v[1 + 2 * i],
                bias: v[2 + 2 * i],
                width: i + 1,
            })
            .collect();
        tape.conv1d_maxpool(v[0], &conv, ConvActivation::Relu)
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    assert_eq!(
        tape.value(out).data(),
        naive_conv_maxpool(&input, d, m, &banks).as_slice()
    );
    let report = clinli::gradcheck::check_inputs(&inputs, 1e-5, |tape, v| {
        let out = build(tape, v)?;
        tape.sum(out)
    })
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn nll_equals_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let rows: Vec<[f64; 3]> = (0..4).map(|_| random_stochastic_row(&mut rng)).collect();
    let gold = [2, 0, 1, 1];
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(4, 3, rows.iter().flatten().copied().collect()).unwrap());
    let loss = tape.nll(p, &gold).unwrap();
    let expected: f64 = rows.iter().zip(gold).map(|(r, g)| -r[g].ln()).sum();
    assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
}

fn batch_examples() -> Vec<NliExample> {
    vec![
        NliExample::new("patient has fever", "patient is febrile", Label::Entailment),
        NliExample::new("no chest pain today", "chest pain", Label::Contradiction),
        NliExample::new("mild cough", "cough and fever", Label::Neutral),
        NliExample::new("patient denies fever", "no fever", Label::Entailment),
    ]
}

fn mean_loss_and_grads(model: &NliModel, inputs: &[(ModelInput, usize)]) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = Tape::new();
    let mut total = None;
    for (input, gold) in inputs {
        let p = model.forward(&mut tape, input, &mut Dropout::eval()).unwrap();
        let l = tape.nll(p, &[*gold]).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).unwrap(),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / inputs.len() as f64).unwrap();
    let grads = tape.backward(mean).unwrap();
    let loss = tape.value(mean).data()[0];
    (loss, model.params().ids().map(|id| grads.param(id)).collect())
}

#[test]
fn compaggr_two_example_batch_gradients() {
    let examples = batch_examples();
    let mut model = model_for(tiny_compaggr(), &examples, 4);
    jitter_params(&mut model, 0.1, 4);
    let inputs: Vec<_> = examples[..2]
        .iter()
        .map(|e| (model.encode_example(e).unwrap(), e.gold_label.index()))
        .collect();
    let report = check_params(model.params(), 1e-5, |tape, store| {
        let mut total = None;
        for (input, gold) in &inputs {
            let p = model.forward_with(store, tape, input, &mut Dropout::eval())?;
            let l = tape.nll(p, &[*gold])?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    assert_eq!(report.checked, model.params().numel());
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn full_batch_loss_decreases_for_ten_steps() {
    let examples = batch_examples();
    for config in [tiny_compaggr(), clinli::ModelConfig::CompAggr(CompAggrConfig::desk())] {
        let mut model = model_for(config, &examples, 6);
        model.set_dropout(0.0).unwrap();
        let inputs: Vec<_> = examples
            .iter()
            .map(|e| (model.encode_example(e).unwrap(), e.gold_label.index()))
            .collect();
        let mut adam = Adam::new(model.params());
        let mut losses = Vec::new();
        for _ in 0..=10 {
            let (loss, grads) = mean_loss_and_grads(&model, &inputs);
            losses.push(loss);
            adam.step(model.params_mut(), &grads, 1e-3).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }
}

#[test]
fn model_probabilities_are_distributions() {
    let corpus = small_corpus(30, 2);
    for config in [tiny_transformer(), tiny_compaggr()] {
        let model = model_for(config, &corpus, 1);
        for e in &corpus {
            let p = model.predict(&e.premise, &e.hypothesis).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }
}

#[test]
fn transformer_padding_invariance_through_the_model() {
    let corpus = small_corpus(12, 6);
    let config = clinli::ModelConfig::Transformer(TransformerConfig {
        max_len: 40,
        ..TransformerConfig::default()
    });
    let model = model_for(config, &corpus, 2);
    for e in &corpus {
        let ModelInput::Pair(pair) = model.encode_example(e).unwrap() else {
            panic!("transformer input expected");
        };
        let base = model
            .probabilities(&ModelInput::Pair(pair.padded_to(pair.content_len()).unwrap()))
            .unwrap();
        let long = model
            .probabilities(&ModelInput::Pair(pair.padded_to(40).unwrap()))
            .unwrap();
        assert!(max_abs_diff(&base, &long) < 1e-9);
    }
}

#[test]
fn premise_length_never_changes_alignment_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for n in 1..8 {
        let (d, m) = (3, 4);
        let mut tape = Tape::new();
        let ep = tape.constant(Tensor::matrix(d, n, random_vec(&mut rng, d * n, 1.0)).unwrap());
        let eh = tape.constant(Tensor::matrix(d, m, random_vec(&mut rng, d * m, 1.0)).unwrap());
        let w = tape.constant(Tensor::matrix(d, d, random_vec(&mut rng, d * d, 1.0)).unwrap());
        let (a, weights) = cross_attention(&mut tape, ep, eh, w).unwrap();
        assert_eq!(tape.value(a).shape(), &[d, m]);
        assert_eq!(tape.value(weights).shape(), &[n, m]);
    }
}
