//! Fixtures shared by the benchmarks.

use clinli::synth::{generate_corpus, SynthSpec};
use clinli::{ModelConfig, NliExample, NliModel, Tensor, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus(examples: usize, seed: u64) -> Vec<NliExample> {
    generate_corpus(&SynthSpec {
        examples,
        seed,
        ..Default::default()
    })
    .expect("valid spec")
}

pub fn texts(corpus: &[NliExample]) -> Vec<String> {
    corpus
        .iter()
        .flat_map(|e| [e.premise.clone(), e.hypothesis.clone()])
        .collect()
}

/// A model with a vocabulary built from `corpus`.
pub fn model(config: ModelConfig, corpus: &[NliExample], seed: u64) -> NliModel {
    let tok = Tokenizer::train(config.kind().default_tokenizer(), &texts(corpus), 400).expect("tokenizer");
    NliModel::new(config, tok, seed).expect("model")
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
