//! Optimizer, training loop, transfer chains, and checkpoint files.

mod common;

use clinli::data::NliExample;
use clinli::synth::split_by_premise;
use clinli::training::{
    parse_history_tsv, read_blocks, run_chain, train, Adam, HeadPolicy, Stage, TransferChain, BETA1, BETA2, EPSILON,
};
use clinli::{Checkpoint, ParamStore, Tensor, TrainConfig};

use common::*;

/// Plain scalar Adam written out from the update rule.
fn reference_adam(w0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = grad(w);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
        let v_hat = v / (1.0 - 0.999f64.powi(t as i32));
        w -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        out.push(w);
    }
    out
}

#[test]
fn adam_matches_reference_on_quadratic() {
    assert_eq!((BETA1, BETA2, EPSILON), (0.9, 0.999, 1e-8));
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&store);
    let reference = reference_adam(0.0, 0.5, 10, |w| 2.0 * (w - 3.0));
    let mut prev = 0.0;
    for (step, want) in reference.iter().enumerate() {
        let w = store.get(id).data()[0];
        adam.step(&mut store, &[Some(vec![2.0 * (w - 3.0)])], 0.5).unwrap();
        let got = store.get(id).data()[0];
        assert!((got - want).abs() < 1e-12, "step {step}: {got} vs {want}");
        // Momentum carries w past 3 around step 7, so only the direction
        // of travel is monotone, not the distance.
        assert!(got > prev, "step {step}: w fell from {prev} to {got}");
        prev = got;
    }
    assert_eq!(adam.step, 10);
    assert!((prev - 3.0).abs() < 3.0);
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        batch_size: 4,
        seed,
        dropout: Some(0.2),
        ..Default::default()
    }
}

fn splits(seed: u64) -> (Vec<NliExample>, Vec<NliExample>) {
    let corpus = small_corpus(48, seed);
    let mut parts = split_by_premise(&corpus, &[0.75, 0.25]).unwrap().into_iter();
    (parts.next().unwrap(), parts.next().unwrap())
}

#[test]
fn training_is_independent_of_thread_count() {
    let (tr, dev) = splits(1);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model = model_for(tiny_compaggr(), &tr, 3);
            train(model, &tr, &dev, &quick_config(3)).unwrap().to_bytes().unwrap()
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

#[test]
fn different_seeds_give_different_checkpoints() {
    let (tr, dev) = splits(1);
    let a = train(model_for(tiny_compaggr(), &tr, 3), &tr, &dev, &quick_config(3)).unwrap();
    let b = train(model_for(tiny_compaggr(), &tr, 3), &tr, &dev, &quick_config(4)).unwrap();
    assert_ne!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn best_checkpoint_has_lowest_dev_loss() {
    let (tr, dev) = splits(2);
    for kind in [tiny_compaggr(), tiny_transformer()] {
        let ck = train(model_for(kind, &tr, 1), &tr, &dev, &quick_config(1)).unwrap();
        let best = ck.best.unwrap();
        assert!(ck.history.iter().all(|r| best.dev_loss <= r.dev_loss));
        let again = clinli::training::evaluate(&ck.model, &dev).unwrap();
        assert!((again.loss - best.dev_loss).abs() < 1e-12);
    }
}

fn stage(name: &str, train: &[NliExample], dev: &[NliExample], head: HeadPolicy, seed: u64) -> Stage {
    Stage {
        name: name.into(),
        train: train.to_vec(),
        dev: dev.to_vec(),
        config: quick_config(seed),
        head,
    }
}

#[test]
fn three_stage_chain_records_each_stage() {
    let (s_tr, s_dev) = splits(3);
    let (m_tr, m_dev) = splits(4);
    let (t_tr, t_dev) = splits(5);
    let chain = TransferChain::new(vec![
        stage("S", &s_tr, &s_dev, HeadPolicy::Keep, 1),
        stage("M", &m_tr, &m_dev, HeadPolicy::Keep, 2),
        stage("T", &t_tr, &t_dev, HeadPolicy::Reset, 3),
    ]);
    let corpus = chain.corpus();
    let factory = |_: &[String]| {
        let tok = clinli::Tokenizer::train(clinli::TokenizerMode::Word, &corpus, 0)?;
        clinli::NliModel::new(tiny_compaggr(), tok, 7)
    };
    let ck = run_chain(factory, &chain).unwrap();
    assert_eq!(ck.provenance, ["S", "M", "T"]);
    let steps: Vec<usize> = ck.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=steps.len()).collect::<Vec<_>>());
    // The result comes from the final stage and is scored on its dev set.
    let eval = clinli::training::evaluate(&ck.model, &t_dev).unwrap();
    assert!((eval.loss - ck.best.unwrap().dev_loss).abs() < 1e-12);
}

#[test]
fn checkpoint_files_and_sidecars() {
    let (tr, dev) = splits(6);
    let ck = train(model_for(tiny_transformer(), &tr, 2), &tr, &dev, &quick_config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(loaded.history, ck.history);
    assert_eq!(parse_history_tsv(&ck.history_tsv()).unwrap(), ck.history);

    let (header, blocks) = read_blocks(&bytes).unwrap();
    assert_eq!(header["kind"], "transformer");
    let params = blocks.iter().filter(|b| b.name.starts_with("param/")).count();
    assert_eq!(params, ck.model.params().len());
    for e in &dev {
        assert_eq!(
            loaded.model.predict(&e.premise, &e.hypothesis).unwrap(),
            ck.model.predict(&e.premise, &e.hypothesis).unwrap()
        );
    }
    let summary = ck.summary();
    assert!(summary.starts_with("best_dev_loss="), "{summary}");
    assert!(summary.contains(", best_dev_acc="), "{summary}");
}

#[test]
fn truncated_or_foreign_bytes_are_rejected() {
    let (tr, dev) = splits(7);
    let ck = train(model_for(tiny_compaggr(), &tr, 2), &tr, &dev, &quick_config(2)).unwrap();
    let mut bytes = ck.to_bytes().unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(clinli::Error::Format(_))));
    assert!(matches!(
        Checkpoint::from_bytes(b"not a checkpoint"),
        Err(clinli::Error::Format(_))
    ));
}
