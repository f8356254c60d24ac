use clinli::compaggr::CompAggrConfig;
use clinli::nn::Dropout;
use clinli::transformer::TransformerConfig;
use clinli::{ModelConfig, Tape};
use clinli_bench::{corpus, model};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn models(c: &mut Criterion) {
    let data = corpus(60, 0);
    let configs = [
        ("transformer", ModelConfig::Transformer(TransformerConfig::default())),
        ("compaggr", ModelConfig::CompAggr(CompAggrConfig::desk())),
    ];
    for (name, config) in configs {
        let m = model(config, &data, 0);
        let inputs: Vec<_> = data
            .iter()
            .take(8)
            .map(|e| (m.encode_example(e).unwrap(), e.gold_label.index()))
            .collect();
        c.bench_function(&format!("{name} forward_backward x8"), |b| {
            b.iter(|| {
                for (input, gold) in &inputs {
                    let mut tape = Tape::new();
                    let p = m.forward(&mut tape, input, &mut Dropout::eval()).unwrap();
                    let loss = tape.nll(p, &[*gold]).unwrap();
                    black_box(tape.backward(loss).unwrap());
                }
            })
        });
        let ex = &data[0];
        c.bench_function(&format!("{name} predict"), |b| {
            b.iter(|| black_box(m.predict(&ex.premise, &ex.hypothesis).unwrap()))
        });
    }
}

criterion_group!(benches, models);
criterion_main!(benches);
