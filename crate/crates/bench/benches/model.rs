use criterion::{criterion_group, criterion_main, Criterion};
use mmb_bench::{desk, examples};
use mmb_core::decode::{generate, BeamConfig};
use mmb_core::imagefeat::FeatureKind;
use mmb_core::model::{forward_loss, Dropout, Fusion, ModelParams};
use mmb_core::numerics::Graph;
use mmb_core::textdata::make_batch;

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward_batch16");
    group.sample_size(10);
    for fusion in [Fusion::None, Fusion::Late, Fusion::Early] {
        let params = ModelParams::<f32>::init(&desk(fusion, FeatureKind::Global), 0).unwrap();
        let batch = make_batch(&examples(16, FeatureKind::Global), 128).unwrap();
        group.bench_function(fusion.to_string(), |b| {
            b.iter(|| {
                let g = Graph::<f32>::new();
                let (loss, _) = forward_loss(&g, &params, &batch, &mut Dropout::off()).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn beam_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("beam_search_desk");
    group.sample_size(10);
    let params = ModelParams::<f32>::init(&desk(Fusion::Early, FeatureKind::Region), 0).unwrap();
    let example = examples(1, FeatureKind::Region).remove(0);
    for beam_size in [1, 4, 10] {
        let cfg = BeamConfig {
            beam_size,
            min_length: 20,
            max_length: 32,
            ..BeamConfig::default()
        };
        group.bench_function(format!("beam{beam_size}_len32"), |b| {
            b.iter(|| generate(&params, &example, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, beam_search);
criterion_main!(benches);
