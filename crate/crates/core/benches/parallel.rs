use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use metok::grid::{synth_advect, SynthConfig};
use metok::model::{Model, ModelConfig};
use metok::parallel;
use metok::train::{batch_gradients, LossKind};

fn batch(c: &mut Criterion) {
    let data = synth_advect(
        &SynthConfig {
            samples: 8,
            height: 16,
            width: 16,
            ..SynthConfig::default()
        },
        1,
    )
    .unwrap();
    let refs: Vec<_> = data.iter().collect();
    let model = Model::new(ModelConfig {
        height: 16,
        width: 16,
        dim: 16,
        group: 4,
        encoder_depth: 2,
        translator_depth: 1,
        decoder_dim: 16,
        ..ModelConfig::default()
    })
    .unwrap();

    let wide = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .max(2);
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for threads in [1, wide] {
        g.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| {
                parallel::with_threads(t, || {
                    batch_gradients(&model, LossKind::Dice, &refs, 8).unwrap()
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("synth");
    g.sample_size(10);
    let cfg = SynthConfig {
        samples: 32,
        ..SynthConfig::default()
    };
    for threads in [1, wide] {
        g.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| parallel::with_threads(t, || synth_advect(&cfg, 3).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
