use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metok::hyag::{full_self_attention, GroupingAttention};
use metok::metok::{group_embed, GroupSpec};
use metok::nn::Conv1d;
use metok::tensor::{Graph, ParamStore, Tensor};

const M: usize = 128;
const D: usize = 32;

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let attn = GroupingAttention::new(&mut store, "attn", D, 2, &mut rng).unwrap();
    let mut g = c.benchmark_group("score_attention");
    g.sample_size(10);
    for n in [256, 512, 1024, 2048] {
        let spec = GroupSpec::new(n, n / M).unwrap();
        let mut s = store.clone();
        let conv = Conv1d::new(
            &mut s,
            "embed",
            D,
            D,
            spec.group_size,
            spec.group_size,
            &mut rng,
        );
        let z = Tensor::from_fn(&[n, D], |i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5);
        g.bench_with_input(BenchmarkId::new("grouping", n), &n, |b, _| {
            b.iter(|| {
                let mut gr = Graph::new();
                let zv = gr.constant(z.clone());
                let e = group_embed(&mut gr, &s, zv, &conv, &spec).unwrap();
                attn.forward(&mut gr, &s, zv, e).unwrap().score_macs
            })
        });
        g.bench_with_input(BenchmarkId::new("full", n), &n, |b, _| {
            b.iter(|| {
                let mut gr = Graph::new();
                let zv = gr.constant(z.clone());
                full_self_attention(&mut gr, &s, &attn, zv)
                    .unwrap()
                    .score_macs
            })
        });
    }
    g.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
