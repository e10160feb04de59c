use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffan_bench::{batch, net, problem};
use diffan_core::ordering::find_leaf;
use diffan_core::{order, Mode, OrderConfig, ScoreField, Variant};

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    for d in [5, 10, 20] {
        let (_, data) = problem(d, 256, 0);
        let net = net(d);
        let x = batch(&data, 256);
        let t: Vec<f64> = (0..256).map(|i| (i % 101) as f64).collect();
        g.bench_with_input(BenchmarkId::new("forward_256", d), &d, |b, _| {
            b.iter(|| net.forward(black_box(&x), &t, Mode::Eval, 0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("grad_weights_256", d), &d, |b, _| {
            b.iter(|| {
                net.grad_weights(black_box(&x), &t, Mode::Train, 1, |o| (o.sum(), o.mapv(|_| 1.0)))
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn hessian(c: &mut Criterion) {
    let mut g = c.benchmark_group("hessian_diag_k64");
    g.sample_size(20);
    for d in [10, 20] {
        let (_, data) = problem(d, 64, 0);
        let net = net(d);
        let x = batch(&data, 64);
        for (name, residue) in [("masking", false), ("residue", true)] {
            let mut field = ScoreField::new(&net, residue);
            for leaf in 0..3 {
                field.remove(leaf).unwrap();
            }
            g.bench_with_input(BenchmarkId::new(name, d), &d, |b, _| {
                b.iter(|| field.hessian_diag(black_box(&x), 0.0).unwrap())
            });
        }
        let field = ScoreField::new(&net, false);
        g.bench_with_input(BenchmarkId::new("find_leaf", d), &d, |b, _| {
            b.iter(|| find_leaf(&field, black_box(&x), 0.0).unwrap())
        });
    }
    g.finish();
}

fn ordering(c: &mut Criterion) {
    let mut g = c.benchmark_group("ordering_d10");
    g.sample_size(10);
    let (_, data) = problem(10, 1000, 0);
    let net = net(10);
    for variant in [Variant::Masking, Variant::Residue] {
        for k in [16, 64] {
            let cfg = OrderConfig {
                variant,
                k,
                ..Default::default()
            };
            g.bench_with_input(BenchmarkId::new(format!("{variant:?}").to_lowercase(), k), &k, |b, _| {
                b.iter(|| order(&net, &data, &cfg).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, network, hessian, ordering);
criterion_main!(benches);
