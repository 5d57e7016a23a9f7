use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rg_bench::{default_model, examples, filled};
use rg_core::train::BackwardOptions;
use rg_core::{backward, convolve_transposed, correlate, qp_k, Dims, FilterBank, Tensor};

fn filtering(c: &mut Criterion) {
    let mut g = c.benchmark_group("filtering");
    for (cin, cout, side, stride) in [(1, 8, 56, 2), (8, 16, 28, 2), (16, 16, 14, 1)] {
        let f = FilterBank::new(
            cout,
            cin,
            (3, 3),
            stride,
            (1, 1),
            filled(Tensor::zeros(Dims::new(1, 1, cout * cin * 9)), 1).into_vec(),
        )
        .unwrap();
        let x = filled(Tensor::zeros(Dims::new(cin, side, side)), 2);
        let y = correlate(&f, &x).unwrap();
        let id = format!("{cin}x{side}x{side}->{cout} s{stride}");
        g.bench_with_input(BenchmarkId::new("correlate", &id), &x, |b, x| {
            b.iter(|| correlate(&f, black_box(x)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("convolve_transposed", &id), &y, |b, y| {
            b.iter(|| convolve_transposed(&f, black_box(y), x.dims()).unwrap())
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let model = default_model();
    let x = examples(&model, 1).remove(0).image;
    let mut g = c.benchmark_group("qp_k");
    for k in [1, 2, 4] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| qp_k(&model.net, black_box(&x), k).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let model = default_model();
    let batch = examples(&model, 4);
    let scales = model.heads.num_scales();
    let mut g = c.benchmark_group("backward");
    g.sample_size(20);
    for k in [1, 2] {
        g.bench_with_input(BenchmarkId::new("batch4", k), &k, |b, &k| {
            b.iter(|| backward(&model, black_box(&batch), k, scales, BackwardOptions::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, filtering, inference, gradients);
criterion_main!(benches);
