use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use csf_autograd::{kernels, par, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

fn matmul(c: &mut Criterion) {
    let (m, k, n) = (256, 256, 256);
    let a = random(m * k, 1);
    let b = random(k * n, 2);
    let mut g = c.benchmark_group("matmul_256");
    g.bench_function("parallel", |bch| bch.iter(|| kernels::matmul(black_box(&a), black_box(&b), m, k, n, false, false)));
    g.bench_function("sequential", |bch| {
        bch.iter(|| par::with_single_thread(|| kernels::matmul(black_box(&a), black_box(&b), m, k, n, false, false)))
    });
    g.finish();
}

fn conv_backward(c: &mut Criterion) {
    let x = Tensor::new([16, 32, 32], random(16 * 32 * 32, 3));
    let w = Tensor::new([32, 16, 3, 3], random(32 * 16 * 9, 4));
    let step = || {
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let y = xv.conv2d(&wv, None, 1).square().sum();
        g.backward(y)
    };
    let mut g = c.benchmark_group("conv2d_fwd_bwd_16x32x32");
    g.bench_function("parallel", |bch| bch.iter(|| black_box(step())));
    g.bench_function("sequential", |bch| bch.iter(|| par::with_single_thread(|| black_box(step()))));
    g.finish();
}

criterion_group!(benches, matmul, conv_backward);
criterion_main!(benches);
