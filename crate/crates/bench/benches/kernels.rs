use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hanmt::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [32usize, 64, 128] {
        let a = random(&mut rng, &[d, d]);
        let b = random(&mut rng, &[d, d]);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn softmax_and_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores = random(&mut rng, &[4, 32, 32]);
    c.bench_function("softmax 4x32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(scores.clone());
            black_box(g.softmax(x, 2).unwrap());
        })
    });
    let x = random(&mut rng, &[32, 64]);
    let gain = random(&mut rng, &[64]);
    let bias = random(&mut rng, &[64]);
    c.bench_function("layer_norm 32x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, w, b) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
            black_box(g.layer_norm(x, w, b, 1e-6).unwrap());
        })
    });
}

fn backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[32, 64]);
    let w = random(&mut rng, &[64, 64]);
    c.bench_function("matmul softmax backward 32x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, w) = (g.input(x.clone()), g.input(w.clone()));
            let h = g.matmul(x, w).unwrap();
            let p = g.softmax(h, 1).unwrap();
            let q = g.mul(p, h).unwrap();
            let out = g.sum(q);
            g.backward(out).unwrap();
            black_box(g.grad(w).map(|v| v[0]));
        })
    });
}

criterion_group!(benches, matmul, softmax_and_norm, backward);
criterion_main!(benches);
