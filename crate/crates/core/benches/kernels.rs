use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use euclidnet::nn::{ModelSpec, SimConv2d};
use euclidnet::quant::{build_square_lut, qeuclid_conv2d, QTensor, QuantParams};
use euclidnet::{Exec, SimilarityKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap()
}

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[64, 8, 14, 14], &mut rng);
    let dy = random(&[64, 16, 14, 14], &mut rng);
    for kind in [SimilarityKind::Conv, SimilarityKind::Euclid] {
        let layer = SimConv2d::new(random(&[16, 8, 3, 3], &mut rng), 1, 1, kind).unwrap();
        let mut g = c.benchmark_group(format!("conv3x3_{kind}"));
        for (name, exec) in EXECS {
            g.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| layer.forward(black_box(&x), exec).unwrap()));
            g.bench_function(BenchmarkId::new("backward", name), |b| {
                b.iter(|| layer.backward_with(black_box(&x), black_box(&dy), exec).unwrap())
            });
        }
        g.finish();
    }
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[128, 1, 28, 28], &mut rng);
    let spec = ModelSpec { kind: SimilarityKind::Euclid, ..ModelSpec::default() };
    let mut g = c.benchmark_group("model_forward");
    for (name, exec) in EXECS {
        let mut m = spec.build(0).unwrap();
        m.exec = exec;
        g.bench_function(name, |b| b.iter(|| m.forward(black_box(&x)).unwrap()));
    }
    g.finish();
}

fn int8(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = QuantParams::new(0.01, 8).unwrap();
    let mut ints = |n: usize| (0..n).map(|_| rng.random_range(-127i8..=127)).collect::<Vec<_>>();
    let qx = QTensor::new(&[32, 8, 14, 14], ints(32 * 8 * 14 * 14), p).unwrap();
    let qw = QTensor::new(&[16, 8, 3, 3], ints(16 * 8 * 9), p).unwrap();
    let lut = build_square_lut(8).unwrap();
    c.bench_function("qeuclid_conv3x3", |b| b.iter(|| qeuclid_conv2d(black_box(&qx), &qw, &lut, 1, 1).unwrap()));
}

criterion_group!(benches, conv, model, int8);
criterion_main!(benches);
