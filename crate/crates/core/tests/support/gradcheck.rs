//! Randomised backward-pass checks against f64 central differences of the
//! oracle forward passes.
#![allow(dead_code)]

use euclidnet::nn::{maxpool2x2, maxpool2x2_backward, relu_backward, softmax_cross_entropy, BatchNorm, Layer, Model, SimConv2d, SimDense};
use euclidnet::similarity::AdderGradient;
use euclidnet::{Exec, SimilarityKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::{self, T64};

pub const TOL: f64 = 1e-3;
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub err: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.err < TOL
    }
}

fn kind_for(i: usize, rng: &mut ChaCha8Rng) -> SimilarityKind {
    match i % 6 {
        0 => SimilarityKind::Conv,
        1 => SimilarityKind::Euclid,
        2 => SimilarityKind::Homotopy(rng.random_range(0.05..0.95)),
        3 => SimilarityKind::Adder,
        4 => SimilarityKind::Mfo,
        _ => SimilarityKind::Synapse,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Values whose magnitudes sit on two interleaved lattices, so that every
/// input/weight pair keeps |x|, |w|, |x − w| and ||x| − |w|| above 0.1.
fn off_kink(rng: &mut ChaCha8Rng, n: usize, weights: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let step = rng.random_range(0..5) as f64;
            let base = if weights { 0.35 } else { 0.2 };
            let mag = base + 0.3 * step + rng.random_range(-0.02..0.02);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn operands(rng: &mut ChaCha8Rng, kind: SimilarityKind, n: usize, weights: bool) -> Vec<f64> {
    if kind.is_smooth() {
        uniform(rng, n, 1.0)
    } else {
        off_kink(rng, n, weights)
    }
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Rounds through f32 so the oracle and the library see the same operands.
fn snap(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, f32s(v)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sim_conv_check(rng: &mut ChaCha8Rng, kind: SimilarityKind, tag: &str, out: &mut Vec<Check>) {
    let (n, c, o) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
    let mut x = snap(operands(rng, kind, n * c * h * w, false));
    let mut wt = snap(operands(rng, kind, o * c * k * k, true));
    let (xs, ws) = ([n, c, h, w], [o, c, k, k]);
    let y = oracle::conv(&T64::new(&xs, x.clone()), &T64::new(&ws, wt.clone()), stride, pad, kind);
    let r = snap(uniform(rng, y.len(), 1.0));
    let mut layer = SimConv2d::new(tensor(&ws, &wt), stride, pad, kind).unwrap();
    layer.adder_grad = AdderGradient::Sign;
    let (dx, dw) = layer
        .backward_with(&tensor(&xs, &x), &tensor(&y.shape, &r), Exec::Sequential)
        .unwrap();
    let wt_fixed = wt.clone();
    let nx = oracle::numeric_grad(&mut x, H, |xv| {
        dot(&oracle::conv(&T64::new(&xs, xv.to_vec()), &T64::new(&ws, wt_fixed.clone()), stride, pad, kind).data, &r)
    });
    let x_fixed = x.clone();
    let nw = oracle::numeric_grad(&mut wt, H, |wv| {
        dot(&oracle::conv(&T64::new(&xs, x_fixed.clone()), &T64::new(&ws, wv.to_vec()), stride, pad, kind).data, &r)
    });
    let geo = format!("{tag} sim_conv2d {kind} x{xs:?} w{ws:?} s{stride} p{pad}");
    out.push(Check { label: format!("{geo} dx"), err: oracle::rel_err(dx.data(), &nx) });
    out.push(Check { label: format!("{geo} dw"), err: oracle::rel_err(dw.data(), &nw) });
}

fn sim_dense_check(rng: &mut ChaCha8Rng, kind: SimilarityKind, tag: &str, out: &mut Vec<Check>) {
    let (n, f, o) = (rng.random_range(1..=4), rng.random_range(1..=12), rng.random_range(1..=5));
    let mut x = snap(operands(rng, kind, n * f, false));
    let mut wt = snap(operands(rng, kind, o * f, true));
    let r = snap(uniform(rng, n * o, 1.0));
    let mut layer = SimDense::new(tensor(&[o, f], &wt), kind).unwrap();
    layer.inner.adder_grad = AdderGradient::Sign;
    layer.forward_train(&tensor(&[n, f], &x), Exec::Sequential).unwrap();
    let (dx, dw) = layer.backward(&tensor(&[n, o], &r), Exec::Sequential).unwrap();
    let wt_fixed = wt.clone();
    let nx = oracle::numeric_grad(&mut x, H, |xv| {
        dot(&oracle::dense(&T64::new(&[n, f], xv.to_vec()), &T64::new(&[o, f], wt_fixed.clone()), kind).data, &r)
    });
    let x_fixed = x.clone();
    let nw = oracle::numeric_grad(&mut wt, H, |wv| {
        dot(&oracle::dense(&T64::new(&[n, f], x_fixed.clone()), &T64::new(&[o, f], wv.to_vec()), kind).data, &r)
    });
    let geo = format!("{tag} sim_dense {kind} [{n}, {f}] -> {o}");
    out.push(Check { label: format!("{geo} dx"), err: oracle::rel_err(dx.data(), &nx) });
    out.push(Check { label: format!("{geo} dw"), err: oracle::rel_err(dw.data(), &nw) });
}

fn batchnorm_check(rng: &mut ChaCha8Rng, tag: &str, out: &mut Vec<Check>) {
    let (n, c) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let shape: Vec<usize> = if rng.random_bool(0.5) { vec![n, c] } else { vec![n, c, 3, 2] };
    let len: usize = shape.iter().product();
    let mut x = snap(uniform(rng, len, 2.0));
    let mut gamma = snap(uniform(rng, c, 1.5));
    let mut beta = snap(uniform(rng, c, 1.0));
    let r = snap(uniform(rng, len, 1.0));
    let mut bn = BatchNorm::new(c).unwrap();
    bn.gamma = tensor(&[c], &gamma);
    bn.beta = tensor(&[c], &beta);
    bn.eps = 1e-3;
    let eps = bn.eps as f64;
    bn.forward_train(&tensor(&shape, &x), false).unwrap();
    let (dx, dg, db) = bn.backward(&tensor(&shape, &r)).unwrap();
    let (g0, b0) = (gamma.clone(), beta.clone());
    let nx = oracle::numeric_grad(&mut x, H, |xv| dot(&oracle::batchnorm(&T64::new(&shape, xv.to_vec()), &g0, &b0, eps).data, &r));
    let x0 = x.clone();
    let ng = oracle::numeric_grad(&mut gamma, H, |gv| dot(&oracle::batchnorm(&T64::new(&shape, x0.clone()), gv, &b0, eps).data, &r));
    let nb = oracle::numeric_grad(&mut beta, H, |bv| dot(&oracle::batchnorm(&T64::new(&shape, x0.clone()), &g0, bv, eps).data, &r));
    let geo = format!("{tag} batchnorm {shape:?}");
    out.push(Check { label: format!("{geo} dx"), err: oracle::rel_err(dx.data(), &nx) });
    out.push(Check { label: format!("{geo} dgamma"), err: oracle::rel_err(dg.data(), &ng) });
    out.push(Check { label: format!("{geo} dbeta"), err: oracle::rel_err(db.data(), &nb) });
}

fn relu_pool_check(rng: &mut ChaCha8Rng, tag: &str, out: &mut Vec<Check>) {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=2), 4, 6];
    let len: usize = shape.iter().product();
    // distinct values at least 0.01 apart and away from zero
    let mut values: Vec<f64> = (0..len).map(|i| (i as f64 - len as f64 / 2.0 + 0.5) * 0.05).collect();
    for i in (1..len).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let mut x = snap(values);
    let r = snap(uniform(rng, len, 1.0));
    let dx = relu_backward(&tensor(&shape, &x), &tensor(&shape, &r)).unwrap();
    let nx = oracle::numeric_grad(&mut x, H, |xv| dot(&oracle::relu(&T64::new(&shape, xv.to_vec())).data, &r));
    out.push(Check { label: format!("{tag} relu {shape:?} dx"), err: oracle::rel_err(dx.data(), &nx) });

    let (y, arg) = maxpool2x2(&tensor(&shape, &x)).unwrap();
    let rp = snap(uniform(rng, y.len(), 1.0));
    let dx = maxpool2x2_backward(&shape, &arg, &tensor(y.shape(), &rp)).unwrap();
    let nx = oracle::numeric_grad(&mut x, H, |xv| dot(&oracle::maxpool2(&T64::new(&shape, xv.to_vec())).data, &rp));
    out.push(Check { label: format!("{tag} maxpool2x2 {shape:?} dx"), err: oracle::rel_err(dx.data(), &nx) });
}

fn loss_check(rng: &mut ChaCha8Rng, tag: &str, out: &mut Vec<Check>) {
    let (n, c) = (rng.random_range(1..=5), rng.random_range(2..=10));
    let mut z = snap(uniform(rng, n * c, 4.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, dz) = softmax_cross_entropy(&tensor(&[n, c], &z), &labels).unwrap();
    let nz = oracle::numeric_grad(&mut z, H, |zv| oracle::cross_entropy(&T64::new(&[n, c], zv.to_vec()), &labels));
    out.push(Check { label: format!("{tag} softmax_cross_entropy [{n}, {c}] dlogits"), err: oracle::rel_err(dz.data(), &nz) });
}

/// Conv → BN → ReLU → Pool → Flatten → Dense → BN, all parameters, through
/// the softmax loss.
fn model_check(rng: &mut ChaCha8Rng, kind: SimilarityKind, tag: &str, out: &mut Vec<Check>) {
    let (n, c, o, classes) = (rng.random_range(4..=6), rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(3..=4));
    let (h, w) = (2 * rng.random_range(1..=3), 2 * rng.random_range(1..=3));
    let k = 3;
    let conv = SimConv2d::new(tensor(&[o, c, k, k], &snap(uniform(rng, o * c * k * k, 0.8))), 1, 1, kind).unwrap();
    let f = o * (h / 2) * (w / 2);
    let dense = SimDense::new(tensor(&[classes, f], &snap(uniform(rng, classes * f, 0.8))), kind).unwrap();
    let mut bn1 = BatchNorm::new(o).unwrap();
    bn1.gamma = tensor(&[o], &snap(uniform(rng, o, 1.0)).iter().map(|v| 1.0 + 0.5 * v).collect::<Vec<_>>());
    bn1.beta = tensor(&[o], &snap(uniform(rng, o, 0.5)));
    let bn2 = BatchNorm::new(classes).unwrap();
    let layers = vec![
        Layer::SimConv(conv),
        Layer::BatchNorm(bn1),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Flatten,
        Layer::SimDense(dense),
        Layer::BatchNorm(bn2),
    ];
    let mut model = Model::new(layers, [c, h, w], classes).unwrap();
    model.exec = Exec::Sequential;
    model.update_bn_stats = false;
    let x = snap(uniform(rng, n * c * h * w, 1.5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let logits = model.forward_train(&tensor(&[n, c, h, w], &x)).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
    let grads = model.backward(&dlogits).unwrap();
    let mut mirror = oracle::mirror(&model);
    let xt = T64::new(&[n, c, h, w], x);
    let numeric: Vec<Vec<f64>> = (0..grads.len())
        .map(|pi| {
            let mut values = oracle::params_mut(&mut mirror)[pi].clone();
            let base = mirror.clone();
            oracle::numeric_grad(&mut values, H, |v| {
                let mut m = base.clone();
                *oracle::params_mut(&mut m)[pi] = v.to_vec();
                oracle::cross_entropy(&oracle::forward(&m, &xt), &labels)
            })
        })
        .collect();
    // tensors whose true gradient is at round-off level are judged against
    // the largest gradient of the same model
    let floor = numeric.iter().map(|g| oracle::norm(g)).fold(0.0, f64::max);
    for (g, num) in grads.iter().zip(&numeric) {
        out.push(Check {
            label: format!("{tag} model {kind} layer {} {}", g.layer, g.name),
            err: oracle::rel_err_floor(g.grad.data(), num, floor),
        });
    }
}

/// Runs every check over `configs` random configurations.
pub fn run(configs: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..configs {
        let kind = kind_for(i, &mut rng);
        let tag = format!("#{i}");
        sim_conv_check(&mut rng, kind, &tag, &mut out);
        sim_dense_check(&mut rng, kind, &tag, &mut out);
        batchnorm_check(&mut rng, &tag, &mut out);
        relu_pool_check(&mut rng, &tag, &mut out);
        loss_check(&mut rng, &tag, &mut out);
        if kind.is_smooth() {
            model_check(&mut rng, kind, &tag, &mut out);
        }
    }
    out
}
