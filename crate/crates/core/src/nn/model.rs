use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, BatchNorm};
use super::simconv::{SimConv2d, SimDense};
use crate::error::{CheckpointError, Error, Result};
use crate::parallel::Exec;
use crate::similarity::SimilarityKind;
use crate::tensor::Tensor;

/// Per-channel input standardisation `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| v * s + m)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalisation has {} channels, input has {c}",
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c]);
            plane.iter_mut().for_each(|v| *v = f(*v, m, s));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    SimConv(SimConv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool2,
    Flatten,
    SimDense(SimDense),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::SimConv(_) => "sim_conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2x2",
            Layer::Flatten => "flatten",
            Layer::SimDense(_) => "sim_dense",
        }
    }

    pub fn sim(&self) -> Option<&SimConv2d> {
        match self {
            Layer::SimConv(l) => Some(l),
            Layer::SimDense(d) => Some(&d.inner),
            _ => None,
        }
    }

    pub fn sim_mut(&mut self) -> Option<&mut SimConv2d> {
        match self {
            Layer::SimConv(l) => Some(l),
            Layer::SimDense(d) => Some(&mut d.inner),
            _ => None,
        }
    }

    /// Inference-mode forward.
    pub fn infer(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        match self {
            Layer::SimConv(l) => l.forward(x, exec),
            Layer::BatchNorm(bn) => bn.forward(x),
            Layer::Relu => Ok(layers::relu(x)),
            Layer::MaxPool2 => Ok(layers::maxpool2x2(x)?.0),
            Layer::Flatten => layers::flatten(x),
            Layer::SimDense(d) => d.forward(x, exec),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let four = |s: &[usize]| -> Result<[usize; 4]> {
            match *s {
                [n, c, h, w] => Ok([n, c, h, w]),
                _ => Err(Error::Shape(format!("{} needs NCHW input, got {s:?}", self.name()))),
            }
        };
        match self {
            Layer::SimConv(l) => {
                let [n, c, h, w] = four(input)?;
                let x = Tensor::zeros(&[1, c, h, w])?;
                let g = l.geometry(&x)?;
                Ok(vec![n, l.out_channels(), g.out_h(), g.out_w()])
            }
            Layer::BatchNorm(bn) => {
                if input.get(1) != Some(&bn.channels()) {
                    return Err(Error::Shape(format!(
                        "batchnorm over {} channels got input {input:?}",
                        bn.channels()
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2 => {
                let [n, c, h, w] = four(input)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape(format!("2×2 pooling needs even dims, got {h}×{w}")));
                }
                Ok(vec![n, c, h / 2, w / 2])
            }
            Layer::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            Layer::SimDense(d) => match *input {
                [n, f] if f == d.inputs() => Ok(vec![n, d.outputs()]),
                _ => Err(Error::Shape(format!(
                    "dense layer expects [N, {}], got {input:?}",
                    d.inputs()
                ))),
            },
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Relu(Tensor),
    Pool(Vec<usize>, Vec<usize>),
    Flatten(Vec<usize>),
}

/// Gradient for one trainable tensor, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub layer: usize,
    pub name: &'static str,
    pub is_sim: bool,
    pub grad: Tensor,
}

#[derive(Debug)]
pub struct ParamRef<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub is_sim: bool,
    pub tensor: &'a mut Tensor,
}

/// Architecture recipe for the stock conv-BN-ReLU-pool stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub classes: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub kind: SimilarityKind,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input: [1, 28, 28],
            classes: 10,
            channels: vec![8, 16],
            kernel: 3,
            kind: SimilarityKind::Conv,
        }
    }
}

impl ModelSpec {
    /// `[SimConv → BN → ReLU → MaxPool]* → Flatten → SimDense → BN`.
    pub fn build(&self, seed: u64) -> Result<Model> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = self.input;
        let mut layers = Vec::new();
        for &out in &self.channels {
            layers.push(Layer::SimConv(SimConv2d::init(
                &mut rng,
                c,
                out,
                self.kernel,
                1,
                self.kernel / 2,
                self.kind,
            )?));
            layers.push(Layer::BatchNorm(BatchNorm::new(out)?));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            c = out;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::SimDense(SimDense::init(&mut rng, c * h * w, self.classes, self.kind)?));
        layers.push(Layer::BatchNorm(BatchNorm::new(self.classes)?));
        Model::new(layers, self.input, self.classes)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    input: [usize; 3],
    classes: usize,
    pub norm: Option<Normalization>,
    pub exec: Exec,
    /// When false, training-mode batchnorm leaves running statistics alone.
    pub update_bn_stats: bool,
    caches: Vec<Cache>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, input: [usize; 3], classes: usize) -> Result<Self> {
        let mut shape = vec![1, input[0], input[1], input[2]];
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| e.at_layer(i))?;
        }
        if shape != [1, classes] {
            return Err(Error::Shape(format!(
                "model output {shape:?} does not match {classes} classes"
            )));
        }
        let caches = vec![Cache::None; layers.len()];
        Ok(Model {
            layers,
            input,
            classes,
            norm: None,
            exec: Exec::default(),
            update_bn_stats: true,
            caches,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Kind of the first similarity layer.
    pub fn kind(&self) -> Option<SimilarityKind> {
        self.layers.iter().find_map(|l| l.sim().map(|s| s.kind))
    }

    pub fn set_kind(&mut self, kind: SimilarityKind) -> Result<()> {
        let kind = kind.validate()?;
        for l in self.layers.iter_mut().filter_map(Layer::sim_mut) {
            l.kind = kind;
        }
        Ok(())
    }

    pub fn set_adder_gradient(&mut self, rule: crate::similarity::AdderGradient) {
        for l in self.layers.iter_mut().filter_map(Layer::sim_mut) {
            l.adder_grad = rule;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if [c, h, w] != self.input {
            return Err(Error::Shape(format!(
                "model expects [N, {}, {}, {}] input, got {:?}",
                self.input[0],
                self.input[1],
                self.input[2],
                x.shape()
            )));
        }
        Ok(())
    }

    fn normalized(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        match &self.norm {
            Some(n) => n.apply(x),
            None => Ok(x.clone()),
        }
    }

    /// Inference-mode logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.normalized(x)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h, self.exec).map_err(|e| e.at_layer(i))?;
        }
        Ok(h)
    }

    /// Runs `x` through layers `[0, end)` in inference mode (after input normalisation).
    pub fn forward_prefix(&self, x: &Tensor, end: usize) -> Result<Tensor> {
        let mut h = self.normalized(x)?;
        for (i, layer) in self.layers[..end].iter().enumerate() {
            h = layer.infer(&h, self.exec).map_err(|e| e.at_layer(i))?;
        }
        Ok(h)
    }

    /// Training-mode logits; caches activations for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.normalized(x)?;
        let (exec, update) = (self.exec, self.update_bn_stats);
        for (i, (layer, cache)) in self.layers.iter_mut().zip(self.caches.iter_mut()).enumerate() {
            let mut step = || -> Result<(Tensor, Cache)> {
                Ok(match layer {
                    Layer::SimConv(l) => (l.forward_train(&h, exec)?, Cache::None),
                    Layer::BatchNorm(bn) => (bn.forward_train(&h, update)?, Cache::None),
                    Layer::Relu => (layers::relu(&h), Cache::Relu(h.clone())),
                    Layer::MaxPool2 => {
                        let (y, arg) = layers::maxpool2x2(&h)?;
                        (y, Cache::Pool(h.shape().to_vec(), arg))
                    }
                    Layer::Flatten => (layers::flatten(&h)?, Cache::Flatten(h.shape().to_vec())),
                    Layer::SimDense(d) => (d.forward_train(&h, exec)?, Cache::None),
                })
            };
            let (y, c) = step().map_err(|e| e.at_layer(i))?;
            *cache = c;
            h = y;
        }
        Ok(h)
    }

    /// Back-propagates `dlogits`; gradients come back in [`params`](Self::params) order.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Vec<ParamGrad>> {
        let exec = self.exec;
        let mut grads = Vec::new();
        let mut g = dlogits.clone();
        for (i, (layer, cache)) in self
            .layers
            .iter_mut()
            .zip(self.caches.iter_mut())
            .enumerate()
            .rev()
        {
            let cache = std::mem::replace(cache, Cache::None);
            let step = || -> Result<Tensor> {
                Ok(match (layer, cache) {
                    (Layer::SimConv(l), _) => {
                        let (dx, dw) = l.backward(&g, exec)?;
                        grads.push(ParamGrad { layer: i, name: "weight", is_sim: true, grad: dw });
                        dx
                    }
                    (Layer::SimDense(d), _) => {
                        let (dx, dw) = d.backward(&g, exec)?;
                        grads.push(ParamGrad { layer: i, name: "weight", is_sim: true, grad: dw });
                        dx
                    }
                    (Layer::BatchNorm(bn), _) => {
                        let (dx, dgamma, dbeta) = bn.backward(&g)?;
                        grads.push(ParamGrad { layer: i, name: "beta", is_sim: false, grad: dbeta });
                        grads.push(ParamGrad { layer: i, name: "gamma", is_sim: false, grad: dgamma });
                        dx
                    }
                    (Layer::Relu, Cache::Relu(x)) => layers::relu_backward(&x, &g)?,
                    (Layer::MaxPool2, Cache::Pool(shape, arg)) => {
                        layers::maxpool2x2_backward(&shape, &arg, &g)?
                    }
                    (Layer::Flatten, Cache::Flatten(shape)) => g.clone().reshape(&shape)?,
                    _ => return Err(Error::Shape("backward called before forward".into())),
                })
            };
            g = step().map_err(|e| e.at_layer(i))?;
        }
        grads.reverse();
        Ok(grads)
    }

    /// Trainable tensors: sim weights, then batchnorm gamma and beta.
    pub fn params(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::SimConv(l) => out.push(ParamRef { layer: i, name: "weight", is_sim: true, tensor: &mut l.weights }),
                Layer::SimDense(d) => out.push(ParamRef { layer: i, name: "weight", is_sim: true, tensor: &mut d.inner.weights }),
                Layer::BatchNorm(bn) => {
                    out.push(ParamRef { layer: i, name: "gamma", is_sim: false, tensor: &mut bn.gamma });
                    out.push(ParamRef { layer: i, name: "beta", is_sim: false, tensor: &mut bn.beta });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Every tensor that defines the model's state, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("arch".to_string(), Tensor::from_raw(vec![self.arch_code().len()], self.arch_code()))];
        if let Some(n) = &self.norm {
            let c = n.mean.len();
            out.push(("input.mean".into(), Tensor::from_raw(vec![c], n.mean.clone())));
            out.push(("input.std".into(), Tensor::from_raw(vec![c], n.std.clone())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::SimConv(l) => out.push((format!("layers.{i}.weight"), l.weights.clone())),
                Layer::SimDense(d) => out.push((format!("layers.{i}.weight"), d.inner.weights.clone())),
                Layer::BatchNorm(bn) => {
                    out.push((format!("layers.{i}.gamma"), bn.gamma.clone()));
                    out.push((format!("layers.{i}.beta"), bn.beta.clone()));
                    out.push((format!("layers.{i}.running_mean"), bn.running_mean.clone()));
                    out.push((format!("layers.{i}.running_var"), bn.running_var.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites state from named tensors. Names and shapes must match
    /// exactly; the `arch` record and the similarity kind are not compared.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        let ours = self.named_tensors();
        let mut differing = Vec::new();
        // input statistics may be attached to a model that had none
        let optional = |n: &str| n == "arch" || n.starts_with("input.");
        for (name, t) in ours.iter().filter(|(n, _)| !optional(n)) {
            match tensors.iter().find(|(n, _)| n == name) {
                Some((_, other)) if other.shape() == t.shape() => {}
                Some((_, other)) => differing.push(format!("{name} {:?} vs {:?}", t.shape(), other.shape())),
                None => differing.push(format!("{name} missing")),
            }
        }
        for (name, _) in tensors.iter().filter(|(n, _)| !optional(n)) {
            if !ours.iter().any(|(n, _)| n == name) {
                differing.push(format!("{name} unexpected"));
            }
        }
        if !differing.is_empty() {
            return Err(CheckpointError::Incompatible(differing));
        }
        let get = |name: String| tensors.iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone()).expect("validated");
        let has_norm = tensors.iter().any(|(n, _)| n == "input.mean") && tensors.iter().any(|(n, _)| n == "input.std");
        if self.norm.is_some() && !has_norm {
            return Err(CheckpointError::Incompatible(vec!["input.mean missing".into()]));
        }
        if has_norm {
            self.norm = Some(Normalization {
                mean: get("input.mean".into()).into_data(),
                std: get("input.std".into()).into_data(),
            });
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::SimConv(l) => l.weights = get(format!("layers.{i}.weight")),
                Layer::SimDense(d) => d.inner.weights = get(format!("layers.{i}.weight")),
                Layer::BatchNorm(bn) => {
                    bn.gamma = get(format!("layers.{i}.gamma"));
                    bn.beta = get(format!("layers.{i}.beta"));
                    bn.running_mean = get(format!("layers.{i}.running_mean"));
                    bn.running_var = get(format!("layers.{i}.running_var"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Flat numeric description of the layer stack (all values are small
    /// integers or λ, exactly representable in f32).
    pub fn arch_code(&self) -> Vec<f32> {
        let mut code = vec![
            self.input[0] as f32,
            self.input[1] as f32,
            self.input[2] as f32,
            self.classes as f32,
            self.layers.len() as f32,
        ];
        for layer in &self.layers {
            match layer {
                Layer::SimConv(l) => code.extend([
                    1.0,
                    kind_code(l.kind),
                    l.kind.lambda(),
                    l.out_channels() as f32,
                    l.in_channels() as f32,
                    l.kernel() as f32,
                    l.stride as f32,
                    l.pad as f32,
                ]),
                Layer::BatchNorm(bn) => code.extend([2.0, bn.channels() as f32, bn.eps, bn.momentum]),
                Layer::Relu => code.push(3.0),
                Layer::MaxPool2 => code.push(4.0),
                Layer::Flatten => code.push(5.0),
                Layer::SimDense(d) => code.extend([
                    6.0,
                    kind_code(d.inner.kind),
                    d.inner.kind.lambda(),
                    d.outputs() as f32,
                    d.inputs() as f32,
                ]),
            }
        }
        code
    }

    /// Rebuilds an (untrained, zero-weight) model from [`arch_code`](Self::arch_code).
    pub fn from_arch_code(code: &[f32]) -> Result<Model, CheckpointError> {
        let bad = |what: &str| CheckpointError::Malformed(format!("arch record: {what}"));
        let mut it = code.iter().copied();
        let mut next = |what: &str| it.next().ok_or_else(|| bad(what));
        let as_usize = |v: f32, what: &str| -> Result<usize, CheckpointError> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e7 {
                Ok(v as usize)
            } else {
                Err(bad(what))
            }
        };
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = as_usize(next("header")?, "header")?;
        }
        let [c, h, w, classes, count] = header;
        let mut layers = Vec::with_capacity(count);
        let conv_err = |e: Error| CheckpointError::Malformed(e.to_string());
        for _ in 0..count {
            let tag = as_usize(next("tag")?, "tag")?;
            let layer = match tag {
                1 => {
                    let kind = decode_kind(next("kind")?, next("lambda")?).ok_or_else(|| bad("kind"))?;
                    let mut v = [0usize; 5];
                    for x in v.iter_mut() {
                        *x = as_usize(next("conv")?, "conv")?;
                    }
                    let [co, ci, k, stride, pad] = v;
                    let weights = Tensor::zeros(&[co, ci, k, k]).map_err(conv_err)?;
                    Layer::SimConv(SimConv2d::new(weights, stride, pad, kind).map_err(conv_err)?)
                }
                2 => {
                    let ch = as_usize(next("bn")?, "bn")?;
                    let mut bn = BatchNorm::new(ch).map_err(conv_err)?;
                    bn.eps = next("eps")?;
                    bn.momentum = next("momentum")?;
                    Layer::BatchNorm(bn)
                }
                3 => Layer::Relu,
                4 => Layer::MaxPool2,
                5 => Layer::Flatten,
                6 => {
                    let kind = decode_kind(next("kind")?, next("lambda")?).ok_or_else(|| bad("kind"))?;
                    let o = as_usize(next("dense")?, "dense")?;
                    let i = as_usize(next("dense")?, "dense")?;
                    let weights = Tensor::zeros(&[o, i]).map_err(conv_err)?;
                    Layer::SimDense(SimDense::new(weights, kind).map_err(conv_err)?)
                }
                _ => return Err(bad("unknown layer tag")),
            };
            layers.push(layer);
        }
        Model::new(layers, [c, h, w], classes).map_err(conv_err)
    }
}

fn kind_code(kind: SimilarityKind) -> f32 {
    match kind {
        SimilarityKind::Conv => 0.0,
        SimilarityKind::Euclid => 1.0,
        SimilarityKind::Adder => 2.0,
        SimilarityKind::Mfo => 3.0,
        SimilarityKind::Synapse => 4.0,
        SimilarityKind::Homotopy(_) => 5.0,
    }
}

fn decode_kind(code: f32, lambda: f32) -> Option<SimilarityKind> {
    Some(match code as i32 {
        0 => SimilarityKind::Conv,
        1 => SimilarityKind::Euclid,
        2 => SimilarityKind::Adder,
        3 => SimilarityKind::Mfo,
        4 => SimilarityKind::Synapse,
        5 => SimilarityKind::homotopy(lambda).ok()?,
        _ => return None,
    })
}
