//! Layers, model containers and builders for residual students and MLP
//! surrogate teachers.

mod build;
mod io;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Op, Tape, Tensor, Var};

pub use build::{build_mlp, build_resnet, ResNetConfig, ResNetVariant};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Architecture descriptor of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Bias-free convolution; a batch norm is expected to follow.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        features: usize,
    },
    Relu,
    /// conv-BN-ReLU-conv-BN plus shortcut, then ReLU. The shortcut is a
    /// projection (`shortcut_kernel` x `shortcut_kernel` conv + BN) whenever
    /// the stride or channel count changes, the identity otherwise.
    BasicBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        shortcut_kernel: usize,
    },
    AdaptiveAvgPool2d {
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BasicBlock { .. } => "residual-basic-block",
            LayerSpec::AdaptiveAvgPool2d { .. } => "adaptive-avg-pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub(crate) fn has_projection(&self) -> bool {
        matches!(*self, LayerSpec::BasicBlock { in_channels, out_channels, stride, .. }
            if stride != 1 || in_channels != out_channels)
    }

    /// Parameter slots in binding order: `(local name, shape, kind)`.
    pub fn param_slots(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        fn bn(prefix: &str, c: usize, out: &mut Vec<(String, Vec<usize>, ParamKind)>) {
            let name = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
            out.push((name("weight"), vec![c], ParamKind::Scale));
            out.push((name("bias"), vec![c], ParamKind::Shift));
            out.push((name("running_mean"), vec![c], ParamKind::RunningMean));
            out.push((name("running_var"), vec![c], ParamKind::RunningVar));
        }
        let mut out = Vec::new();
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out.push((
                "weight".into(),
                vec![out_channels, in_channels, kernel, kernel],
                ParamKind::Weight,
            )),
            LayerSpec::BatchNorm2d { features } => bn("", features, &mut out),
            LayerSpec::BasicBlock {
                in_channels,
                out_channels,
                shortcut_kernel,
                ..
            } => {
                out.push(("conv1.weight".into(), vec![out_channels, in_channels, 3, 3], ParamKind::Weight));
                bn("bn1", out_channels, &mut out);
                out.push(("conv2.weight".into(), vec![out_channels, out_channels, 3, 3], ParamKind::Weight));
                bn("bn2", out_channels, &mut out);
                if self.has_projection() {
                    out.push((
                        "shortcut.conv.weight".into(),
                        vec![out_channels, in_channels, shortcut_kernel, shortcut_kernel],
                        ParamKind::Weight,
                    ));
                    bn("shortcut.bn", out_channels, &mut out);
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                out.push(("weight".into(), vec![in_features, out_features], ParamKind::Weight));
                out.push(("bias".into(), vec![out_features], ParamKind::Bias));
            }
            LayerSpec::Relu | LayerSpec::AdaptiveAvgPool2d { .. } | LayerSpec::Flatten => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        use ParamKind::*;
        [Weight, Bias, Scale, Shift, RunningMean, RunningVar].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients keyed by parameter name.
pub type GradientMap<T> = BTreeMap<String, Tensor<T>>;

/// Tape handles of a model's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    vars: Vec<(usize, Var)>,
}

impl ParamBinding {
    /// Collects gradients of every tracked trainable parameter.
    pub fn gradients<T: Element>(
        &self,
        model: &Model<T>,
        grads: &mut crate::tensor::Gradients<T>,
    ) -> GradientMap<T> {
        self.vars
            .iter()
            .filter(|(i, _)| model.params[*i].kind.trainable())
            .filter_map(|&(i, v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(model.params[i].value.shape().to_vec()));
                Some((model.params[i].name.clone(), g))
            })
            .collect()
    }
}

/// A sequential network with named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    layers: Vec<LayerSpec>,
    params: Vec<Param<T>>,
    mode: Mode,
}

struct BnUpdate<T> {
    first_param: usize,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

impl<T: Element> Model<T> {
    /// Builds a model with He-uniform weights, unit BN scales and zero
    /// shifts/biases.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (li, layer) in layers.iter().enumerate() {
            for (name, shape, kind) in layer.param_slots() {
                let numel: usize = shape.iter().product();
                let data = match kind {
                    ParamKind::Weight => {
                        let fan_in = match shape.len() {
                            4 => shape[1] * shape[2] * shape[3],
                            _ => shape[0],
                        };
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                        (0..numel).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
                    }
                    ParamKind::Scale | ParamKind::RunningVar => vec![T::one(); numel],
                    ParamKind::Bias | ParamKind::Shift | ParamKind::RunningMean => vec![T::zero(); numel],
                };
                params.push(Param {
                    name: format!("{li}.{name}"),
                    value: Tensor::new(shape, data)?,
                    kind,
                });
            }
        }
        Ok(Self {
            layers,
            params,
            mode: Mode::Train,
        })
    }

    /// Assembles a model from an architecture and matching parameters.
    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<Param<T>>) -> Result<Self> {
        validate_layers(&layers)?;
        let expected: Vec<_> = layers
            .iter()
            .enumerate()
            .flat_map(|(li, l)| {
                l.param_slots()
                    .into_iter()
                    .map(move |(n, s, k)| (format!("{li}.{n}"), s, k))
            })
            .collect();
        if expected.len() != params.len() {
            return Err(Error::CorruptFile(format!(
                "architecture needs {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, kind), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() || *kind != p.kind {
                return Err(Error::CorruptFile(format!(
                    "parameter `{}` {:?} does not match slot `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if p.kind == ParamKind::RunningVar && p.value.data().iter().any(|&v| v <= T::zero()) {
                return Err(Error::CorruptFile(format!("`{}` must be positive", p.name)));
            }
        }
        Ok(Self {
            layers,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    /// Number of logits produced per sample.
    pub fn num_outputs(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match *l {
            LayerSpec::Dense { out_features, .. } => Some(out_features),
            _ => None,
        })
    }

    /// Expected per-sample input: `(channels, true)` for image models,
    /// `(features, false)` for dense-first models.
    pub fn input_signature(&self) -> Option<(usize, bool)> {
        match *self.layers.first()? {
            LayerSpec::Conv2d { in_channels, .. } | LayerSpec::BasicBlock { in_channels, .. } => {
                Some((in_channels, true))
            }
            LayerSpec::Dense { in_features, .. } => Some((in_features, false)),
            _ => None,
        }
    }

    pub fn converted<U: Element>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            mode: self.mode,
        }
    }

    /// Runs the model in its current mode, returning logits. In train mode
    /// the trainable parameters are tracked and batch-norm running
    /// statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var) -> Result<(Var, ParamBinding)> {
        let train = self.mode == Mode::Train;
        self.forward_with(tape, input, train)
    }

    /// Like [`Model::forward`] with explicit control over parameter tracking.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        track_params: bool,
    ) -> Result<(Var, ParamBinding)> {
        let train = self.mode == Mode::Train;
        let (out, binding, updates) = self.run(tape, input, train, track_params)?;
        for u in updates {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let keep = T::one() - m;
            let unbias = T::from_f64_lossy(u.count as f64 / (u.count.max(2) - 1) as f64);
            let rm = &mut self.params[u.first_param + 2].value;
            for (r, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + m * b;
            }
            let rv = &mut self.params[u.first_param + 3].value;
            for (r, &b) in rv.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
        Ok((out, binding))
    }

    /// Eval-mode logits for a batch, independent of the model's mode.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (out, _, _) = self.run(&mut tape, x, false, false)?;
        Ok(tape.value(out).clone())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let Some((expected, image)) = self.input_signature() else {
            return Ok(());
        };
        let ok = if image {
            shape.len() == 4 && shape[1] == expected
        } else {
            shape.len() == 2 && shape[1] == expected
        };
        if ok {
            Ok(())
        } else {
            let want = if image {
                format!("[B,{expected},H,W]")
            } else {
                format!("[B,{expected}]")
            };
            Err(shape_err("forward", format!("model expects {want}, got {shape:?}")))
        }
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        train: bool,
        track: bool,
    ) -> Result<(Var, ParamBinding, Vec<BnUpdate<T>>)> {
        self.check_input(tape.value(input).shape())?;
        let vars: Vec<(usize, Var)> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (i, tape.leaf(p.value.clone(), track && p.kind.trainable())))
            .collect();
        let mut updates = Vec::new();
        let mut cursor = 0usize;
        let mut x = input;
        let v = |i: usize| vars[i].1;

        let bn = |tape: &mut Tape<T>, x: Var, at: usize, updates: &mut Vec<BnUpdate<T>>| -> Result<Var> {
            let y = if train {
                tape.apply(Op::BatchNorm2d { eps: BN_EPS, training: true }, &[x, v(at), v(at + 1)])?
            } else {
                tape.apply(
                    Op::BatchNorm2d { eps: BN_EPS, training: false },
                    &[x, v(at), v(at + 1), v(at + 2), v(at + 3)],
                )?
            };
            if train {
                let shape = tape.value(x).shape();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (mean, var) = tape.batch_stats(y).expect("training batch norm saves stats");
                updates.push(BnUpdate {
                    first_param: at,
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    count,
                });
            }
            Ok(y)
        };

        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    x = tape.conv2d(x, v(cursor), stride, padding)?;
                    cursor += 1;
                }
                LayerSpec::BatchNorm2d { .. } => {
                    x = bn(tape, x, cursor, &mut updates)?;
                    cursor += 4;
                }
                LayerSpec::Relu => x = tape.relu(x)?,
                LayerSpec::BasicBlock {
                    stride,
                    shortcut_kernel,
                    ..
                } => {
                    let mut h = tape.conv2d(x, v(cursor), stride, 1)?;
                    h = bn(tape, h, cursor + 1, &mut updates)?;
                    h = tape.relu(h)?;
                    h = tape.conv2d(h, v(cursor + 5), 1, 1)?;
                    h = bn(tape, h, cursor + 6, &mut updates)?;
                    cursor += 10;
                    let skip = if layer.has_projection() {
                        let s = tape.conv2d(x, v(cursor), stride, shortcut_kernel / 2)?;
                        let s = bn(tape, s, cursor + 1, &mut updates)?;
                        cursor += 5;
                        s
                    } else {
                        x
                    };
                    let sum = tape.add(h, skip)?;
                    x = tape.relu(sum)?;
                }
                LayerSpec::AdaptiveAvgPool2d { out_h, out_w } => {
                    x = tape.apply(Op::AdaptiveAvgPool2d { out_h, out_w }, &[x])?;
                }
                LayerSpec::Flatten => {
                    let shape = tape.value(x).shape();
                    let flat = vec![shape[0], shape[1..].iter().product()];
                    x = tape.reshape(x, &flat)?;
                }
                LayerSpec::Dense { .. } => {
                    let y = tape.matmul(x, v(cursor))?;
                    x = tape.add_broadcast(y, v(cursor + 1))?;
                    cursor += 2;
                }
            }
        }
        debug_assert_eq!(cursor, self.params.len());
        Ok((x, ParamBinding { vars }, updates))
    }
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("model needs at least one layer".into()));
    }
    for l in layers {
        let ok = match *l {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && matches!(kernel, 1 | 3) && stride > 0,
            LayerSpec::BatchNorm2d { features } => features > 0,
            LayerSpec::BasicBlock {
                in_channels,
                out_channels,
                stride,
                shortcut_kernel,
            } => {
                in_channels > 0 && out_channels > 0 && matches!(stride, 1 | 2) && matches!(shortcut_kernel, 1 | 3)
            }
            LayerSpec::AdaptiveAvgPool2d { out_h, out_w } => out_h > 0 && out_w > 0,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features > 0 && out_features > 0,
            LayerSpec::Relu | LayerSpec::Flatten => true,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid layer {l:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(batch: usize, c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(-1.0, 1.0).unwrap();
        let data = (0..batch * c * hw * hw).map(|_| d.sample(&mut rng)).collect();
        Tensor::new(vec![batch, c, hw, hw], data).unwrap()
    }

    #[test]
    fn resnet8_logit_shape() {
        let model = build_resnet::<f32>(ResNetVariant::ResNet8, 3, 10, 16, 0).unwrap();
        let x = image(5, 3, 8, 1).cast::<f32>();
        let y = model.infer(&x).unwrap();
        assert_eq!(y.shape(), &[5, 10]);
    }

    #[test]
    fn mlp_zero_weights_yield_bias() {
        let mut m = build_mlp::<f64>(&[8, 16, 10], 3).unwrap();
        for p in m.params_mut() {
            if p.kind == ParamKind::Weight {
                p.value.data_mut().fill(0.0);
            }
        }
        let bias: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.3).collect();
        m.param_mut("2.bias").unwrap().value = Tensor::new(vec![10], bias.clone()).unwrap();
        let y = m.infer(&Tensor::zeros(vec![3, 8])).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), bias.as_slice());
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_per_sample() {
        let mut m = build_resnet::<f64>(ResNetVariant::ResNet8, 2, 4, 4, 9).unwrap();
        m.eval();
        let x = image(4, 2, 6, 2);
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a, b);

        let perm = [2, 0, 3, 1];
        let y = m.infer(&x.select_rows(&perm).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (u, v) in y.row(i).iter().zip(a.row(p)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_batchnorm_normalises() {
        let layers = vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm2d { features: 3 },
        ];
        let mut m = Model::<f64>::new(layers, 4).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image(6, 2, 5, 7));
        let (y, _) = m.forward(&mut tape, x).unwrap();
        let (_, stats_var) = {
            let out = tape.value(y);
            let s = 25;
            let mut means = vec![0.0; 3];
            let mut vars = vec![0.0; 3];
            for c in 0..3 {
                let vals: Vec<f64> = (0..6)
                    .flat_map(|b| out.data()[(b * 3 + c) * s..][..s].to_vec())
                    .collect();
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                means[c] = mu;
                vars[c] = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            }
            (means.clone(), (means, vars))
        };
        for c in 0..3 {
            assert!(stats_var.0[c].abs() < 1e-4);
            assert!((stats_var.1[c] - 1.0).abs() < 1e-4, "{:?}", stats_var.1);
        }
        // running statistics moved away from their initial values
        assert!(m.param("1.running_mean").unwrap().value.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zeroed_identity_block_is_relu() {
        let layers = vec![LayerSpec::BasicBlock {
            in_channels: 3,
            out_channels: 3,
            stride: 1,
            shortcut_kernel: 3,
        }];
        let mut m = Model::<f64>::new(layers, 1).unwrap();
        for p in m.params_mut() {
            if p.kind == ParamKind::Weight {
                p.value.data_mut().fill(0.0);
            }
        }
        m.eval();
        let x = image(2, 3, 4, 5);
        let y = m.infer(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn wrong_input_channels() {
        let m = build_resnet::<f32>(ResNetVariant::ResNet8, 3, 10, 8, 0).unwrap();
        let err = m.infer(&Tensor::zeros(vec![1, 2, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
