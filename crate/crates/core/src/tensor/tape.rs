//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value produced during a step lives on the tape and is addressed by
//! a [`Var`]. An operation records a backward node only when at least one of
//! its inputs requires a gradient, so inference on a tape of constants costs
//! no more than the forward arithmetic. Entries are appended in evaluation
//! order, which makes the tape topologically sorted by construction.

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations and their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Elementwise sum of two equally shaped tensors.
    Add,
    Sub,
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Exp,
    Log,
    Relu,
    /// `[m,k] x [k,n]`.
    MatMul,
    /// Input `[B,C,H,W]`, weight `[O,C,kh,kw]`, zero padding on both sides.
    Conv2d { stride: usize, padding: usize },
    /// Zero padding of the two trailing axes of a 4-D tensor.
    Pad2d { padding: usize },
    /// `None` reduces every axis.
    Sum { axis: Option<usize>, keepdim: bool },
    Mean { axis: Option<usize>, keepdim: bool },
    Max { axis: usize, keepdim: bool },
    /// Numpy-style expansion of size-1 or missing leading axes.
    Broadcast { shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    AdaptiveAvgPool2d { out_h: usize, out_w: usize },
    /// Inputs: x `[B,C,H,W]`, scale `[C]`, shift `[C]`, and in eval mode
    /// running mean `[C]` and running variance `[C]`.
    BatchNorm2d { eps: f64, training: bool },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Pad2d { .. } => "pad2d",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::AdaptiveAvgPool2d { .. } => "adaptive_avg_pool2d",
            Op::BatchNorm2d { .. } => "batchnorm2d",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul | Op::Conv2d { .. } => 2..=2,
            Op::BatchNorm2d { training: true, .. } => 3..=3,
            Op::BatchNorm2d { training: false, .. } => 5..=5,
            _ => 1..=1,
        }
    }
}

enum Saved<T> {
    Nothing,
    Argmax(Vec<usize>),
    BatchStats { mean: Vec<T>, var: Vec<T> },
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    saved: Saved<T>,
}

struct Entry<T> {
    value: Tensor<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
    stats: Option<(Vec<T>, Vec<T>)>,
}

/// Records primitive applications for a single backward pass.
pub struct Tape<T: Element = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every tracked tape value.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Number of values on the tape.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of recorded backward nodes.
    pub fn node_count(&self) -> usize {
        self.entries.iter().filter(|e| e.node.is_some()).count()
    }

    /// Adds a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.entries.push(Entry {
            value,
            requires_grad,
            node: None,
            stats: None,
        });
        Var(self.entries.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.entries[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.entries[var.0].requires_grad
    }

    /// Batch mean and biased variance computed by a training-mode batch norm.
    pub fn batch_stats(&self, var: Var) -> Option<(&[T], &[T])> {
        self.entries
            .get(var.0)?
            .stats
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies a primitive to values on this tape.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if !op.arity().contains(&inputs.len()) {
            return Err(Error::InvalidAttr {
                op: op.name(),
                detail: format!("expected {:?} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.entries.len()) {
            return Err(Error::InvalidArgument(format!("{bad:?} is not on this tape")));
        }
        let (value, saved) = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.entries[v.0].requires_grad);
        let stats = match &saved {
            Saved::BatchStats { mean, var } => Some((mean.clone(), var.clone())),
            _ => None,
        };
        let node = requires_grad.then(|| Node {
            op,
            inputs: inputs.to_vec(),
            saved,
        });
        self.entries.push(Entry {
            value,
            requires_grad,
            node,
            stats,
        });
        Ok(Var(self.entries.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, weight])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>, keepdim: bool) -> Result<Var> {
        self.apply(Op::Sum { axis, keepdim }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>, keepdim: bool) -> Result<Var> {
        self.apply(Op::Mean { axis, keepdim }, &[a])
    }

    pub fn max(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.apply(Op::Max { axis, keepdim }, &[a])
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Broadcast {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    /// Adds `bias` after broadcasting it to the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let b = self.broadcast(bias, &shape)?;
        self.add(x, b)
    }

    /// Row-wise `log softmax(x / temperature)` of a `[B,K]` tensor,
    /// stabilised by subtracting the row maximum.
    pub fn log_softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(shape_err("log_softmax", format!("expected [B,K], got {shape:?}")));
        }
        let z = if temperature == 1.0 {
            logits
        } else {
            self.scale(logits, 1.0 / temperature)?
        };
        let m = self.max(z, 1, true)?;
        let m = self.broadcast(m, &shape)?;
        let shifted = self.sub(z, m)?;
        let e = self.exp(shifted)?;
        let s = self.sum(e, Some(1), true)?;
        let lse = self.log(s)?;
        let lse = self.broadcast(lse, &shape)?;
        self.sub(shifted, lse)
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let x = |i: usize| &self.entries[inputs[i].0].value;
        let name = op.name();
        let same_shape = |a: &Tensor<T>, b: &Tensor<T>| -> Result<()> {
            if a.shape() == b.shape() {
                Ok(())
            } else {
                Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        };
        let zip = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
            let (a, b) = (x(0), x(1));
            same_shape(a, b)?;
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect(),
            })
        };
        let saved = Saved::Nothing;
        let out = match op {
            Op::Add => zip(|a, b| a + b)?,
            Op::Sub => zip(|a, b| a - b)?,
            Op::Mul => zip(|a, b| a * b)?,
            Op::Scale(c) => {
                let c = T::from_f64_lossy(*c);
                x(0).map(|v| v * c)
            }
            Op::Exp => x(0).map(T::exp),
            Op::Log => x(0).map(T::ln),
            Op::Relu => x(0).map(|v| if v > T::zero() { v } else { T::zero() }),
            Op::MatMul => {
                let (a, b) = (x(0), x(1));
                if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
                    return Err(shape_err(name, format!("{:?} x {:?}", a.shape, b.shape)));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut data = vec![T::zero(); m * n];
                T::gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, T::zero(), &mut data, n as isize, 1);
                Tensor {
                    shape: vec![m, n],
                    data,
                }
            }
            Op::Conv2d { .. } => {
                let g = self.conv_geom(op, inputs)?;
                let data = kernels::conv2d_forward(&g, &x(0).data, &x(1).data);
                Tensor {
                    shape: vec![g.batch, g.out_c, g.oh, g.ow],
                    data,
                }
            }
            Op::Pad2d { padding } => {
                let a = x(0);
                let (planes, h, w) = four_d(name, a)?;
                let data = kernels::zero_pad(&a.data, planes, h, w, *padding);
                Tensor {
                    shape: vec![a.shape[0], a.shape[1], h + 2 * padding, w + 2 * padding],
                    data,
                }
            }
            Op::Sum { axis, keepdim } | Op::Mean { axis, keepdim } => {
                let a = x(0);
                let mean = matches!(op, Op::Mean { .. });
                let (data, shape) = match axis {
                    None => {
                        let total: T = a.data.iter().copied().sum();
                        let n = T::from_usize(a.numel().max(1)).unwrap();
                        let shape = if *keepdim { vec![1; a.ndim()] } else { Vec::new() };
                        (vec![if mean { total / n } else { total }], shape)
                    }
                    Some(axis) => {
                        check_axis(name, a, *axis)?;
                        let (outer, len, inner) = kernels::axis_split(&a.shape, *axis);
                        let mut data = kernels::sum_axis(&a.data, outer, len, inner);
                        if mean {
                            let n = T::from_usize(len).unwrap();
                            data.iter_mut().for_each(|v| *v = *v / n);
                        }
                        (data, reduced_shape(&a.shape, *axis, *keepdim))
                    }
                };
                Tensor { shape, data }
            }
            Op::Max { axis, keepdim } => {
                let a = x(0);
                check_axis(name, a, *axis)?;
                let (outer, len, inner) = kernels::axis_split(&a.shape, *axis);
                let (data, idx) = kernels::max_axis(&a.data, outer, len, inner);
                return Ok((
                    Tensor {
                        shape: reduced_shape(&a.shape, *axis, *keepdim),
                        data,
                    },
                    Saved::Argmax(idx),
                ));
            }
            Op::Broadcast { shape } => {
                let a = x(0);
                check_broadcast(&a.shape, shape)?;
                let map = kernels::broadcast_index(&a.shape, shape);
                Tensor {
                    shape: shape.clone(),
                    data: map.iter().map(|&i| a.data[i]).collect(),
                }
            }
            Op::Reshape { shape } => x(0).clone().reshape(shape.clone())?,
            Op::AdaptiveAvgPool2d { out_h, out_w } => {
                let a = x(0);
                let (planes, h, w) = four_d(name, a)?;
                if *out_h == 0 || *out_w == 0 {
                    return Err(Error::InvalidAttr {
                        op: name,
                        detail: "output size must be positive".into(),
                    });
                }
                let (rows, cols) = (kernels::adaptive_bins(h, *out_h), kernels::adaptive_bins(w, *out_w));
                let mut data = Vec::with_capacity(planes * out_h * out_w);
                for p in 0..planes {
                    let plane = &a.data[p * h * w..(p + 1) * h * w];
                    for &(r0, r1) in &rows {
                        for &(c0, c1) in &cols {
                            let mut acc = T::zero();
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    acc += plane[r * w + c];
                                }
                            }
                            data.push(acc / T::from_usize((r1 - r0) * (c1 - c0)).unwrap());
                        }
                    }
                }
                Tensor {
                    shape: vec![a.shape[0], a.shape[1], *out_h, *out_w],
                    data,
                }
            }
            Op::BatchNorm2d { eps, training } => {
                let a = x(0);
                let (batch, c, s) = bn_layout(a)?;
                for i in 1..inputs.len() {
                    if x(i).shape() != [c] {
                        return Err(shape_err(
                            name,
                            format!("per-channel tensor {:?} for {c} channels", x(i).shape()),
                        ));
                    }
                }
                let eps = T::from_f64_lossy(*eps);
                let (mean, var) = if *training {
                    if batch * s < 2 {
                        return Err(shape_err(name, "training mode needs more than one value per channel"));
                    }
                    kernels::channel_stats(&a.data, batch, c, s)
                } else {
                    (x(3).data.clone(), x(4).data.clone())
                };
                let (gamma, beta) = (&x(1).data, &x(2).data);
                let mut data = vec![T::zero(); a.numel()];
                for b in 0..batch {
                    for ch in 0..c {
                        let inv = (var[ch] + eps).sqrt().recip();
                        let (g, sh, mu) = (gamma[ch] * inv, beta[ch], mean[ch]);
                        let off = (b * c + ch) * s;
                        for (o, &v) in data[off..off + s].iter_mut().zip(&a.data[off..off + s]) {
                            *o = (v - mu) * g + sh;
                        }
                    }
                }
                let out = Tensor {
                    shape: a.shape.clone(),
                    data,
                };
                return Ok((out, Saved::BatchStats { mean, var }));
            }
        };
        Ok((out, saved))
    }

    fn conv_geom(&self, op: &Op, inputs: &[Var]) -> Result<ConvGeom> {
        let Op::Conv2d { stride, padding } = *op else {
            unreachable!()
        };
        let (x, w) = (&self.entries[inputs[0].0].value, &self.entries[inputs[1].0].value);
        if stride == 0 {
            return Err(Error::InvalidAttr {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        if x.ndim() != 4 || w.ndim() != 4 || x.shape[1] != w.shape[1] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} with kernel {:?}", x.shape, w.shape),
            ));
        }
        let (h, wd) = (x.shape[2] + 2 * padding, x.shape[3] + 2 * padding);
        let (kh, kw) = (w.shape[2], w.shape[3]);
        if kh > h || kw > wd {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        }
        Ok(ConvGeom {
            batch: x.shape[0],
            in_c: x.shape[1],
            h: x.shape[2],
            w: x.shape[3],
            out_c: w.shape[0],
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h - kh) / stride + 1,
            ow: (wd - kw) / stride + 1,
        })
    }

    /// Backpropagates from a scalar loss. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let entry = self
            .entries
            .get(loss.0)
            .ok_or(Error::DetachedLoss)?;
        if entry.value.numel() != 1 {
            return Err(Error::NonScalarLoss(entry.value.shape.clone()));
        }
        if !entry.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.entries.len(), || None);
        grads[loss.0] = Some(Tensor::full(entry.value.shape.clone(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(node) = self.entries[id].node.as_ref() else {
                continue;
            };
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let input_grads = self.node_backward(id, node, &dy);
            // keep the output gradient available for inspection
            grads[id] = Some(dy);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.entries[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
                    None => grads[input.0] = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, id: usize, node: &Node<T>, dy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let val = |i: usize| &self.entries[node.inputs[i].0].value;
        let wants = |i: usize| self.entries[node.inputs[i].0].requires_grad;
        let out = &self.entries[id].value;
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor {
            shape: t.shape.clone(),
            data,
        };
        let elementwise = |f: &dyn Fn(usize) -> T| like(dy, (0..dy.numel()).map(f).collect());

        match &node.op {
            Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
            Op::Sub => vec![Some(dy.clone()), Some(dy.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    wants(0).then(|| elementwise(&|i| dy.data[i] * b.data[i])),
                    wants(1).then(|| elementwise(&|i| dy.data[i] * a.data[i])),
                ]
            }
            Op::Scale(c) => {
                let c = T::from_f64_lossy(*c);
                vec![Some(dy.map(|v| v * c))]
            }
            Op::Exp => vec![Some(elementwise(&|i| dy.data[i] * out.data[i]))],
            Op::Log => {
                let a = val(0);
                vec![Some(elementwise(&|i| dy.data[i] / a.data[i]))]
            }
            Op::Relu => {
                let a = val(0);
                vec![Some(elementwise(&|i| {
                    if a.data[i] > T::zero() {
                        dy.data[i]
                    } else {
                        T::zero()
                    }
                }))]
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let da = wants(0).then(|| {
                    let mut d = vec![T::zero(); m * k];
                    // dA = dY * B^T
                    T::gemm(m, n, k, &dy.data, n as isize, 1, &b.data, 1, n as isize, T::zero(), &mut d, k as isize, 1);
                    like(a, d)
                });
                let db = wants(1).then(|| {
                    let mut d = vec![T::zero(); k * n];
                    // dB = A^T * dY
                    T::gemm(k, m, n, &a.data, 1, k as isize, &dy.data, n as isize, 1, T::zero(), &mut d, n as isize, 1);
                    like(b, d)
                });
                vec![da, db]
            }
            Op::Conv2d { .. } => {
                let g = self
                    .conv_geom(&node.op, &node.inputs)
                    .expect("geometry validated in forward");
                let (dx, dw) =
                    kernels::conv2d_backward(&g, &val(0).data, &val(1).data, &dy.data, wants(0), wants(1));
                vec![dx.map(|d| like(val(0), d)), dw.map(|d| like(val(1), d))]
            }
            Op::Pad2d { padding } => {
                let a = val(0);
                let (planes, h, w) = four_d("pad2d", a).expect("validated in forward");
                vec![Some(like(a, kernels::unpad(&dy.data, planes, h, w, *padding)))]
            }
            Op::Sum { axis, .. } | Op::Mean { axis, .. } => {
                let a = val(0);
                let mean = matches!(node.op, Op::Mean { .. });
                let data = match axis {
                    None => {
                        let mut g = dy.data[0];
                        if mean {
                            g = g / T::from_usize(a.numel().max(1)).unwrap();
                        }
                        vec![g; a.numel()]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = kernels::axis_split(&a.shape, *axis);
                        let scale = if mean {
                            T::from_usize(len).unwrap().recip()
                        } else {
                            T::one()
                        };
                        let mut d = Vec::with_capacity(a.numel());
                        for o in 0..outer {
                            for _ in 0..len {
                                d.extend(dy.data[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                            }
                        }
                        d
                    }
                };
                vec![Some(like(a, data))]
            }
            Op::Max { axis, .. } => {
                let a = val(0);
                let Saved::Argmax(idx) = &node.saved else {
                    unreachable!()
                };
                let (outer, len, inner) = kernels::axis_split(&a.shape, *axis);
                let mut d = vec![T::zero(); a.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        d[(o * len + idx[slot]) * inner + i] = dy.data[slot];
                    }
                }
                vec![Some(like(a, d))]
            }
            Op::Broadcast { shape } => {
                let a = val(0);
                let map = kernels::broadcast_index(&a.shape, shape);
                let mut d = vec![T::zero(); a.numel()];
                for (j, &src) in map.iter().enumerate() {
                    d[src] += dy.data[j];
                }
                vec![Some(like(a, d))]
            }
            Op::Reshape { .. } => vec![Some(like(val(0), dy.data.clone()))],
            Op::AdaptiveAvgPool2d { out_h, out_w } => {
                let a = val(0);
                let (planes, h, w) = four_d("adaptive_avg_pool2d", a).expect("validated in forward");
                let (rows, cols) = (kernels::adaptive_bins(h, *out_h), kernels::adaptive_bins(w, *out_w));
                let mut d = vec![T::zero(); a.numel()];
                for p in 0..planes {
                    for (bi, &(r0, r1)) in rows.iter().enumerate() {
                        for (bj, &(c0, c1)) in cols.iter().enumerate() {
                            let g = dy.data[(p * out_h + bi) * out_w + bj]
                                / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    d[p * h * w + r * w + c] += g;
                                }
                            }
                        }
                    }
                }
                vec![Some(like(a, d))]
            }
            Op::BatchNorm2d { eps, training } => {
                let a = val(0);
                let gamma = &val(1).data;
                let (batch, c, s) = bn_layout(a).expect("validated in forward");
                let Saved::BatchStats { mean, var } = &node.saved else {
                    unreachable!()
                };
                let eps = T::from_f64_lossy(*eps);
                let mut dx = vec![T::zero(); a.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let m = T::from_usize(batch * s).unwrap();
                for ch in 0..c {
                    let inv = (var[ch] + eps).sqrt().recip();
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for b in 0..batch {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            let xhat = (a.data[i] - mean[ch]) * inv;
                            sum_dy += dy.data[i];
                            sum_dy_xhat += dy.data[i] * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    for b in 0..batch {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            dx[i] = if *training {
                                let xhat = (a.data[i] - mean[ch]) * inv;
                                gamma[ch] * inv / m * (m * dy.data[i] - sum_dy - xhat * sum_dy_xhat)
                            } else {
                                dy.data[i] * gamma[ch] * inv
                            };
                        }
                    }
                }
                let mut grads = vec![
                    wants(0).then(|| like(a, dx)),
                    Some(like(val(1), dgamma)),
                    Some(like(val(2), dbeta)),
                ];
                if !training {
                    grads.extend([None, None]);
                }
                grads
            }
        }
    }
}

fn four_d<T: Element>(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.ndim() != 4 {
        return Err(shape_err(op, format!("expected [B,C,H,W], got {:?}", a.shape)));
    }
    Ok((a.shape[0] * a.shape[1], a.shape[2], a.shape[3]))
}

fn bn_layout<T: Element>(a: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match a.ndim() {
        2 => Ok((a.shape[0], a.shape[1], 1)),
        4 => Ok((a.shape[0], a.shape[1], a.shape[2] * a.shape[3])),
        _ => Err(shape_err(
            "batchnorm2d",
            format!("expected [B,C,H,W] or [B,C], got {:?}", a.shape),
        )),
    }
}

fn check_axis<T: Element>(op: &'static str, a: &Tensor<T>, axis: usize) -> Result<()> {
    if axis < a.ndim() {
        Ok(())
    } else {
        Err(Error::InvalidAttr {
            op,
            detail: format!("axis {axis} out of range for shape {:?}", a.shape),
        })
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn check_broadcast(src: &[usize], dst: &[usize]) -> Result<()> {
    let ok = src.len() <= dst.len()
        && src
            .iter()
            .rev()
            .zip(dst.iter().rev())
            .all(|(&s, &d)| s == d || s == 1);
    if ok {
        Ok(())
    } else {
        Err(shape_err("broadcast", format!("cannot broadcast {src:?} to {dst:?}")))
    }
}
