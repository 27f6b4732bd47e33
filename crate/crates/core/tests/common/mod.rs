#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skd::distill::{ce_loss, kd_loss, total_loss, KdScaling, WeightPair};
use skd::nn::{LayerSpec, Model};
use skd::tensor::{Op, Tape, Tensor, Var};
use skd::Result;

pub const STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude at least `gap`, random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Objective = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub point: Tensor<f64>,
    pub f: Objective,
}

/// `sum(y * r)` for a fixed random `r`, so no coordinate has a structurally
/// zero gradient.
fn weighted(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p, None, false)
}

fn case(
    name: &str,
    point: Tensor<f64>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    body: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> GradCase {
    let r = uniform(rng, out_shape, -1.0, 1.0);
    GradCase {
        name: name.to_string(),
        point,
        f: Box::new(move |tape, x| {
            let y = body(tape, x)?;
            weighted(tape, y, &r)
        }),
    }
}

/// One case per primitive (and per interesting attribute) for `seed`.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut g = rng(seed);
    let mut cases = Vec::new();

    let c = uniform(&mut g, &[3, 4], -1.0, 1.0);
    let p = uniform(&mut g, &[3, 4], -1.0, 1.0);
    cases.push(case("add", p, &[3, 4], &mut g, move |t, x| {
        let k = t.constant(c.clone());
        let xk = t.mul(x, k)?;
        t.add(x, xk)
    }));

    let c = uniform(&mut g, &[3, 4], -1.0, 1.0);
    let p = uniform(&mut g, &[3, 4], -1.0, 1.0);
    cases.push(case("sub", p, &[3, 4], &mut g, move |t, x| {
        let k = t.constant(c.clone());
        let a = t.sub(k, x)?;
        let sq = t.mul(x, x)?;
        t.sub(a, sq)
    }));

    let p = uniform(&mut g, &[2, 5], -1.0, 1.0);
    cases.push(case("mul", p, &[2, 5], &mut g, |t, x| t.mul(x, x)));

    let p = uniform(&mut g, &[6], -1.0, 1.0);
    cases.push(case("scale", p, &[6], &mut g, |t, x| t.scale(x, -1.7)));

    let p = uniform(&mut g, &[2, 3], -1.5, 1.5);
    cases.push(case("exp", p, &[2, 3], &mut g, |t, x| t.exp(x)));

    let p = uniform(&mut g, &[2, 3], 0.5, 2.0);
    cases.push(case("log", p, &[2, 3], &mut g, |t, x| t.log(x)));

    let p = away_from_zero(&mut g, &[3, 4], 0.05);
    cases.push(case("relu", p, &[3, 4], &mut g, |t, x| t.relu(x)));

    let b = uniform(&mut g, &[4, 5], -1.0, 1.0);
    let p = uniform(&mut g, &[3, 4], -1.0, 1.0);
    cases.push(case("matmul-lhs", p, &[3, 5], &mut g, move |t, x| {
        let k = t.constant(b.clone());
        t.matmul(x, k)
    }));
    let a = uniform(&mut g, &[2, 3], -1.0, 1.0);
    let p = uniform(&mut g, &[3, 4], -1.0, 1.0);
    cases.push(case("matmul-rhs", p, &[2, 4], &mut g, move |t, x| {
        let k = t.constant(a.clone());
        t.matmul(k, x)
    }));

    for (stride, padding, out) in [(1, 1, 5), (2, 1, 3), (1, 0, 3)] {
        let w = uniform(&mut g, &[4, 3, 3, 3], -0.5, 0.5);
        let p = uniform(&mut g, &[2, 3, 5, 5], -1.0, 1.0);
        cases.push(case(
            &format!("conv2d-input-s{stride}p{padding}"),
            p,
            &[2, 4, out, out],
            &mut g,
            move |t, x| {
                let k = t.constant(w.clone());
                t.conv2d(x, k, stride, padding)
            },
        ));
    }
    let input = uniform(&mut g, &[2, 3, 5, 5], -1.0, 1.0);
    let p = uniform(&mut g, &[4, 3, 3, 3], -0.5, 0.5);
    cases.push(case("conv2d-weight", p, &[2, 4, 3, 3], &mut g, move |t, x| {
        let k = t.constant(input.clone());
        t.conv2d(k, x, 2, 1)
    }));
    let input = uniform(&mut g, &[2, 3, 4, 4], -1.0, 1.0);
    let p = uniform(&mut g, &[2, 3, 1, 1], -0.5, 0.5);
    cases.push(case("conv2d-1x1", p, &[2, 2, 2, 2], &mut g, move |t, x| {
        let k = t.constant(input.clone());
        t.conv2d(k, x, 2, 0)
    }));

    let p = uniform(&mut g, &[2, 2, 3, 3], -1.0, 1.0);
    cases.push(case("pad2d", p, &[2, 2, 5, 5], &mut g, |t, x| {
        t.apply(Op::Pad2d { padding: 1 }, &[x])
    }));

    let p = uniform(&mut g, &[3, 4], -1.0, 1.0);
    cases.push(case("sum-all", p, &[], &mut g, |t, x| t.sum(x, None, false)));
    let p = uniform(&mut g, &[3, 4, 2], -1.0, 1.0);
    cases.push(case("sum-axis1-keep", p, &[3, 1, 2], &mut g, |t, x| t.sum(x, Some(1), true)));
    let p = uniform(&mut g, &[3, 4], -1.0, 1.0);
    cases.push(case("mean-axis0", p, &[4], &mut g, |t, x| t.mean(x, Some(0), false)));
    let p = uniform(&mut g, &[2, 3, 2], -1.0, 1.0);
    cases.push(case("mean-all", p, &[], &mut g, |t, x| t.mean(x, None, false)));

    let p = uniform(&mut g, &[4, 5], -1.0, 1.0);
    cases.push(case("max-axis1", p, &[4], &mut g, |t, x| t.max(x, 1, false)));
    let p = uniform(&mut g, &[4, 5], -1.0, 1.0);
    cases.push(case("max-axis0-keep", p, &[1, 5], &mut g, |t, x| t.max(x, 0, true)));

    let p = uniform(&mut g, &[1, 4], -1.0, 1.0);
    cases.push(case("broadcast-rows", p, &[3, 4], &mut g, |t, x| t.broadcast(x, &[3, 4])));
    let p = uniform(&mut g, &[3, 1], -1.0, 1.0);
    cases.push(case("broadcast-cols", p, &[2, 3, 4], &mut g, |t, x| t.broadcast(x, &[2, 3, 4])));

    let p = uniform(&mut g, &[2, 6], -1.0, 1.0);
    cases.push(case("reshape", p, &[3, 4], &mut g, |t, x| t.reshape(x, &[3, 4])));

    let p = uniform(&mut g, &[2, 3, 5, 5], -1.0, 1.0);
    cases.push(case("avgpool-2x2", p, &[2, 3, 2, 2], &mut g, |t, x| {
        t.apply(Op::AdaptiveAvgPool2d { out_h: 2, out_w: 2 }, &[x])
    }));
    let p = uniform(&mut g, &[2, 3, 4, 3], -1.0, 1.0);
    cases.push(case("avgpool-1x1", p, &[2, 3, 1, 1], &mut g, |t, x| {
        t.apply(Op::AdaptiveAvgPool2d { out_h: 1, out_w: 1 }, &[x])
    }));

    let gamma = uniform(&mut g, &[3], 0.5, 1.5);
    let beta = uniform(&mut g, &[3], -0.5, 0.5);
    let p = uniform(&mut g, &[4, 3, 2, 2], -1.0, 1.0);
    let (g1, b1) = (gamma.clone(), beta.clone());
    cases.push(case("batchnorm-train-input", p, &[4, 3, 2, 2], &mut g, move |t, x| {
        let gv = t.constant(g1.clone());
        let bv = t.constant(b1.clone());
        t.apply(Op::BatchNorm2d { eps: 1e-5, training: true }, &[x, gv, bv])
    }));
    let input = uniform(&mut g, &[4, 3, 2, 2], -1.0, 1.0);
    let p = uniform(&mut g, &[3], 0.5, 1.5);
    let b2 = beta.clone();
    cases.push(case("batchnorm-train-scale", p, &[4, 3, 2, 2], &mut g, move |t, x| {
        let xv = t.constant(input.clone());
        let bv = t.constant(b2.clone());
        t.apply(Op::BatchNorm2d { eps: 1e-5, training: true }, &[xv, x, bv])
    }));
    let input = uniform(&mut g, &[4, 3, 2, 2], -1.0, 1.0);
    let p = uniform(&mut g, &[3], -0.5, 0.5);
    let g3 = gamma.clone();
    cases.push(case("batchnorm-train-shift", p, &[4, 3, 2, 2], &mut g, move |t, x| {
        let xv = t.constant(input.clone());
        let gv = t.constant(g3.clone());
        t.apply(Op::BatchNorm2d { eps: 1e-5, training: true }, &[xv, gv, x])
    }));
    let p = uniform(&mut g, &[5, 3], -1.0, 1.0);
    let (g4, b4) = (gamma.clone(), beta.clone());
    cases.push(case("batchnorm-train-2d", p, &[5, 3], &mut g, move |t, x| {
        let gv = t.constant(g4.clone());
        let bv = t.constant(b4.clone());
        t.apply(Op::BatchNorm2d { eps: 1e-5, training: true }, &[x, gv, bv])
    }));
    let mean = uniform(&mut g, &[3], -0.3, 0.3);
    let var = uniform(&mut g, &[3], 0.5, 2.0);
    let p = uniform(&mut g, &[2, 3, 2, 2], -1.0, 1.0);
    cases.push(case("batchnorm-eval", p, &[2, 3, 2, 2], &mut g, move |t, x| {
        let gv = t.constant(gamma.clone());
        let bv = t.constant(beta.clone());
        let mv = t.constant(mean.clone());
        let vv = t.constant(var.clone());
        t.apply(Op::BatchNorm2d { eps: 1e-5, training: false }, &[x, gv, bv, mv, vv])
    }));

    let p = uniform(&mut g, &[3, 4], -3.0, 3.0);
    cases.push(case("log-softmax-tau", p, &[3, 4], &mut g, |t, x| t.log_softmax(x, 2.5)));

    cases
}

/// Losses (Eqs. 5 to 8) as functions of the student logits.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    let mut g = rng(seed);
    let mut cases = Vec::new();
    let (b, k) = (4, 5);
    let labels: Vec<usize> = (0..b).map(|_| g.random_range(0..k)).collect();
    let t1 = uniform(&mut g, &[b, k], -6.0, 6.0);
    let t2 = uniform(&mut g, &[b, k], -2.0, 2.0);
    let point = uniform(&mut g, &[b, k], -2.0, 2.0);
    let l = labels.clone();
    cases.push(GradCase {
        name: "ce".into(),
        point: point.clone(),
        f: Box::new(move |t, x| ce_loss(t, x, &l)),
    });
    for (tau, scaling) in [(5.0, KdScaling::TauSquared), (2.0, KdScaling::InverseTauSquared)] {
        let (a, bb) = (t1.clone(), t2.clone());
        let w = WeightPair { alpha: 0.3, beta: 0.7 };
        cases.push(GradCase {
            name: format!("kd-{scaling}-tau{tau}"),
            point: point.clone(),
            f: Box::new(move |t, x| kd_loss(t, x, &a, &bb, w, tau, scaling)),
        });
    }
    for w in [
        WeightPair { alpha: 0.5, beta: 0.5 },
        WeightPair { alpha: 0.46, beta: 0.2 },
        WeightPair::ZERO,
    ] {
        let (a, bb, l) = (t1.clone(), t2.clone(), labels.clone());
        cases.push(GradCase {
            name: format!("total-a{}-b{}", w.alpha, w.beta),
            point: point.clone(),
            f: Box::new(move |t, x| {
                let ce = ce_loss(t, x, &l)?;
                let kd = kd_loss(t, x, &a, &bb, w, 5.0, KdScaling::TauSquared)?;
                total_loss(t, ce, kd, w)
            }),
        });
    }
    cases
}

pub fn tiny_resnet(seed: u64) -> Model<f64> {
    let layers = vec![
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::BatchNorm2d { features: 3 },
        LayerSpec::Relu,
        LayerSpec::BasicBlock {
            in_channels: 3,
            out_channels: 3,
            stride: 1,
            shortcut_kernel: 3,
        },
        LayerSpec::BasicBlock {
            in_channels: 3,
            out_channels: 4,
            stride: 2,
            shortcut_kernel: 3,
        },
        LayerSpec::BasicBlock {
            in_channels: 4,
            out_channels: 4,
            stride: 2,
            shortcut_kernel: 1,
        },
        LayerSpec::AdaptiveAvgPool2d { out_h: 1, out_w: 1 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_features: 4,
            out_features: 3,
        },
    ];
    Model::new(layers, seed).unwrap()
}

pub fn mlp(seed: u64) -> Model<f64> {
    skd::nn::build_mlp(&[6, 5, 3], seed).unwrap()
}

/// Cross-entropy of a model (train-mode batch norm) as a function of its input.
pub fn model_input_case(name: &str, model: Model<f64>, point: Tensor<f64>, labels: Vec<usize>) -> GradCase {
    GradCase {
        name: name.into(),
        point,
        f: Box::new(move |t, x| {
            let mut m = model.clone();
            let (logits, _) = m.forward_with(t, x, false)?;
            ce_loss(t, logits, &labels)
        }),
    }
}

/// Largest relative error between tape parameter gradients and central
/// differences over every trainable coordinate.
pub fn param_check(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize]) -> (String, f64) {
    let loss = |m: &Model<f64>| -> f64 {
        let mut m = m.clone();
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let (logits, _) = m.forward_with(&mut t, x, false).unwrap();
        let l = ce_loss(&mut t, logits, labels).unwrap();
        t.value(l).item().unwrap()
    };
    let mut m = model.clone();
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let (logits, binding) = m.forward_with(&mut t, x, true).unwrap();
    let l = ce_loss(&mut t, logits, labels).unwrap();
    let mut grads = t.backward(l).unwrap();
    let grads = binding.gradients(model, &mut grads);

    let mut worst = (String::new(), 0.0f64);
    for (name, g) in &grads {
        for i in 0..g.numel() {
            let mut plus = model.clone();
            plus.param_mut(name).unwrap().value.data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.param_mut(name).unwrap().value.data_mut()[i] -= STEP;
            let n = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let a = g.data()[i];
            let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            if err > worst.1 {
                worst = (format!("{name}[{i}]"), err);
            }
        }
    }
    worst
}

/// Teacher weighting as a lookup over which of the two confidences clear which
/// bars, written independently of the engine.
pub fn weight_oracle(c1: f64, c2: f64, delta: f64, w_min: f64, floor: f64) -> (f64, f64) {
    let both_low = c1 < floor && c2 < floor;
    let first_ok = c1 >= delta;
    let second_ok = c2 >= delta;
    if both_low {
        return (0.0, 0.0);
    }
    match (first_ok, second_ok) {
        (false, false) => {
            let w1 = 0.5 - (delta - c1);
            let w2 = 0.5 - (delta - c2);
            (if w1 > w_min { w1 } else { w_min }, if w2 > w_min { w2 } else { w_min })
        }
        (false, true) => (0.3, 0.7),
        (true, false) => (0.7, 0.3),
        (true, true) => (0.5, 0.5),
    }
}

/// Every gradient case used by the fidelity criterion.
pub fn all_cases(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
    let mut out = Vec::new();
    for s in seeds {
        out.extend(primitive_cases(s));
        out.extend(loss_cases(1000 + s));
        let mut g = rng(2000 + s);
        let x = uniform(&mut g, &[4, 6], -1.0, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| g.random_range(0..3)).collect();
        out.push(model_input_case(&format!("mlp-input-{s}"), mlp(s), x, labels));
        let x = uniform(&mut g, &[3, 2, 6, 6], -1.0, 1.0);
        let labels: Vec<usize> = (0..3).map(|_| g.random_range(0..3)).collect();
        out.push(model_input_case(&format!("resnet-input-{s}"), tiny_resnet(s), x, labels));
    }
    out
}

/// A random confusion matrix with 2 to 12 classes; some classes may be
/// absent or never predicted.
pub fn random_confusion(seed: u64) -> skd::metrics::ConfusionMatrix {
    let mut g = rng(seed);
    let k = g.random_range(2..=12);
    let counts = (0..k * k)
        .map(|_| if g.random_bool(0.3) { 0 } else { g.random_range(0..50) })
        .collect();
    skd::metrics::ConfusionMatrix::from_counts(k, counts).unwrap()
}

fn down(h: usize) -> usize {
    (h - 1) / 2 + 1
}

/// Trainable parameters of the residual student, summed by hand per stage.
pub fn resnet_param_oracle(channels: usize, classes: usize, w: usize, shortcut: usize, blocks: usize) -> u64 {
    let identity = |c: usize| 2 * 9 * c * c + 4 * c;
    let first = |cin: usize, cout: usize| 9 * cin * cout + 9 * cout * cout + 4 * cout + shortcut * shortcut * cin * cout + 2 * cout;
    let total = 9 * channels * w
        + 2 * w
        + blocks * identity(w)
        + first(w, 2 * w)
        + (blocks - 1) * identity(2 * w)
        + first(2 * w, 4 * w)
        + (blocks - 1) * identity(4 * w)
        + 4 * w * classes
        + classes;
    total as u64
}

/// Multiply-accumulates, batch-norm outputs and elementwise outputs of one
/// forward pass on a `channels x h x h` input.
pub fn resnet_cost_oracle(
    channels: usize,
    h: usize,
    classes: usize,
    w: usize,
    shortcut: usize,
    blocks: usize,
) -> (u64, u64, u64) {
    let (a1, a2, a3) = (h * h, down(h) * down(h), down(down(h)) * down(down(h)));
    let mut macs = 9 * channels * w * a1;
    let mut norm = w * a1;
    let mut elem = w * a1;
    for (cin, cout, area) in [(w, w, a1), (w, 2 * w, a2), (2 * w, 4 * w, a3)] {
        for b in 0..blocks {
            let cin = if b == 0 { cin } else { cout };
            macs += 9 * cin * cout * area + 9 * cout * cout * area;
            norm += 2 * cout * area;
            elem += 3 * cout * area;
            if b == 0 && cin != cout {
                macs += shortcut * shortcut * cin * cout * area;
                norm += cout * area;
            }
        }
    }
    elem += 4 * w;
    macs += 4 * w * classes;
    (macs as u64, norm as u64, elem as u64)
}

/// Writes a small dataset plus one model teacher and one cached teacher into
/// `dir`, returning a dual-teacher run configuration over them.
pub fn run_fixture(dir: &std::path::Path) -> skd::run::RunConfig {
    use skd::data::{gen_synthetic, LogitCache, SynthSpec};
    use skd::nn::{save_model, ResNetConfig, ResNetVariant};
    use skd::run::{RunConfig, TeacherSpec};

    let spec = SynthSpec {
        per_class: 8,
        ..SynthSpec::default()
    };
    let data = gen_synthetic(&spec, 4).unwrap();
    data.write(dir.join("data.skdt")).unwrap();
    let teacher = |seed: u64, gain: f32| {
        let mut m: Model<f32> = ResNetConfig {
            base_width: 4,
            ..ResNetConfig::new(ResNetVariant::ResNet8, 3, 10)
        }
        .build(seed)
        .unwrap();
        let last = m.layers().len() - 1;
        let w = m.param_mut(&format!("{last}.weight")).unwrap();
        w.value.data_mut().iter_mut().for_each(|v| *v *= gain);
        m
    };
    save_model(&teacher(11, 30.0), dir.join("t1.skdm")).unwrap();
    LogitCache::from_model(&teacher(12, 60.0), &data, 32)
        .unwrap()
        .write(dir.join("t2.skdl"))
        .unwrap();
    RunConfig {
        dataset: dir.join("data.skdt"),
        out_dir: dir.join("run"),
        teacher1: TeacherSpec::Path(dir.join("t1.skdm")),
        teacher2: TeacherSpec::Path(dir.join("t2.skdl")),
        student_width: 2,
        epochs: 3,
        batch_size: 16,
        lr: 0.01,
        seed: 5,
        scheduler_patience: 1,
        ..RunConfig::default()
    }
}

/// Contents of every file of a run directory except the config, which
/// names the directory itself.
pub fn run_outputs(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
