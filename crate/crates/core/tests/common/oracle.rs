//! A dense `F -> K` student and a scalar re-statement of one distillation
//! step, used as an independent reference for the engine.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use skd::data::Batch;
use skd::distill::{DistillConfig, KdScaling};
use skd::nn::{LayerSpec, Model, Param, ParamKind};
use skd::tensor::Tensor;

use super::weight_oracle;

pub const B: usize = 4;
pub const F: usize = 5;
pub const K: usize = 3;

pub fn dense(weight: Vec<f64>, bias: Vec<f64>) -> Model<f64> {
    Model::from_parts(
        vec![LayerSpec::Dense {
            in_features: F,
            out_features: K,
        }],
        vec![
            Param {
                name: "0.weight".into(),
                value: Tensor::new(vec![F, K], weight).unwrap(),
                kind: ParamKind::Weight,
            },
            Param {
                name: "0.bias".into(),
                value: Tensor::new(vec![K], bias).unwrap(),
                kind: ParamKind::Bias,
            },
        ],
    )
    .unwrap()
}

pub fn trainable(mut m: Model<f64>) -> Model<f64> {
    m.train();
    m
}

pub fn random_dense(g: &mut ChaCha8Rng, scale: f64) -> Model<f64> {
    let w = (0..F * K).map(|_| scale * g.random_range(-1.0..1.0)).collect();
    let b = (0..K).map(|_| scale * g.random_range(-1.0..1.0)).collect();
    dense(w, b)
}

pub fn batch(g: &mut ChaCha8Rng) -> Batch {
    let x: Vec<f32> = (0..B * F).map(|_| g.random_range(-1.0f32..1.0)).collect();
    Batch {
        images: Tensor::new(vec![B, F], x).unwrap(),
        labels: (0..B).map(|_| g.random_range(0..K)).collect(),
        indices: (0..B).collect(),
    }
}

/// Plain-loop logits of a dense layer.
pub fn logits(m: &Model<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let w = m.param("0.weight").unwrap().value.data();
    let b = m.param("0.bias").unwrap().value.data();
    (0..B)
        .map(|i| {
            (0..K)
                .map(|k| b[k] + (0..F).map(|f| x[i * F + f] * w[f * K + k]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct Oracle {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// The whole step written out as scalar arithmetic with closed-form
/// gradients.
pub fn oracle(student: &Model<f64>, t1: &Model<f64>, t2: &Model<f64>, batch: &Batch, cfg: &DistillConfig) -> Oracle {
    let x: Vec<f64> = batch.images.data().iter().map(|&v| v as f64).collect();
    let tau = cfg.temperature;
    let zs = logits(student, &x);
    let z1 = logits(t1, &x);
    let z2 = logits(t2, &x);
    let p1: Vec<Vec<f64>> = z1.iter().map(|z| softmax(z, tau)).collect();
    let p2: Vec<Vec<f64>> = z2.iter().map(|z| softmax(z, tau)).collect();
    let conf = |p: &[Vec<f64>]| p.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / B as f64;
    let (alpha, beta) = weight_oracle(
        conf(&p1),
        conf(&p2),
        cfg.confidence_threshold,
        cfg.min_weight,
        cfg.low_floor,
    );
    let share = (alpha + beta) / 2.0;
    let (kl_scale, grad_scale) = match cfg.kd_scaling {
        KdScaling::TauSquared => (tau * tau, tau),
        KdScaling::InverseTauSquared => (1.0 / (tau * tau), 1.0 / (tau * tau * tau)),
    };

    let mut ce = 0.0;
    let mut kl1 = 0.0;
    let mut kl2 = 0.0;
    let mut dz = vec![vec![0.0; K]; B];
    for i in 0..B {
        let p = softmax(&zs[i], 1.0);
        let ps = softmax(&zs[i], tau);
        let y = batch.labels[i];
        ce -= p[y].ln();
        for k in 0..K {
            kl1 += p1[i][k] * (p1[i][k].ln() - ps[k].ln());
            kl2 += p2[i][k] * (p2[i][k].ln() - ps[k].ln());
            let onehot = if k == y { 1.0 } else { 0.0 };
            let d_ce = (p[k] - onehot) / B as f64;
            let d_kd = grad_scale * (alpha * (ps[k] - p1[i][k]) + beta * (ps[k] - p2[i][k])) / B as f64;
            dz[i][k] = (1.0 - share) * d_ce + share * d_kd;
        }
    }
    ce /= B as f64;
    let kd = kl_scale * (alpha * kl1 + beta * kl2) / B as f64;
    let mut grad_w = vec![0.0; F * K];
    let mut grad_b = vec![0.0; K];
    for i in 0..B {
        for k in 0..K {
            grad_b[k] += dz[i][k];
            for f in 0..F {
                grad_w[f * K + k] += x[i * F + f] * dz[i][k];
            }
        }
    }
    Oracle {
        total: (1.0 - share) * ce + share * kd,
        ce,
        kd,
        alpha,
        beta,
        grad_w,
        grad_b,
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
