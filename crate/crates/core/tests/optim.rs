mod common;

use common::{mlp, rng, uniform};
use skd::nn::{GradientMap, Model};
use skd::optim::{zero_grads, AdamW, AdamWConfig, PlateauConfig, PlateauMode, ReduceOnPlateau};
use skd::tensor::Tensor;

/// Gradient of `sum (p - target)^2` for every trainable parameter.
fn quadratic_grads(model: &Model<f64>, targets: &GradientMap<f64>) -> GradientMap<f64> {
    targets
        .iter()
        .map(|(name, t)| {
            let p = &model.param(name).unwrap().value;
            let g: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| 2.0 * (a - b)).collect();
            (name.clone(), Tensor::new(p.shape().to_vec(), g).unwrap())
        })
        .collect()
}

#[test]
fn converges_on_a_quadratic() {
    let mut model = mlp(3);
    let mut g = rng(9);
    let targets: GradientMap<f64> = zero_grads(&model)
        .into_iter()
        .map(|(n, t)| (n, uniform(&mut g, t.shape(), -1.0, 1.0)))
        .collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    for _ in 0..2000 {
        let grads = quadratic_grads(&model, &targets);
        opt.step(&mut model, &grads).unwrap();
    }
    for (name, t) in &targets {
        for (a, b) in model.param(name).unwrap().value.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-3, "{name}: {a} vs {b}");
        }
    }
    assert_eq!(opt.steps(), 2000);
}

#[test]
fn matches_scalar_reference() {
    let hyper = AdamWConfig::default();
    let mut model = mlp(4);
    let name = "0.weight".to_string();
    let mut p: Vec<f64> = model.param(&name).unwrap().value.data().to_vec();
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    let mut opt = AdamW::new(hyper);
    let mut g = rng(11);
    for t in 1..=50 {
        let grad = uniform(&mut g, model.param(&name).unwrap().value.shape(), -2.0, 2.0);
        for i in 0..p.len() {
            let gi = grad.data()[i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= 0.00025 * (mh / (vh.sqrt() + 1e-8) + 0.0005 * p[i]);
        }
        let grads: GradientMap<f64> = [(name.clone(), grad)].into_iter().collect();
        opt.step(&mut model, &grads).unwrap();
        for (a, b) in model.param(&name).unwrap().value.data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12, "step {t}: {a} vs {b}");
        }
    }
}

#[test]
fn rejected_step_leaves_model_untouched() {
    let mut model = mlp(5);
    let before = model.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut grads = zero_grads(&model);
    let first = grads.keys().next().unwrap().clone();
    grads.get_mut(&first).unwrap().data_mut()[0] = f64::INFINITY;
    assert!(opt.step(&mut model, &grads).is_err());
    assert_eq!(model, before);
    assert_eq!(opt.steps(), 0);

    let mut bad: GradientMap<f64> = GradientMap::new();
    bad.insert("nope".into(), Tensor::zeros(vec![1]));
    assert!(opt.step(&mut model, &bad).is_err());
    let mut wrong = zero_grads(&model);
    wrong.insert(first, Tensor::zeros(vec![1, 1]));
    assert!(opt.step(&mut model, &wrong).is_err());
    assert_eq!(model, before);
}

#[test]
fn plateau_halves_after_two_stagnant_epochs() {
    let cfg = PlateauConfig {
        factor: 0.5,
        patience: 2,
        ..PlateauConfig::default()
    };
    let mut s = ReduceOnPlateau::new(cfg, 0.1);
    let lrs: Vec<f64> = [1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.7]
        .iter()
        .map(|&m| s.update(m).unwrap())
        .collect();
    assert_eq!(lrs, vec![0.1, 0.1, 0.05, 0.05, 0.025, 0.025, 0.025, 0.0125]);
}

#[test]
fn plateau_respects_mode_and_floor() {
    let cfg = PlateauConfig {
        factor: 0.1,
        patience: 1,
        min_lr: 1e-3,
        mode: PlateauMode::Max,
    };
    let mut s = ReduceOnPlateau::new(cfg, 0.5);
    assert_eq!(s.update(0.5).unwrap(), 0.5);
    assert_eq!(s.update(0.6).unwrap(), 0.5);
    assert!((s.update(0.6).unwrap() - 0.05).abs() < 1e-15);
    assert!((s.update(0.4).unwrap() - 0.005).abs() < 1e-15);
    assert_eq!(s.update(0.4).unwrap(), 1e-3);
    assert_eq!(s.update(0.4).unwrap(), 1e-3);
    assert!(s.update(f64::NAN).is_err());
    assert_eq!(s.best(), Some(0.6));
}
