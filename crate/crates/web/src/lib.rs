//! Browser bindings for the distillation engine: temperature softening,
//! teacher weight maps and confusion-matrix metrics.

use skd::distill::{confidence, dynamic_weights, soften, Branch, DistillConfig};
use skd::metrics::ConfusionMatrix;
use skd::tensor::Tensor;
use wasm_bindgen::prelude::*;

fn branch_code(b: Branch) -> f64 {
    match b {
        Branch::IgnoreBoth => 0.0,
        Branch::BothModerate => 1.0,
        Branch::PrioritizeSecond => 2.0,
        Branch::PrioritizeFirst => 3.0,
        Branch::Equal => 4.0,
    }
}

/// Softened probabilities of `[rows, classes]` logits followed by their
/// batch confidence.
pub fn soften_rows(logits: &[f64], classes: usize, tau: f64) -> Result<Vec<f64>, String> {
    if classes == 0 || logits.is_empty() || logits.len() % classes != 0 {
        return Err(format!("{} logits do not form rows of {classes}", logits.len()));
    }
    let t = Tensor::new(vec![logits.len() / classes, classes], logits.to_vec()).map_err(|e| e.to_string())?;
    let p = soften(&t, tau).map_err(|e| e.to_string())?;
    let c = confidence(&p).map_err(|e| e.to_string())?;
    let mut out = p.into_data();
    out.push(c);
    Ok(out)
}

fn config(delta: f64, w_min: f64, low_floor: f64) -> Result<DistillConfig, String> {
    let cfg = DistillConfig {
        confidence_threshold: delta,
        min_weight: w_min,
        low_floor,
        ..DistillConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// `[alpha, beta, branch]` triples over a `size x size` grid of confidences
/// in `[0, 1]`, row-major with `C_T1` along rows.
pub fn weight_grid(size: usize, delta: f64, w_min: f64, low_floor: f64) -> Result<Vec<f64>, String> {
    if size < 2 {
        return Err("grid needs at least 2 points per side".into());
    }
    let cfg = config(delta, w_min, low_floor)?;
    let step = 1.0 / (size - 1) as f64;
    let mut out = Vec::with_capacity(size * size * 3);
    for i in 0..size {
        for j in 0..size {
            let (w, r) = dynamic_weights(i as f64 * step, j as f64 * step, &cfg);
            out.extend([w.alpha, w.beta, branch_code(r.branch)]);
        }
    }
    Ok(out)
}

/// `[accuracy, weighted precision, weighted recall, macro precision,
/// macro recall]` of a confusion matrix given as CSV rows.
pub fn metrics_from_csv(text: &str) -> Result<Vec<f64>, String> {
    let cm = ConfusionMatrix::from_csv(text).map_err(|e| e.to_string())?;
    let all = [
        cm.accuracy(),
        cm.weighted_precision(),
        cm.weighted_recall(),
        cm.macro_precision(),
        cm.macro_recall(),
    ];
    all.into_iter().map(|r| r.map_err(|e| e.to_string())).collect()
}

#[wasm_bindgen]
pub fn soften_logits(logits: &[f64], classes: usize, tau: f64) -> Result<Vec<f64>, JsError> {
    soften_rows(logits, classes, tau).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn teacher_weights(c_t1: f64, c_t2: f64, delta: f64, w_min: f64, low_floor: f64) -> Result<Vec<f64>, JsError> {
    let cfg = config(delta, w_min, low_floor).map_err(|e| JsError::new(&e))?;
    let (w, r) = dynamic_weights(c_t1, c_t2, &cfg);
    Ok(vec![w.alpha, w.beta, branch_code(r.branch)])
}

#[wasm_bindgen]
pub fn weight_map(size: usize, delta: f64, w_min: f64, low_floor: f64) -> Result<Vec<f64>, JsError> {
    weight_grid(size, delta, w_min, low_floor).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn confusion_metrics(csv: &str) -> Result<Vec<f64>, JsError> {
    metrics_from_csv(csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn branch_name(code: u8) -> String {
    match code {
        0 => Branch::IgnoreBoth,
        1 => Branch::BothModerate,
        2 => Branch::PrioritizeSecond,
        3 => Branch::PrioritizeFirst,
        _ => Branch::Equal,
    }
    .as_str()
    .to_string()
}
