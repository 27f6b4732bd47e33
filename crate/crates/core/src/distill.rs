//! Dual-teacher distillation with confidence-driven dynamic weighting.
//!
//! One training step softens the student and both teacher outputs with a
//! temperature, measures each teacher's confidence as the batch mean of its
//! largest softened probability, picks a weight pair `(alpha, beta)` from
//! those confidences, and blends cross-entropy with the weighted KL terms:
//!
//! ```text
//! KD    = (alpha * KL(P_T1 || P_S) + beta * KL(P_T2 || P_S)) * tau^2
//! total = (1 - (alpha + beta) / 2) * CE + (alpha + beta) / 2 * KD
//! ```

use std::fmt;

use crate::data::{Batch, LogitCache};
use crate::error::{shape_err, Error, Result};
use crate::nn::{GradientMap, Model};
use crate::tensor::{Element, Tape, Tensor, Var};

/// How the temperature enters the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdScaling {
    /// Raw KL per teacher, weighted sum multiplied by `tau^2`.
    #[default]
    TauSquared,
    /// Each KL divided by `tau^2`, weighted sum left unscaled.
    InverseTauSquared,
}

impl std::str::FromStr for KdScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau-squared" => Ok(KdScaling::TauSquared),
            "inverse-tau-squared" => Ok(KdScaling::InverseTauSquared),
            _ => Err(Error::InvalidArgument(format!(
                "kd scaling must be `tau-squared` or `inverse-tau-squared`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for KdScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdScaling::TauSquared => "tau-squared",
            KdScaling::InverseTauSquared => "inverse-tau-squared",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Confidence at or above which a teacher counts as reliable.
    pub confidence_threshold: f64,
    pub min_weight: f64,
    /// Both teachers are ignored when both confidences fall below this.
    pub low_floor: f64,
    pub kd_scaling: KdScaling,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            confidence_threshold: 0.6,
            min_weight: 0.1,
            low_floor: 0.4,
            kd_scaling: KdScaling::TauSquared,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.temperature));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return bad("delta", format!("must lie in (0, 1], got {}", self.confidence_threshold));
        }
        if !(0.0..=0.5).contains(&self.min_weight) {
            return bad("w_min", format!("must lie in [0, 0.5], got {}", self.min_weight));
        }
        if !(self.low_floor >= 0.0 && self.low_floor <= self.confidence_threshold) {
            return bad(
                "low_floor",
                format!("must lie in [0, delta={}], got {}", self.confidence_threshold, self.low_floor),
            );
        }
        Ok(())
    }
}

/// Which rule produced the teacher weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    IgnoreBoth,
    BothModerate,
    PrioritizeSecond,
    PrioritizeFirst,
    Equal,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::IgnoreBoth => "ignore-both",
            Branch::BothModerate => "both-moderate",
            Branch::PrioritizeSecond => "prioritize-t2",
            Branch::PrioritizeFirst => "prioritize-t1",
            Branch::Equal => "equal",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPair {
    pub alpha: f64,
    pub beta: f64,
}

impl WeightPair {
    pub const ZERO: WeightPair = WeightPair { alpha: 0.0, beta: 0.0 };

    /// `(alpha + beta) / 2`, the share of the distillation term in the total.
    pub fn kd_share(&self) -> f64 {
        (self.alpha + self.beta) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceReport {
    pub c_t1: f64,
    pub c_t2: f64,
    pub branch: Branch,
}

/// Row-wise `log softmax(logits / tau)`.
pub fn log_soften<T: Element>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_logits(logits, temperature)?;
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.log_softmax(x, temperature)?;
    Ok(tape.value(y).clone())
}

/// Row-wise `softmax(logits / tau)`.
pub fn soften<T: Element>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    Ok(log_soften(logits, temperature)?.map(T::exp))
}

fn check_logits<T: Element>(logits: &Tensor<T>, temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if logits.ndim() != 2 {
        return Err(shape_err("soften", format!("expected [B,K] logits, got {:?}", logits.shape())));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Mean over the batch of each row's largest probability.
pub fn confidence<T: Element>(probs: &Tensor<T>) -> Result<f64> {
    if probs.ndim() != 2 {
        return Err(shape_err("confidence", format!("expected [B,K], got {:?}", probs.shape())));
    }
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    if b == 0 || k == 0 {
        return Err(Error::InvalidArgument("confidence of an empty batch".into()));
    }
    let mut total = 0.0;
    for i in 0..b {
        let row = probs.row(i);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| !(v.as_f64() >= 0.0)) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability distribution")));
        }
        total += row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / b as f64)
}

/// Picks teacher weights from their confidences, testing the rules in order:
/// both below the floor, both below the threshold, first below, second below,
/// neither below.
pub fn dynamic_weights(c_t1: f64, c_t2: f64, cfg: &DistillConfig) -> (WeightPair, ConfidenceReport) {
    let delta = cfg.confidence_threshold;
    let (alpha, beta, branch) = if c_t1 < cfg.low_floor && c_t2 < cfg.low_floor {
        (0.0, 0.0, Branch::IgnoreBoth)
    } else if c_t1 < delta && c_t2 < delta {
        let ramp = |c: f64| (0.5 - (delta - c)).max(cfg.min_weight);
        (ramp(c_t1), ramp(c_t2), Branch::BothModerate)
    } else if c_t1 < delta {
        (0.3, 0.7, Branch::PrioritizeSecond)
    } else if c_t2 < delta {
        (0.7, 0.3, Branch::PrioritizeFirst)
    } else {
        (0.5, 0.5, Branch::Equal)
    };
    (WeightPair { alpha, beta }, ConfidenceReport { c_t1, c_t2, branch })
}

/// `mean_b sum_j P_T[b,j] * (log P_T[b,j] - log P_S[b,j])`, with the teacher
/// treated as a constant. `student_log_probs` must already be softened.
fn teacher_kl<T: Element>(tape: &mut Tape<T>, student_log_probs: Var, teacher_logits: &Tensor<T>, temperature: f64) -> Result<Var> {
    let log_pt = log_soften(teacher_logits, temperature)?;
    let pt = log_pt.map(T::exp);
    let batch = teacher_logits.shape()[0];
    let log_pt = tape.constant(log_pt);
    let pt = tape.constant(pt);
    let diff = tape.sub(log_pt, student_log_probs)?;
    let terms = tape.mul(pt, diff)?;
    let total = tape.sum(terms, None, false)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// Weighted distillation loss on the tape; gradients flow to the student
/// logits only.
pub fn kd_loss<T: Element>(
    tape: &mut Tape<T>,
    student_logits: Var,
    t1_logits: &Tensor<T>,
    t2_logits: &Tensor<T>,
    weights: WeightPair,
    temperature: f64,
    scaling: KdScaling,
) -> Result<Var> {
    let s_shape = tape.value(student_logits).shape().to_vec();
    for t in [t1_logits, t2_logits] {
        if t.shape() != s_shape.as_slice() {
            return Err(shape_err(
                "kd_loss",
                format!("teacher logits {:?} vs student {:?}", t.shape(), s_shape),
            ));
        }
    }
    let log_ps = tape.log_softmax(student_logits, temperature)?;
    let d1 = teacher_kl(tape, log_ps, t1_logits, temperature)?;
    let d2 = teacher_kl(tape, log_ps, t2_logits, temperature)?;
    let tau2 = temperature * temperature;
    let (inner, outer) = match scaling {
        KdScaling::TauSquared => (1.0, tau2),
        KdScaling::InverseTauSquared => (1.0 / tau2, 1.0),
    };
    let a = tape.scale(d1, weights.alpha * inner)?;
    let b = tape.scale(d2, weights.beta * inner)?;
    let sum = tape.add(a, b)?;
    let kd = tape.scale(sum, outer)?;
    if !tape.value(kd).item()?.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    Ok(kd)
}

/// Mean cross-entropy of `[B,K]` logits against class ids.
pub fn ce_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err(
            "ce_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut one_hot = Tensor::zeros(shape.clone());
    for (i, &l) in labels.iter().enumerate() {
        one_hot.data_mut()[i * k + l] = T::one();
    }
    let log_p = tape.log_softmax(logits, 1.0)?;
    let mask = tape.constant(one_hot);
    let picked = tape.mul(mask, log_p)?;
    let total = tape.sum(picked, None, false)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// `(1 - w) * ce + w * kd` with `w = (alpha + beta) / 2`.
pub fn total_loss<T: Element>(tape: &mut Tape<T>, ce: Var, kd: Var, weights: WeightPair) -> Result<Var> {
    let share = weights.kd_share();
    let a = tape.scale(ce, 1.0 - share)?;
    let b = tape.scale(kd, share)?;
    tape.add(a, b)
}

/// Where a teacher's logits come from.
#[derive(Debug, Clone)]
pub enum TeacherSource<T: Element = f32> {
    /// Run in process, always in eval mode.
    Model(Model<T>),
    /// Precomputed logits looked up by dataset index.
    Cache(LogitCache),
}

impl<T: Element> TeacherSource<T> {
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        match self {
            TeacherSource::Model(m) => m.infer(&batch.images.cast()),
            TeacherSource::Cache(c) => Ok(c.gather(&batch.indices)?.cast()),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            TeacherSource::Model(m) => m.num_outputs(),
            TeacherSource::Cache(c) => Some(c.classes()),
        }
    }
}

/// Two teacher slots. With a single teacher, its logits fill both slots.
#[derive(Debug, Clone)]
pub struct TeacherBundle<T: Element = f32> {
    first: TeacherSource<T>,
    second: Option<TeacherSource<T>>,
}

impl<T: Element> TeacherBundle<T> {
    pub fn dual(first: TeacherSource<T>, second: TeacherSource<T>) -> Self {
        Self {
            first,
            second: Some(second),
        }
    }

    pub fn single(teacher: TeacherSource<T>) -> Self {
        Self {
            first: teacher,
            second: None,
        }
    }

    pub fn is_dual(&self) -> bool {
        self.second.is_some()
    }

    pub fn logits(&self, batch: &Batch) -> Result<(Tensor<T>, Tensor<T>)> {
        let a = self.first.logits(batch)?;
        let b = match &self.second {
            Some(s) => s.logits(batch)?,
            None => a.clone(),
        };
        Ok((a, b))
    }
}

/// Everything one distillation step produced.
#[derive(Debug, Clone)]
pub struct StepOutput<T: Element> {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub weights: WeightPair,
    /// `None` when training without teachers.
    pub report: Option<ConfidenceReport>,
    pub grads: GradientMap<T>,
    pub logits: Tensor<T>,
}

/// Runs one forward/backward pass of the student. Without teachers the loss
/// is plain cross-entropy. Teachers are evaluated as constants.
pub fn distill_step<T: Element>(
    student: &mut Model<T>,
    teachers: Option<&TeacherBundle<T>>,
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<StepOutput<T>> {
    cfg.validate()?;
    let teacher_logits = teachers.map(|t| t.logits(batch)).transpose()?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.cast());
    let (logits, binding) = student.forward(&mut tape, x)?;
    let k = tape.value(logits).shape()[1];
    let ce = ce_loss(&mut tape, logits, &batch.labels)?;

    let (total, kd, weights, report) = match teacher_logits {
        None => (ce, None, WeightPair::ZERO, None),
        Some((t1, t2)) => {
            for t in [&t1, &t2] {
                if t.shape() != [batch.len(), k] {
                    return Err(shape_err(
                        "distill_step",
                        format!("teacher logits {:?} for {} samples of {k} classes", t.shape(), batch.len()),
                    ));
                }
            }
            let c1 = confidence(&soften(&t1, cfg.temperature)?)?;
            let c2 = confidence(&soften(&t2, cfg.temperature)?)?;
            let (weights, report) = dynamic_weights(c1, c2, cfg);
            let kd = kd_loss(&mut tape, logits, &t1, &t2, weights, cfg.temperature, cfg.kd_scaling)?;
            let total = total_loss(&mut tape, ce, kd, weights)?;
            (total, Some(kd), weights, Some(report))
        }
    };

    let total_v = tape.value(total).item()?.as_f64();
    let ce_v = tape.value(ce).item()?.as_f64();
    let kd_v = kd.map(|v| tape.value(v).item()).transpose()?.map_or(0.0, |v| v.as_f64());
    if !total_v.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let logits_value = tape.value(logits).clone();
    let mut grads = tape.backward(total)?;
    let grads = binding.gradients(student, &mut grads);
    Ok(StepOutput {
        total: total_v,
        ce: ce_v,
        kd: kd_v,
        weights,
        report,
        grads,
        logits: logits_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![rows, data.len() / rows], data).unwrap()
    }

    #[test]
    fn soften_uniform_and_two_class() {
        let p = soften(&t(1, &[0.0, 0.0, 0.0]), 3.7).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = soften(&t(1, &[2.0, 0.0]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.73106).abs() < 1e-5);
        assert!((p.data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn soften_errors() {
        assert!(soften(&t(1, &[1.0, 2.0]), 0.0).is_err());
        assert!(soften(&t(1, &[1.0, f64::NAN]), 1.0).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert!((confidence(&t(2, &[0.7, 0.3, 0.6, 0.4])).unwrap() - 0.65).abs() < 1e-15);
        assert_eq!(confidence(&t(2, &[0.0, 1.0, 1.0, 0.0])).unwrap(), 1.0);
        let uniform = Tensor::<f64>::full(vec![4, 10], 0.1);
        assert!((confidence(&uniform).unwrap() - 0.1).abs() < 1e-15);
        assert!(confidence(&Tensor::<f64>::zeros(vec![0, 3])).is_err());
        assert!(confidence(&t(1, &[0.9, 0.9])).is_err());
    }

    #[test]
    fn weight_branches() {
        let cfg = DistillConfig::default();
        let w = |a, b| dynamic_weights(a, b, &cfg);
        assert_eq!(w(0.30, 0.35).0, WeightPair::ZERO);
        assert_eq!(w(0.30, 0.35).1.branch, Branch::IgnoreBoth);
        let (p, r) = w(0.50, 0.55);
        assert_eq!(r.branch, Branch::BothModerate);
        assert!((p.alpha - 0.40).abs() < 1e-12 && (p.beta - 0.45).abs() < 1e-12);
        assert_eq!(w(0.55, 0.90).0, WeightPair { alpha: 0.3, beta: 0.7 });
        assert_eq!(w(0.90, 0.90).0, WeightPair { alpha: 0.5, beta: 0.5 });
        assert_eq!(w(0.39, 0.80).0, WeightPair { alpha: 0.3, beta: 0.7 });
        assert_eq!(w(0.80, 0.39).1.branch, Branch::PrioritizeFirst);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            low_floor: 0.7,
            ..DistillConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "low_floor"));
        assert!(DistillConfig { temperature: -1.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { min_weight: 0.6, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn kd_zero_cases() {
        let logits = t(2, &[0.3, -1.0, 2.0, 0.5, 0.5, -0.2]);
        let mut tape = Tape::new();
        let s = tape.leaf(logits.clone(), true);
        let kd = kd_loss(&mut tape, s, &logits, &logits, WeightPair { alpha: 0.5, beta: 0.5 }, 5.0, KdScaling::TauSquared)
            .unwrap();
        assert!(tape.value(kd).item().unwrap().abs() < 1e-9);

        let other = t(2, &[5.0, -3.0, 0.0, 1.0, 9.0, -4.0]);
        let mut tape = Tape::new();
        let s = tape.leaf(logits, true);
        let kd = kd_loss(&mut tape, s, &other, &other, WeightPair::ZERO, 5.0, KdScaling::TauSquared).unwrap();
        assert_eq!(tape.value(kd).item().unwrap(), 0.0);
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(t(1, &[20.0, 0.0, 0.0]));
        let ce = ce_loss(&mut tape, l, &[0]).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-8);

        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::zeros(vec![3, 10]));
        let ce = ce_loss(&mut tape, l, &[0, 4, 9]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::zeros(vec![1, 3]));
        assert!(ce_loss(&mut tape, l, &[3]).is_err());
    }

    #[test]
    fn total_loss_blend() {
        let run = |w: WeightPair| {
            let mut tape = Tape::<f64>::new();
            let ce = tape.constant(Tensor::scalar(1.7));
            let kd = tape.constant(Tensor::scalar(0.4));
            let tot = total_loss(&mut tape, ce, kd, w).unwrap();
            tape.value(tot).item().unwrap()
        };
        assert_eq!(run(WeightPair::ZERO), 1.7);
        assert!((run(WeightPair { alpha: 0.5, beta: 0.5 }) - (0.5 * 1.7 + 0.5 * 0.4)).abs() < 1e-15);
        assert!((WeightPair { alpha: 0.3, beta: 0.7 }.kd_share() - 0.5).abs() < 1e-15);
    }
}
