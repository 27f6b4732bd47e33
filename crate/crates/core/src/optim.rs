//! AdamW with decoupled weight decay and a reduce-on-plateau learning-rate
//! schedule.

use std::collections::BTreeMap;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{GradientMap, Model};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.00025,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state: hyper-parameters, step count and per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element = f32> {
    pub hyper: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.hyper.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    /// Updates every parameter that has a gradient. Nothing is modified when
    /// any gradient is non-finite.
    pub fn step(&mut self, model: &mut Model<T>, grads: &GradientMap<T>) -> Result<()> {
        for (name, g) in grads {
            let p = model
                .param(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    detail: format!("`{name}`: parameter {:?} vs gradient {:?}", p.value.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let hyper = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (name, g) in grads {
            let p = model.param_mut(name).expect("checked above");
            let state = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.numel()],
                v: vec![T::zero(); g.numel()],
            });
            adamw_update(p.value.data_mut(), g.data(), &mut state.m, &mut state.v, &hyper, bc1, bc2);
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        let h = self.hyper;
        for v in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
            w.f64(v);
        }
        w.u64(self.step);
        w.u32(self.moments.len() as u32);
        for (name, mo) in &self.moments {
            w.str(name);
            w.u32(mo.m.len() as u32);
            for x in mo.m.iter().chain(&mo.v) {
                w.f64(x.as_f64());
            }
        }
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let hyper = AdamWConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u32()? as usize;
            if len.saturating_mul(16) > r.remaining() {
                return Err(r.corrupt("moment length exceeds file"));
            }
            let mut read = |n| (0..n).map(|_| Ok(T::from_f64_lossy(r.f64()?))).collect::<Result<Vec<T>>>();
            let m = read(len)?;
            let v = read(len)?;
            moments.insert(name, Moments { m, v });
        }
        Ok(Self { hyper, step, moments })
    }
}

/// One AdamW update of a flat parameter buffer given bias corrections
/// `1 - beta1^t` and `1 - beta2^t`.
pub fn adamw_update<T: Element>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    hyper: &AdamWConfig,
    bias_correction1: f64,
    bias_correction2: f64,
) {
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(hyper.beta1), f(hyper.beta2));
    let (one_b1, one_b2) = (f(1.0 - hyper.beta1), f(1.0 - hyper.beta2));
    let (bc1, bc2) = (f(bias_correction1), f(bias_correction2));
    let (lr, eps, wd) = (f(hyper.lr), f(hyper.eps), f(hyper.weight_decay));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let p = params[i];
        params[i] = p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauMode {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub mode: PlateauMode,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
            mode: PlateauMode::Min,
        }
    }
}

/// Reduces the learning rate once the monitored metric has failed to
/// improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    stale_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(config: PlateauConfig, initial_lr: f64) -> Self {
        Self {
            config,
            lr: initial_lr.max(config.min_lr),
            best: None,
            stale_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale_epochs
    }

    /// Feeds one epoch's metric and returns the learning rate to use next.
    pub fn update(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFinite("scheduler metric".into()));
        }
        let improved = match (self.best, self.config.mode) {
            (None, _) => true,
            (Some(b), PlateauMode::Min) => metric < b,
            (Some(b), PlateauMode::Max) => metric > b,
        };
        if improved {
            self.best = Some(metric);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.stale_epochs = 0;
            }
        }
        Ok(self.lr)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.f64(self.config.factor);
        w.u64(self.config.patience as u64);
        w.f64(self.config.min_lr);
        w.u8(matches!(self.config.mode, PlateauMode::Max) as u8);
        w.f64(self.lr);
        w.u8(self.best.is_some() as u8);
        w.f64(self.best.unwrap_or(0.0));
        w.u64(self.stale_epochs as u64);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let config = PlateauConfig {
            factor: r.f64()?,
            patience: r.u64()? as usize,
            min_lr: r.f64()?,
            mode: if r.u8()? == 1 { PlateauMode::Max } else { PlateauMode::Min },
        };
        let lr = r.f64()?;
        let has_best = r.u8()? == 1;
        let best = r.f64()?;
        Ok(Self {
            config,
            lr,
            best: has_best.then_some(best),
            stale_epochs: r.u64()? as usize,
        })
    }
}

/// Convenience: zero-filled gradients for every trainable parameter.
pub fn zero_grads<T: Element>(model: &Model<T>) -> GradientMap<T> {
    model
        .params()
        .iter()
        .filter(|p| p.kind.trainable())
        .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape().to_vec())))
        .collect()
}
