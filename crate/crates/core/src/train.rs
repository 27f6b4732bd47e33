//! Epoch loop: distillation steps, evaluation, plateau scheduling, best-model
//! tracking and resumable checkpoints.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::data::DatasetView;
use crate::distill::{ce_loss, distill_step, Branch, DistillConfig, TeacherBundle};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Summary};
use crate::nn::Model;
use crate::optim::{AdamW, AdamWConfig, PlateauConfig, ReduceOnPlateau};
use crate::tensor::Tape;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKDC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub scheduler: PlateauConfig,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

/// Per-step telemetry. Confidences are absent without teachers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub c_t1: Option<f64>,
    pub c_t2: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub branch: Option<Branch>,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,c_t1,c_t2,alpha,beta,branch,ce,kd,total";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.9},{:.9},{:.9}",
            self.epoch,
            self.step,
            opt(self.c_t1),
            opt(self.c_t2),
            self.alpha,
            self.beta,
            self.branch.map_or("none", Branch::as_str),
            self.ce,
            self.kd,
            self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train: Summary,
    pub eval_loss: f64,
    pub eval: Summary,
    pub eval_confusion: ConfusionMatrix,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,eval_loss,train_accuracy,eval_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.lr, self.train_loss, self.eval_loss, self.train.accuracy, self.eval.accuracy
        )
    }
}

/// Eval-mode pass returning mean cross-entropy and the confusion matrix.
pub fn evaluate(model: &Model<f32>, view: &DatasetView, batch_size: usize) -> Result<(f64, ConfusionMatrix)> {
    let k = model
        .num_outputs()
        .ok_or_else(|| Error::InvalidArgument("model has no dense head".into()))?;
    let d = view.dataset();
    if k != d.classes() {
        return Err(Error::InvalidArgument(format!(
            "model predicts {k} classes but the dataset has {}",
            d.classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0;
    for batch in view.batches(batch_size, false, 0)? {
        let logits = model.infer(&batch.images)?;
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(logits.clone());
        let ce = ce_loss(&mut tape, l, &batch.labels)?;
        loss_sum += tape.value(ce).item()? as f64 * batch.len() as f64;
        for (p, &t) in logits.argmax_rows()?.into_iter().zip(&batch.labels) {
            cm.record(t, p)?;
        }
    }
    Ok((loss_sum / view.len() as f64, cm))
}

/// Mutable training state, everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub student: Model<f32>,
    optimizer: AdamW<f32>,
    scheduler: ReduceOnPlateau,
    epochs_done: usize,
    best: Option<(usize, f64)>,
    best_model: Option<Model<f32>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, student: Model<f32>) -> Result<Self> {
        config.distill.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(config.optimizer.lr > 0.0 && config.optimizer.lr.is_finite()) {
            return Err(Error::Config {
                field: "lr".into(),
                message: format!("must be positive, got {}", config.optimizer.lr),
            });
        }
        if !(config.optimizer.weight_decay >= 0.0) {
            return Err(Error::Config {
                field: "weight_decay".into(),
                message: format!("must be non-negative, got {}", config.optimizer.weight_decay),
            });
        }
        if !(config.scheduler.factor > 0.0 && config.scheduler.factor < 1.0) {
            return Err(Error::Config {
                field: "scheduler_factor".into(),
                message: format!("must lie in (0, 1), got {}", config.scheduler.factor),
            });
        }
        Ok(Self {
            optimizer: AdamW::new(config.optimizer),
            scheduler: ReduceOnPlateau::new(config.scheduler, config.optimizer.lr),
            config,
            student,
            epochs_done: 0,
            best: None,
            best_model: None,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr()
    }

    /// `(epoch, eval accuracy)` of the best epoch so far; ties keep the
    /// earlier epoch.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn best_model(&self) -> Option<&Model<f32>> {
        self.best_model.as_ref()
    }

    fn shuffle_seed(&self, epoch: usize) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
    }

    /// Trains one epoch, evaluates on `test` and steps the scheduler.
    pub fn run_epoch(
        &mut self,
        train: &DatasetView,
        test: &DatasetView,
        teachers: Option<&TeacherBundle>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<EpochRecord> {
        let epoch = self.epochs_done + 1;
        let lr = self.optimizer.lr();
        let k = train.dataset().classes();
        self.student.train();
        let mut train_cm = ConfusionMatrix::new(k);
        let mut loss_sum = 0.0;
        let batches = train.batches(self.config.batch_size, true, self.shuffle_seed(epoch))?;
        for (step, batch) in batches.enumerate() {
            let out = distill_step(&mut self.student, teachers, &batch, &self.config.distill)?;
            self.optimizer.step(&mut self.student, &out.grads)?;
            loss_sum += out.total * batch.len() as f64;
            for (p, &t) in out.logits.argmax_rows()?.into_iter().zip(&batch.labels) {
                train_cm.record(t, p)?;
            }
            on_step(&StepRecord {
                epoch,
                step: step + 1,
                c_t1: out.report.map(|r| r.c_t1),
                c_t2: out.report.map(|r| r.c_t2),
                alpha: out.weights.alpha,
                beta: out.weights.beta,
                branch: out.report.map(|r| r.branch),
                ce: out.ce,
                kd: out.kd,
                total: out.total,
            });
        }
        self.student.eval();
        let (eval_loss, eval_cm) = evaluate(&self.student, test, self.config.batch_size)?;
        let eval = Summary::of(&eval_cm)?;
        let next_lr = self.scheduler.update(eval_loss)?;
        self.optimizer.set_lr(next_lr);
        if self.best.is_none_or(|(_, acc)| eval.accuracy > acc) {
            self.best = Some((epoch, eval.accuracy));
            self.best_model = Some(self.student.clone());
        }
        self.epochs_done = epoch;
        Ok(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train: Summary::of(&train_cm)?,
            eval_loss,
            eval,
            eval_confusion: eval_cm,
        })
    }

    /// Runs the remaining epochs, returning their records.
    pub fn fit(
        &mut self,
        train: &DatasetView,
        test: &DatasetView,
        teachers: Option<&TeacherBundle>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while !self.finished() {
            records.push(self.run_epoch(train, test, teachers, &mut |_| {})?);
        }
        Ok(records)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        let c = &self.config;
        w.u64(c.epochs as u64);
        w.u64(c.batch_size as u64);
        w.u64(c.seed);
        let d = &c.distill;
        for v in [d.temperature, d.confidence_threshold, d.min_weight, d.low_floor] {
            w.f64(v);
        }
        w.str(&d.kd_scaling.to_string());
        let o = &c.optimizer;
        for v in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
            w.f64(v);
        }
        w.u64(self.epochs_done as u64);
        w.u8(self.best.is_some() as u8);
        let (best_epoch, best_acc) = self.best.unwrap_or((0, 0.0));
        w.u64(best_epoch as u64);
        w.f64(best_acc);
        w.bytes(&self.student.to_bytes());
        w.bytes(&self.best_model.as_ref().map(Model::to_bytes).unwrap_or_default());
        self.optimizer.write(&mut w);
        self.scheduler.write(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let epochs = r.u64()? as usize;
        let batch_size = r.u64()? as usize;
        let seed = r.u64()?;
        let temperature = r.f64()?;
        let confidence_threshold = r.f64()?;
        let min_weight = r.f64()?;
        let low_floor = r.f64()?;
        let kd_scaling = r.str()?.parse()?;
        let initial = AdamWConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let epochs_done = r.u64()? as usize;
        let has_best = r.u8()? == 1;
        let best = (r.u64()? as usize, r.f64()?);
        let student = Model::from_bytes(&r.bytes()?)?;
        let best_bytes = r.bytes()?;
        let best_model = if best_bytes.is_empty() {
            None
        } else {
            Some(Model::from_bytes(&best_bytes)?)
        };
        let optimizer = AdamW::read(&mut r)?;
        let scheduler = ReduceOnPlateau::read(&mut r)?;
        r.finish()?;
        Ok(Self {
            config: TrainConfig {
                epochs,
                batch_size,
                optimizer: initial,
                scheduler: scheduler.config,
                distill: DistillConfig {
                    temperature,
                    confidence_threshold,
                    min_weight,
                    low_floor,
                    kd_scaling,
                },
                seed,
            },
            student,
            optimizer,
            scheduler,
            epochs_done,
            best: has_best.then_some(best),
            best_model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
