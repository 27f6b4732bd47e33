//! Paired Base / single-teacher / dual-teacher runs on synthetic data.

use std::time::Instant;

use crate::data::{gen_synthetic, split, Dataset, LogitCache, SynthSpec};
use crate::distill::{confidence, soften, TeacherBundle, TeacherSource};
use crate::error::Result;
use crate::nn::{Model, ResNetConfig, ResNetVariant};
use crate::optim::AdamWConfig;
use crate::train::{evaluate, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendSpec {
    pub data: SynthSpec,
    pub data_seed: u64,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub teacher_width: usize,
    pub teacher_seeds: [u64; 2],
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub student_width: usize,
    pub student_seeds: [u64; 5],
    /// Student hyper-parameters; `epochs` and `seed` are set per run.
    pub student: TrainConfig,
}

impl Default for TrendSpec {
    fn default() -> Self {
        Self {
            data: SynthSpec {
                noise: 0.6,
                ..SynthSpec::default()
            },
            data_seed: 7,
            split_seed: 7,
            train_fraction: 0.7,
            teacher_width: 16,
            teacher_seeds: [101, 202],
            teacher_epochs: 20,
            teacher_lr: 0.005,
            student_width: 8,
            student_seeds: [1, 2, 3, 4, 5],
            student: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Base,
    Single,
    Dual,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Base, Arm::Single, Arm::Dual];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Single => "single",
            Arm::Dual => "dual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub teacher_accuracy: [f64; 2],
    /// Final-epoch test accuracy per arm and student seed.
    pub accuracy: Vec<(Arm, u64, f64)>,
    pub seconds: f64,
}

impl TrendReport {
    pub fn mean(&self, arm: Arm) -> f64 {
        let v: Vec<f64> = self.accuracy.iter().filter(|r| r.0 == arm).map(|r| r.2).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn resnet8(in_channels: usize, classes: usize, width: usize, seed: u64) -> Result<Model<f32>> {
    ResNetConfig {
        base_width: width,
        ..ResNetConfig::new(ResNetVariant::ResNet8, in_channels, classes)
    }
    .build(seed)
}

/// Trains the two teachers, caches their logits over the whole dataset and
/// returns them with their test accuracies.
pub fn train_teachers(spec: &TrendSpec, dataset: &Dataset) -> Result<Vec<(LogitCache, f64)>> {
    let (train, test) = split(dataset, spec.train_fraction, spec.split_seed)?;
    spec.teacher_seeds
        .iter()
        .map(|&seed| {
            let model = resnet8(dataset.channels(), dataset.classes(), spec.teacher_width, seed)?;
            let cfg = TrainConfig {
                epochs: spec.teacher_epochs,
                optimizer: AdamWConfig {
                    lr: spec.teacher_lr,
                    ..spec.student.optimizer
                },
                seed,
                ..spec.student
            };
            let mut trainer = Trainer::new(cfg, model)?;
            trainer.fit(&train, &test, None)?;
            let (_, cm) = evaluate(&trainer.student, &test, 256)?;
            let cache = LogitCache::from_model(&trainer.student, dataset, 256)?;
            Ok((cache, cm.accuracy()?))
        })
        .collect()
}

pub fn run_trend(spec: &TrendSpec, log: &mut dyn FnMut(&str)) -> Result<TrendReport> {
    let start = Instant::now();
    let dataset = gen_synthetic(&spec.data, spec.data_seed)?;
    let (train, test) = split(&dataset, spec.train_fraction, spec.split_seed)?;
    let teachers = train_teachers(spec, &dataset)?;
    let tau = spec.student.distill.temperature;
    let conf = |c: &LogitCache| -> Result<f64> {
        confidence(&soften(&c.gather(train.indices())?, tau)?)
    };
    log(&format!(
        "teachers: accuracy {:.4} {:.4}, train confidence at tau {tau}: {:.4} {:.4} ({:.1}s)",
        teachers[0].1,
        teachers[1].1,
        conf(&teachers[0].0)?,
        conf(&teachers[1].0)?,
        start.elapsed().as_secs_f64()
    ));
    let single = TeacherBundle::single(TeacherSource::Cache(teachers[0].0.clone()));
    let dual = TeacherBundle::dual(
        TeacherSource::Cache(teachers[0].0.clone()),
        TeacherSource::Cache(teachers[1].0.clone()),
    );
    let mut accuracy = Vec::new();
    for &seed in &spec.student_seeds {
        for arm in Arm::ALL {
            let bundle = match arm {
                Arm::Base => None,
                Arm::Single => Some(&single),
                Arm::Dual => Some(&dual),
            };
            let student = resnet8(dataset.channels(), dataset.classes(), spec.student_width, seed)?;
            let cfg = TrainConfig { seed, ..spec.student };
            let mut trainer = Trainer::new(cfg, student)?;
            let records = trainer.fit(&train, &test, bundle)?;
            let acc = records.last().map_or(0.0, |r| r.eval.accuracy);
            log(&format!(
                "seed {seed} {:<6} acc {acc:.4} ({:.1}s)",
                arm.name(),
                start.elapsed().as_secs_f64()
            ));
            accuracy.push((arm, seed, acc));
        }
    }
    Ok(TrendReport {
        teacher_accuracy: [teachers[0].1, teachers[1].1],
        accuracy,
        seconds: start.elapsed().as_secs_f64(),
    })
}
