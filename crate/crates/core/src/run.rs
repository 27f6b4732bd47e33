//! Run configuration and the train / evaluate / profile / gen-synth commands.
//!
//! Run directory layout written by [`cmd_train`]:
//!
//! ```text
//! config.txt      resolved configuration
//! version.txt     engine version
//! epochs.csv      per-epoch lr and losses
//! metrics.csv     per-epoch accuracy / precision / recall on both splits
//! telemetry.csv   per-step confidences, weights, branch and losses
//! checkpoint.skdc full training state after the last finished epoch
//! best.skdm       best-by-eval-accuracy model
//! final.skdm      model after the last epoch
//! confusion.csv   test confusion matrix of the last epoch
//! summary.txt     best and final epoch results
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{gen_synthetic, split, Dataset, DatasetView, LogitCache, SynthSpec, CACHE_MAGIC};
use crate::distill::{DistillConfig, KdScaling, TeacherBundle, TeacherSource};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Summary};
use crate::nn::{load_model, save_model, Model, ResNetConfig, ResNetVariant, MODEL_MAGIC};
use crate::optim::{AdamWConfig, PlateauConfig, PlateauMode};
use crate::profiler::{time_inference, FlopConvention, ProfileReport, RESNET14_REFERENCE, RESNET8_REFERENCE};
use crate::train::{evaluate, EpochRecord, StepRecord, TrainConfig, Trainer};

pub const VERSION: &str = concat!("skd ", env!("CARGO_PKG_VERSION"));

/// Teacher slot contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherSpec {
    None,
    Path(PathBuf),
}

impl TeacherSpec {
    fn parse(s: &str) -> Self {
        if s == "none" || s.is_empty() {
            TeacherSpec::None
        } else {
            TeacherSpec::Path(PathBuf::from(s))
        }
    }
}

impl std::fmt::Display for TeacherSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TeacherSpec::None => f.write_str("none"),
            TeacherSpec::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub teacher1: TeacherSpec,
    pub teacher2: TeacherSpec,
    pub student: ResNetVariant,
    pub student_width: usize,
    pub shortcut_kernel: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tau: f64,
    pub delta: f64,
    pub w_min: f64,
    pub low_floor: f64,
    pub kd_scaling: KdScaling,
    pub seed: u64,
    pub split: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub scheduler_min_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let sched = PlateauConfig::default();
        let kd = DistillConfig::default();
        Self {
            dataset: PathBuf::new(),
            out_dir: PathBuf::from("run"),
            teacher1: TeacherSpec::None,
            teacher2: TeacherSpec::None,
            student: ResNetVariant::ResNet8,
            student_width: 16,
            shortcut_kernel: 3,
            epochs: 50,
            batch_size: 64,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            tau: kd.temperature,
            delta: kd.confidence_threshold,
            w_min: kd.min_weight,
            low_floor: kd.low_floor,
            kd_scaling: kd.kd_scaling,
            seed: 0,
            split: 0.7,
            scheduler_factor: sched.factor,
            scheduler_patience: sched.patience,
            scheduler_min_lr: sched.min_lr,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        field: key.to_string(),
        message: format!("cannot parse `{value}`"),
    })
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "out_dir",
        "teacher1",
        "teacher2",
        "student",
        "student_width",
        "shortcut_kernel",
        "epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "tau",
        "delta",
        "w_min",
        "low_floor",
        "kd_scaling",
        "seed",
        "split",
        "scheduler_factor",
        "scheduler_patience",
        "scheduler_min_lr",
    ];

    /// Sets one field from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "teacher1" => self.teacher1 = TeacherSpec::parse(v),
            "teacher2" => self.teacher2 = TeacherSpec::parse(v),
            "student" => {
                self.student = v.parse().map_err(|e: Error| Error::Config {
                    field: key.into(),
                    message: e.to_string(),
                })?
            }
            "student_width" => self.student_width = parse_field(key, v)?,
            "shortcut_kernel" => self.shortcut_kernel = parse_field(key, v)?,
            "epochs" => self.epochs = parse_field(key, v)?,
            "batch_size" => self.batch_size = parse_field(key, v)?,
            "lr" => self.lr = parse_field(key, v)?,
            "weight_decay" => self.weight_decay = parse_field(key, v)?,
            "beta1" => self.beta1 = parse_field(key, v)?,
            "beta2" => self.beta2 = parse_field(key, v)?,
            "eps" => self.eps = parse_field(key, v)?,
            "tau" => self.tau = parse_field(key, v)?,
            "delta" => self.delta = parse_field(key, v)?,
            "w_min" => self.w_min = parse_field(key, v)?,
            "low_floor" => self.low_floor = parse_field(key, v)?,
            "kd_scaling" => {
                self.kd_scaling = v.parse().map_err(|e: Error| Error::Config {
                    field: key.into(),
                    message: e.to_string(),
                })?
            }
            "seed" => self.seed = parse_field(key, v)?,
            "split" => self.split = parse_field(key, v)?,
            "scheduler_factor" => self.scheduler_factor = parse_field(key, v)?,
            "scheduler_patience" => self.scheduler_patience = parse_field(key, v)?,
            "scheduler_min_lr" => self.scheduler_min_lr = parse_field(key, v)?,
            _ => {
                return Err(Error::Config {
                    field: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "teacher1" => self.teacher1.to_string(),
            "teacher2" => self.teacher2.to_string(),
            "student" => self.student.to_string(),
            "student_width" => self.student_width.to_string(),
            "shortcut_kernel" => self.shortcut_kernel.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "tau" => self.tau.to_string(),
            "delta" => self.delta.to_string(),
            "w_min" => self.w_min.to_string(),
            "low_floor" => self.low_floor.to_string(),
            "kd_scaling" => self.kd_scaling.to_string(),
            "seed" => self.seed.to_string(),
            "split" => self.split.to_string(),
            "scheduler_factor" => self.scheduler_factor.to_string(),
            "scheduler_patience" => self.scheduler_patience.to_string(),
            "scheduler_min_lr" => self.scheduler_min_lr.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                field: format!("line {}", n + 1),
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            scheduler: PlateauConfig {
                factor: self.scheduler_factor,
                patience: self.scheduler_patience,
                min_lr: self.scheduler_min_lr,
                mode: PlateauMode::Min,
            },
            distill: DistillConfig {
                temperature: self.tau,
                confidence_threshold: self.delta,
                min_weight: self.w_min,
                low_floor: self.low_floor,
                kd_scaling: self.kd_scaling,
            },
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.dataset.as_os_str().is_empty() {
            return bad("dataset", "no dataset path given".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad("split", format!("must lie in (0, 1), got {}", self.split));
        }
        if self.student_width == 0 {
            return bad("student_width", "must be at least 1".into());
        }
        if !matches!(self.shortcut_kernel, 1 | 3) {
            return bad("shortcut_kernel", format!("must be 1 or 3, got {}", self.shortcut_kernel));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)".into());
        }
        if !(self.scheduler_min_lr >= 0.0) {
            return bad("scheduler_min_lr", "must be non-negative".into());
        }
        if self.teacher1 == TeacherSpec::None && self.teacher2 != TeacherSpec::None {
            return bad("teacher1", "set teacher1 before teacher2".into());
        }
        self.train_config().distill.validate()
    }
}

/// Loads a teacher from an SKDM model or an SKDL cache, chosen by file magic.
pub fn load_teacher(path: &Path, dataset: &Dataset) -> Result<TeacherSource> {
    let bytes = fs::read(path)?;
    let teacher = if bytes.starts_with(MODEL_MAGIC) {
        TeacherSource::Model(Model::from_bytes(&bytes)?)
    } else if bytes.starts_with(CACHE_MAGIC) {
        let cache = LogitCache::from_bytes(&bytes)?;
        cache.check_against(dataset)?;
        TeacherSource::Cache(cache)
    } else {
        return Err(Error::CorruptFile(format!(
            "{} is neither a model nor a logit cache",
            path.display()
        )));
    };
    if teacher.classes() != Some(dataset.classes()) {
        return Err(Error::CacheMismatch(format!(
            "teacher {} predicts {:?} classes, dataset has {}",
            path.display(),
            teacher.classes(),
            dataset.classes()
        )));
    }
    Ok(teacher)
}

pub fn load_teachers(cfg: &RunConfig, dataset: &Dataset) -> Result<Option<TeacherBundle>> {
    Ok(match (&cfg.teacher1, &cfg.teacher2) {
        (TeacherSpec::None, _) => None,
        (TeacherSpec::Path(a), TeacherSpec::None) => Some(TeacherBundle::single(load_teacher(a, dataset)?)),
        (TeacherSpec::Path(a), TeacherSpec::Path(b)) => Some(TeacherBundle::dual(
            load_teacher(a, dataset)?,
            load_teacher(b, dataset)?,
        )),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoint.skdc` in the output directory if present.
    pub resume: bool,
    /// Stop once this many epochs are done in total (simulates interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub final_eval: Option<Summary>,
    pub out_dir: PathBuf,
}

const METRICS_HEADER: &str = "epoch,split,accuracy,precision,recall";

fn metrics_rows(r: &EpochRecord) -> String {
    let row = |split: &str, s: &Summary| format!("{},{split},{:.9},{:.9},{:.9}\n", r.epoch, s.accuracy, s.precision, s.recall);
    row("train", &r.train) + &row("test", &r.eval)
}

/// Keeps the header and every row whose leading epoch is at most `epochs`.
fn truncate_csv(path: &Path, header: &str, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
        if epoch.is_some_and(|e| e <= epochs) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append(path: &Path, text: &str) -> Result<()> {
    fs::OpenOptions::new().append(true).create(true).open(path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Trains a student per `cfg`, writing the run directory described in the
/// module docs. A non-finite loss aborts the run; the checkpoint of the last
/// finished epoch is kept.
pub fn cmd_train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = Dataset::read(&cfg.dataset)?;
    let (train, test) = split(&dataset, cfg.split, cfg.seed)?;
    let teachers = load_teachers(cfg, &dataset)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint.skdc");
    let (epochs_csv, metrics_csv, telemetry_csv) =
        (dir.join("epochs.csv"), dir.join("metrics.csv"), dir.join("telemetry.csv"));

    let mut trainer = if opts.resume && ckpt.exists() {
        let t = Trainer::load(&ckpt)?;
        if t.config != cfg.train_config() {
            return Err(Error::Config {
                field: "resume".into(),
                message: "checkpoint was written with a different configuration".into(),
            });
        }
        let done = t.epochs_done();
        truncate_csv(&epochs_csv, EpochRecord::CSV_HEADER, done)?;
        truncate_csv(&metrics_csv, METRICS_HEADER, done)?;
        truncate_csv(&telemetry_csv, StepRecord::CSV_HEADER, done)?;
        t
    } else {
        let student: Model<f32> = ResNetConfig {
            variant: cfg.student,
            in_channels: dataset.channels(),
            num_classes: dataset.classes(),
            base_width: cfg.student_width,
            shortcut_kernel: cfg.shortcut_kernel,
        }
        .build(cfg.seed)?;
        fs::write(&epochs_csv, format!("{}\n", EpochRecord::CSV_HEADER))?;
        fs::write(&metrics_csv, format!("{METRICS_HEADER}\n"))?;
        fs::write(&telemetry_csv, format!("{}\n", StepRecord::CSV_HEADER))?;
        Trainer::new(cfg.train_config(), student)?
    };
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    fs::write(dir.join("version.txt"), format!("{VERSION}\n"))?;

    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut last: Option<EpochRecord> = None;
    while trainer.epochs_done() < stop {
        let mut telemetry = String::new();
        let record = trainer.run_epoch(&train, &test, teachers.as_ref(), &mut |s| {
            telemetry.push_str(&s.csv_row());
            telemetry.push('\n');
        })?;
        append(&telemetry_csv, &telemetry)?;
        append(&epochs_csv, &format!("{}\n", record.csv_row()))?;
        append(&metrics_csv, &metrics_rows(&record))?;
        if trainer.best().is_some_and(|(e, _)| e == record.epoch) {
            save_model(trainer.best_model().expect("best model tracked"), dir.join("best.skdm"))?;
        }
        write_atomic(&ckpt, &trainer.to_bytes())?;
        last = Some(record);
    }

    if let Some(r) = &last {
        fs::write(dir.join("confusion.csv"), r.eval_confusion.to_csv())?;
    }
    if trainer.finished() {
        save_model(&trainer.student, dir.join("final.skdm"))?;
    }
    let (best_epoch, best_accuracy) = trainer.best().unwrap_or((0, 0.0));
    let summary = TrainSummary {
        epochs_done: trainer.epochs_done(),
        best_epoch,
        best_accuracy,
        final_eval: last.map(|r| r.eval),
        out_dir: dir.clone(),
    };
    let mut text = format!(
        "epochs_done: {}\nbest_epoch: {best_epoch}\nbest_test_accuracy: {best_accuracy:.9}\n",
        summary.epochs_done
    );
    if let Some(s) = summary.final_eval {
        let _ = write!(
            text,
            "final_test_accuracy: {:.9}\nfinal_test_precision: {:.9}\nfinal_test_recall: {:.9}\n",
            s.accuracy, s.precision, s.recall
        );
    }
    fs::write(dir.join("summary.txt"), text)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    All,
    Train,
    Test,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitChoice::All),
            "train" => Ok(SplitChoice::Train),
            "test" => Ok(SplitChoice::Test),
            _ => Err(Error::InvalidArgument(format!("split must be all, train or test, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub summary: Summary,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn render(&self) -> String {
        format!(
            "loss: {:.9}\naccuracy: {:.9}\nprecision: {:.9}\nrecall: {:.9}\n",
            self.loss, self.summary.accuracy, self.summary.precision, self.summary.recall
        )
    }
}

/// Eval-mode metrics of a saved model on the chosen split. The split is the
/// one [`cmd_train`] uses for the same `fraction` and `seed`.
pub fn cmd_evaluate(
    model_path: &Path,
    dataset_path: &Path,
    which: SplitChoice,
    fraction: f64,
    seed: u64,
) -> Result<EvalReport> {
    let model: Model<f32> = load_model(model_path)?;
    let dataset = Dataset::read(dataset_path)?;
    if let Some((c, true)) = model.input_signature() {
        if c != dataset.channels() {
            return Err(Error::InvalidArgument(format!(
                "model takes {c} channels but the dataset has {}",
                dataset.channels()
            )));
        }
    }
    let view = match which {
        SplitChoice::All => dataset.view(),
        SplitChoice::Train => split(&dataset, fraction, seed)?.0,
        SplitChoice::Test => split(&dataset, fraction, seed)?.1,
    };
    let (loss, confusion) = evaluate(&model, &view, 256)?;
    Ok(EvalReport {
        loss,
        summary: Summary::of(&confusion)?,
        confusion,
    })
}

/// What to profile: a saved model or a freshly built student.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileTarget {
    Saved(PathBuf),
    Built(ResNetConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRequest {
    pub target: ProfileTarget,
    /// Per-sample `[C,H,W]`.
    pub input_shape: Vec<usize>,
    pub convention: FlopConvention,
    /// Dataset for timing; synthetic data of `input_shape` when absent.
    pub dataset: Option<PathBuf>,
    pub timing_samples: usize,
    pub batch_size: usize,
    pub reps: usize,
}

pub fn cmd_profile(req: &ProfileRequest) -> Result<ProfileReport> {
    let (name, model, reference) = match &req.target {
        ProfileTarget::Saved(p) => (p.display().to_string(), load_model::<f32>(p)?, None),
        ProfileTarget::Built(rc) => {
            let reference = (rc.in_channels == 3 && rc.num_classes == 10 && rc.base_width == 16).then(|| match rc.variant {
                ResNetVariant::ResNet8 => RESNET8_REFERENCE,
                ResNetVariant::ResNet16 => RESNET14_REFERENCE,
            });
            (rc.variant.to_string(), rc.build::<f32>(0)?, reference)
        }
    };
    let mut report = ProfileReport::new(&name, &model, &req.input_shape, req.convention)?;
    report.reference = reference;
    if req.reps > 0 {
        let dataset = match &req.dataset {
            Some(p) => Dataset::read(p)?,
            None => {
                let [c, h, w] = req.input_shape[..] else {
                    return Err(Error::InvalidArgument("timing needs a [C,H,W] input shape".into()));
                };
                let classes = model.num_outputs().unwrap_or(2).max(1);
                gen_synthetic(
                    &SynthSpec {
                        classes,
                        per_class: req.timing_samples.div_ceil(classes).max(1),
                        channels: c,
                        height: h,
                        width: w,
                        ..SynthSpec::default()
                    },
                    0,
                )?
            }
        };
        report.timing = Some(time_inference(&model, &dataset, req.batch_size, req.reps)?);
    }
    Ok(report)
}

pub fn cmd_gensynth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Dataset> {
    let d = gen_synthetic(spec, seed)?;
    d.write(out)?;
    Ok(d)
}

/// Indices of a split as used by training, for external tools.
pub fn split_indices(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (a, b): (DatasetView, DatasetView) = split(dataset, fraction, seed)?;
    Ok((a.indices().to_vec(), b.indices().to_vec()))
}
