use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use skd::data::SynthSpec;
use skd::nn::{ResNetConfig, ResNetVariant};
use skd::profiler::{FlopConvention, ProfileReport};
use skd::run::{
    cmd_evaluate, cmd_gensynth, cmd_profile, cmd_train, ProfileRequest, ProfileTarget, RunConfig, SplitChoice,
    TrainOptions,
};

#[derive(Parser)]
#[command(name = "skd", version, about = "Dual-teacher knowledge distillation for small residual students")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a student, optionally distilling from one or two teachers.
    Train(TrainArgs),
    /// Metrics and confusion matrix of a saved model.
    Evaluate(EvalArgs),
    /// Parameters, FLOPs, size and inference time.
    Profile(ProfileArgs),
    /// Write a synthetic template-plus-noise dataset.
    GenSynth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in total.
    #[arg(long)]
    stop_after: Option<usize>,
    #[command(flatten)]
    fields: ConfigFlags,
}

/// One `--<key> VALUE` flag per [`RunConfig`] field.
struct ConfigFlags(Vec<(&'static str, String)>);

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Self(
            RunConfig::KEYS
                .iter()
                .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        RunConfig::KEYS
            .iter()
            .fold(cmd, |c, &k| c.arg(Arg::new(k).long(k).value_name("VALUE")))
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// all, train or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Training fraction used to rebuild the split.
    #[arg(long, default_value_t = 0.7)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the confusion matrix CSV here.
    #[arg(long)]
    confusion_out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Saved model; overrides --variant.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "resnet8")]
    variant: String,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    shortcut_kernel: usize,
    /// Per-sample input as CxHxW.
    #[arg(long, default_value = "3x64x64")]
    input: String,
    /// mac2 or mac1
    #[arg(long, default_value = "mac2")]
    convention: String,
    /// Dataset used for timing; synthetic when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Timed passes after one warmup; 0 skips timing.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Samples in the synthetic timing set.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Print a CSV header and row instead of key/value lines.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 0.25)]
    separation: f64,
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for (k, v) in &args.fields.0 {
        cfg.set(k, v)?;
    }
    let summary = cmd_train(
        &cfg,
        TrainOptions {
            resume: args.resume,
            stop_after: args.stop_after,
        },
    )?;
    println!("epochs_done: {}", summary.epochs_done);
    println!("best_epoch: {}", summary.best_epoch);
    println!("best_test_accuracy: {:.6}", summary.best_accuracy);
    if let Some(s) = summary.final_eval {
        println!("final_test_accuracy: {:.6}", s.accuracy);
    }
    println!("run_dir: {}", summary.out_dir.display());
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let which: SplitChoice = args.split.parse()?;
    let report = cmd_evaluate(&args.model, &args.dataset, which, args.fraction, args.seed)?;
    print!("{}", report.render());
    if let Some(p) = args.confusion_out {
        std::fs::write(&p, report.confusion.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().with_context(|| format!("bad input shape `{s}`")))
        .collect()
}

fn profile(args: ProfileArgs) -> Result<()> {
    let target = match args.model {
        Some(p) => ProfileTarget::Saved(p),
        None => {
            let variant: ResNetVariant = args.variant.parse()?;
            let input = parse_shape(&args.input)?;
            ProfileTarget::Built(ResNetConfig {
                base_width: args.width,
                shortcut_kernel: args.shortcut_kernel,
                ..ResNetConfig::new(variant, input[0], args.classes)
            })
        }
    };
    let convention = match args.convention.as_str() {
        "mac2" => FlopConvention::MAC2,
        "mac1" => FlopConvention::MAC1,
        other => anyhow::bail!("convention must be mac2 or mac1, got `{other}`"),
    };
    let report = cmd_profile(&ProfileRequest {
        target,
        input_shape: parse_shape(&args.input)?,
        convention,
        dataset: args.dataset,
        timing_samples: args.samples,
        batch_size: args.batch_size,
        reps: args.reps,
    })?;
    if args.csv {
        println!("{}", ProfileReport::CSV_HEADER);
        println!("{}", report.csv_row());
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn gen_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: args.classes,
        per_class: args.per_class,
        channels: args.channels,
        height: args.height,
        width: args.width,
        class_separation: args.separation,
        noise: args.noise,
    };
    let d = cmd_gensynth(&spec, args.seed, &args.out)?;
    println!(
        "wrote {} samples ({}x{}x{}, {} classes) to {}",
        d.len(),
        d.channels(),
        d.height(),
        d.width(),
        d.classes(),
        args.out.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<skd::Error>().map(skd::Error::category) {
        Some("config") => 2,
        Some("data") => 3,
        Some("shape") => 4,
        Some("numeric") => 5,
        Some("io") => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Profile(a) => profile(a),
        Cmd::GenSynth(a) => gen_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<skd::Error>().map_or("error", skd::Error::category);
            eprintln!("skd: {category} error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
