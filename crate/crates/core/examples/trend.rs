//! Runs the paired Base / single / dual comparison and prints mean accuracy.
//!
//! Optional environment overrides: SKD_SEP, SKD_NOISE, SKD_STUDENT_WIDTH,
//! SKD_TEACHER_EPOCHS, SKD_TEACHER_LR, SKD_DATA_SEED, SKD_EPOCHS.

use skd::trend::{run_trend, Arm, TrendSpec};

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok()?.parse().ok()
}

fn main() -> skd::Result<()> {
    let mut spec = TrendSpec::default();
    if let Some(v) = env("SKD_SEP") {
        spec.data.class_separation = v;
    }
    if let Some(v) = env("SKD_NOISE") {
        spec.data.noise = v;
    }
    if let Some(v) = env("SKD_STUDENT_WIDTH") {
        spec.student_width = v;
    }
    if let Some(v) = env("SKD_TEACHER_EPOCHS") {
        spec.teacher_epochs = v;
    }
    if let Some(v) = env("SKD_TEACHER_LR") {
        spec.teacher_lr = v;
    }
    if let Some(v) = env("SKD_DATA_SEED") {
        spec.data_seed = v;
        spec.split_seed = v;
    }
    if let Some(v) = env("SKD_EPOCHS") {
        spec.student.epochs = v;
    }
    let report = run_trend(&spec, &mut |line| println!("{line}"))?;
    for arm in Arm::ALL {
        println!("{:<6} mean {:.4}", arm.name(), report.mean(arm));
    }
    println!("total {:.1}s", report.seconds);
    Ok(())
}
