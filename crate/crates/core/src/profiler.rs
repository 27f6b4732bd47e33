//! Parameter, FLOP, size and latency accounting for built models.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Element;

/// Reference row used to put a report next to published numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub name: &'static str,
    pub parameters: u64,
    pub flops: u64,
    pub size_mb: f64,
    pub inference_seconds: f64,
}

pub const RESNET8_REFERENCE: Reference = Reference {
    name: "ResNet8",
    parameters: 98_522,
    flops: 60_113_536,
    size_mb: 5.95,
    inference_seconds: 5.84,
};

pub const RESNET14_REFERENCE: Reference = Reference {
    name: "ResNet14",
    parameters: 195_738,
    flops: 117_883_520,
    size_mb: 10.01,
    inference_seconds: 6.7,
};

/// FLOPs charged per multiply-accumulate and per output element of the
/// cheap layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopConvention {
    pub per_mac: u64,
    /// Batch-norm output elements.
    pub per_norm: u64,
    /// ReLU, residual addition and pooling output elements.
    pub per_elementwise: u64,
}

impl FlopConvention {
    pub const MAC2: Self = Self {
        per_mac: 2,
        per_norm: 1,
        per_elementwise: 1,
    };
    pub const MAC1: Self = Self {
        per_mac: 1,
        per_norm: 1,
        per_elementwise: 1,
    };

    pub fn describe(&self) -> String {
        format!(
            "mac={} norm={} elementwise={}",
            self.per_mac, self.per_norm, self.per_elementwise
        )
    }
}

impl Default for FlopConvention {
    fn default() -> Self {
        Self::MAC2
    }
}

/// Trainable tensors plus batch-norm scale/shift; running statistics are
/// excluded.
pub fn count_params<T: Element>(model: &Model<T>) -> u64 {
    count_layer_params(model.layers())
}

pub fn count_layer_params(layers: &[LayerSpec]) -> u64 {
    layers
        .iter()
        .flat_map(|l| l.param_slots())
        .filter(|(_, _, kind)| kind.trainable())
        .map(|(_, shape, _)| shape.iter().product::<usize>() as u64)
        .sum()
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    macs: u64,
    norm: u64,
    elementwise: u64,
}

impl Tally {
    fn total(&self, c: FlopConvention) -> u64 {
        self.macs * c.per_mac + self.norm * c.per_norm + self.elementwise * c.per_elementwise
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

fn conv_out(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if h + 2 * p < k || w + 2 * p < k {
        return Err(shape_err("count_flops", format!("{h}x{w} input smaller than {k}x{k} kernel")));
    }
    Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
}

fn tally(layers: &[LayerSpec], input: &[usize]) -> Result<Tally> {
    let mut shape = match *input {
        [c, h, w] => Shape::Image { c, h, w },
        [f] => Shape::Flat(f),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "input shape must be [C,H,W] or [F], got {input:?}"
            )))
        }
    };
    let mut t = Tally::default();
    let mismatch = |l: &LayerSpec, s: &Shape| shape_err("count_flops", format!("{} cannot take {s:?}", l.kind_name()));
    for layer in layers {
        shape = match (*layer, &shape) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                &Shape::Image { c, h, w },
            ) if c == in_channels => {
                let (oh, ow) = conv_out(h, w, kernel, stride, padding)?;
                t.macs += (in_channels * out_channels * kernel * kernel * oh * ow) as u64;
                Shape::Image {
                    c: out_channels,
                    h: oh,
                    w: ow,
                }
            }
            (LayerSpec::BatchNorm2d { features }, &Shape::Image { c, h, w }) if c == features => {
                t.norm += (c * h * w) as u64;
                shape
            }
            (LayerSpec::Relu, s) => {
                t.elementwise += match *s {
                    Shape::Image { c, h, w } => (c * h * w) as u64,
                    Shape::Flat(f) => f as u64,
                };
                shape
            }
            (
                LayerSpec::BasicBlock {
                    in_channels,
                    out_channels,
                    stride,
                    shortcut_kernel,
                },
                &Shape::Image { c, h, w },
            ) if c == in_channels => {
                let (oh, ow) = conv_out(h, w, 3, stride, 1)?;
                let out = (out_channels * oh * ow) as u64;
                t.macs += (in_channels * out_channels * 9 * oh * ow) as u64;
                t.macs += (out_channels * out_channels * 9 * oh * ow) as u64;
                t.norm += 2 * out;
                if layer.has_projection() {
                    let k = shortcut_kernel;
                    t.macs += (in_channels * out_channels * k * k * oh * ow) as u64;
                    t.norm += out;
                }
                // inner ReLU, residual addition, outer ReLU
                t.elementwise += 3 * out;
                Shape::Image {
                    c: out_channels,
                    h: oh,
                    w: ow,
                }
            }
            (LayerSpec::AdaptiveAvgPool2d { out_h, out_w }, &Shape::Image { c, .. }) => {
                t.elementwise += (c * out_h * out_w) as u64;
                Shape::Image { c, h: out_h, w: out_w }
            }
            (LayerSpec::Flatten, &Shape::Image { c, h, w }) => Shape::Flat(c * h * w),
            (LayerSpec::Flatten, &Shape::Flat(f)) => Shape::Flat(f),
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                &Shape::Flat(f),
            ) if f == in_features => {
                t.macs += (in_features * out_features) as u64;
                Shape::Flat(out_features)
            }
            (l, s) => return Err(mismatch(&l, s)),
        };
    }
    Ok(t)
}

/// FLOPs of one forward pass on a single `input` sample (`[C,H,W]` or `[F]`).
pub fn count_flops(layers: &[LayerSpec], input: &[usize], convention: FlopConvention) -> Result<u64> {
    Ok(tally(layers, input)?.total(convention))
}

/// Multiply-accumulates only.
pub fn count_macs(layers: &[LayerSpec], input: &[usize]) -> Result<u64> {
    Ok(tally(layers, input)?.macs)
}

/// Serialized SKDM length in bytes.
pub fn model_size_bytes<T: Element>(model: &Model<T>) -> u64 {
    model.to_bytes().len() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
    pub reps: usize,
    pub batch_size: usize,
}

/// Wall-clock seconds per full eval pass over `dataset`, after one warmup
/// pass that is not recorded.
pub fn time_inference(model: &Model<f32>, dataset: &Dataset, batch_size: usize, reps: usize) -> Result<Timing> {
    if reps < 3 {
        return Err(Error::InvalidArgument(format!("timing needs at least 3 repetitions, got {reps}")));
    }
    let pass = || -> Result<f64> {
        let start = Instant::now();
        for batch in dataset.view().batches(batch_size, false, 0)? {
            std::hint::black_box(model.infer(&batch.images)?);
        }
        Ok(start.elapsed().as_secs_f64())
    };
    pass()?;
    let samples = (0..reps).map(|_| pass()).collect::<Result<Vec<f64>>>()?;
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(Timing {
        mean,
        std: var.sqrt(),
        reps,
        batch_size,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub model: String,
    pub input_shape: Vec<usize>,
    pub total_parameters: u64,
    pub convention: FlopConvention,
    pub flops: u64,
    pub macs: u64,
    pub size_bytes: u64,
    pub timing: Option<Timing>,
    pub reference: Option<Reference>,
}

impl ProfileReport {
    pub fn new<T: Element>(
        name: &str,
        model: &Model<T>,
        input_shape: &[usize],
        convention: FlopConvention,
    ) -> Result<Self> {
        Ok(Self {
            model: name.to_string(),
            input_shape: input_shape.to_vec(),
            total_parameters: count_params(model),
            convention,
            flops: count_flops(model.layers(), input_shape, convention)?,
            macs: count_macs(model.layers(), input_shape)?,
            size_bytes: model_size_bytes(model),
            timing: None,
            reference: None,
        })
    }

    fn shape_string(&self) -> String {
        self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }

    /// `key: value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("model", self.model.clone());
        kv("input_shape", self.shape_string());
        kv("total_parameters", self.total_parameters.to_string());
        kv("flop_convention", self.convention.describe());
        kv("flops", self.flops.to_string());
        kv("macs", self.macs.to_string());
        kv("size_bytes", self.size_bytes.to_string());
        kv("size_mb", format!("{:.4}", self.size_bytes as f64 / 1e6));
        if let Some(t) = self.timing {
            kv("inference_seconds_mean", format!("{:.6}", t.mean));
            kv("inference_seconds_std", format!("{:.6}", t.std));
            kv("inference_reps", t.reps.to_string());
            kv("inference_batch_size", t.batch_size.to_string());
        }
        if let Some(r) = self.reference {
            kv("reference", r.name.to_string());
            kv("reference_parameters", r.parameters.to_string());
            kv("parameters_delta", (self.total_parameters as i64 - r.parameters as i64).to_string());
            kv("parameters_ratio", format!("{:.4}", self.total_parameters as f64 / r.parameters as f64));
            kv("reference_flops", r.flops.to_string());
            kv("flops_delta", (self.flops as i64 - r.flops as i64).to_string());
            kv("flops_ratio", format!("{:.4}", self.flops as f64 / r.flops as f64));
            kv("reference_size_mb", r.size_mb.to_string());
            kv("reference_inference_seconds", r.inference_seconds.to_string());
        }
        s
    }

    pub const CSV_HEADER: &'static str =
        "model,input_shape,parameters,flops,macs,flop_convention,size_bytes,inference_mean_s,inference_std_s";

    pub fn csv_row(&self) -> String {
        let (mean, std) = self
            .timing
            .map(|t| (format!("{:.6}", t.mean), format!("{:.6}", t.std)))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{mean},{std}",
            self.model,
            self.shape_string(),
            self.total_parameters,
            self.flops,
            self.macs,
            self.convention.describe(),
            self.size_bytes
        )
    }
}
