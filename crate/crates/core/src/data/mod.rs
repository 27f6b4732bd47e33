//! Datasets, synthetic generation, stratified splitting, batching and
//! teacher-logit caches.
//!
//! SKDT layout (little-endian): `"SKDT"`, `u16` version, then `u32` sample
//! count, channels, height, width and class count, followed by one record
//! per sample: `C*H*W` float32 pixels in row-major order and a `u16` label.

mod cache;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{fnv1a64, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cache::{LogitCache, CACHE_MAGIC, CACHE_VERSION};

pub const DATASET_MAGIC: &[u8; 4] = b"SKDT";
pub const DATASET_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// Labelled images held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || classes == 0 || classes > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!(
                "invalid geometry {channels}x{height}x{width} with {classes} classes"
            )));
        }
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} pixels do not fit {} samples of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Images at the given indices as a `[B,C,H,W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("gathered size matches geometry")
    }

    fn write_payload(&self, w: &mut Writer) {
        for i in 0..self.len() {
            for &p in self.image(i) {
                w.f32(p);
            }
            w.u16(self.labels[i]);
        }
    }

    /// FNV-1a over the raw per-sample payload (everything after the header).
    pub fn content_hash(&self) -> u64 {
        let mut w = Writer::default();
        self.write_payload(&mut w);
        fnv1a64(&w.buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(DATASET_MAGIC, DATASET_VERSION);
        for v in [self.len(), self.channels, self.height, self.width, self.classes] {
            w.u32(v as u32);
        }
        self.write_payload(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION, "dataset file")?;
        let n = r.u32()? as usize;
        let (c, h, w, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let record = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(2))
            .ok_or_else(|| r.corrupt("geometry overflow"))?;
        if n.checked_mul(record) != Some(r.remaining()) {
            return Err(r.corrupt(&format!(
                "expected {n} records of {record} bytes, found {} payload bytes",
                r.remaining()
            )));
        }
        let mut pixels = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            pixels.extend(r.f32s(c * h * w)?);
            labels.push(r.u16()?);
        }
        r.finish()?;
        Dataset::new(c, h, w, k, pixels, labels).map_err(|e| Error::CorruptFile(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.len()).collect(),
        }
    }
}

/// Parameters of the synthetic template-plus-noise generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scale of the per-class template deviations around mid-grey.
    pub class_separation: f64,
    /// Standard deviation of the per-sample Gaussian noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            channels: 3,
            height: 8,
            width: 8,
            class_separation: 0.25,
            noise: 0.25,
        }
    }
}

/// Each class gets a seeded random template `0.5 + separation * z`; every
/// sample is its class template plus `noise * z'`. Samples are interleaved by
/// class, so sample `i` has label `i % classes`.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let SynthSpec {
        classes,
        per_class,
        channels,
        height,
        width,
        class_separation,
        noise,
    } = *spec;
    if classes == 0 || per_class == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("synthetic spec needs positive counts: {spec:?}")));
    }
    if !(class_separation.is_finite() && noise.is_finite() && class_separation >= 0.0 && noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("synthetic spec needs finite scales: {spec:?}")));
    }
    let len = channels * height * width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..len).map(|_| 0.5 + class_separation * normal.sample(&mut rng)).collect())
        .collect();
    let total = classes * per_class;
    let mut pixels = Vec::with_capacity(total * len);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let k = i % classes;
        pixels.extend(templates[k].iter().map(|&t| (t + noise * normal.sample(&mut rng)) as f32));
        labels.push(k as u16);
    }
    Dataset::new(channels, height, width, classes, pixels, labels)
}

/// A subset of a dataset addressed by sample index.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    dataset: &'a Dataset,
    indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn new(dataset: &'a Dataset, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} outside dataset of {}", dataset.len())));
        }
        Ok(Self { dataset, indices })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Yields batches covering every sample exactly once, in dataset order
    /// or in a permutation seeded by `epoch_seed`.
    pub fn batches(&self, batch_size: usize, shuffle: bool, epoch_seed: u64) -> Result<Batches<'a>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.indices.is_empty() {
            return Err(Error::InvalidArgument("cannot batch an empty view".into()));
        }
        let mut order = self.indices.clone();
        if shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        }
        Ok(Batches {
            dataset: self.dataset,
            order,
            batch_size,
            pos: 0,
        })
    }
}

/// Stratified split: each class contributes `floor(fraction * N_k)` samples
/// to training, and the rounding remainder of the global target is handed
/// out one sample per class in seeded class order.
pub fn split<'a>(
    dataset: &'a Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetView<'a>, DatasetView<'a>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for (i, l) in dataset.labels().enumerate() {
        per_class[l].push(i);
    }
    if let Some(k) = per_class.iter().position(|v| v.len() == 1) {
        return Err(Error::InvalidArgument(format!("class {k} has fewer than 2 samples")));
    }
    for members in &mut per_class {
        members.shuffle(&mut rng);
    }
    let mut take: Vec<usize> = per_class
        .iter()
        .map(|m| ((train_fraction * m.len() as f64).floor() as usize).min(m.len().saturating_sub(1)))
        .collect();
    let target = (train_fraction * dataset.len() as f64).round() as usize;
    let mut leftover = target.saturating_sub(take.iter().sum());
    let mut class_order: Vec<usize> = (0..per_class.len()).collect();
    class_order.shuffle(&mut rng);
    for &k in &class_order {
        if leftover == 0 {
            break;
        }
        if take[k] + 1 < per_class[k].len() {
            take[k] += 1;
            leftover -= 1;
        }
    }
    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(dataset.len() - target);
    for (members, &n) in per_class.iter().zip(&take) {
        train.extend_from_slice(&members[..n]);
        test.extend_from_slice(&members[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        DatasetView {
            dataset,
            indices: train,
        },
        DatasetView {
            dataset,
            indices: test,
        },
    ))
}

/// Images, labels and the dataset indices they came from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_indices(dataset: &Dataset, indices: Vec<usize>) -> Self {
        Self {
            images: dataset.gather(&indices),
            labels: indices.iter().map(|&i| dataset.label(i)).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch::from_indices(self.dataset, idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}
