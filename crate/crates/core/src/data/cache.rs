//! SKDL teacher-logit caches: `"SKDL"`, `u16` version, `u32` sample count,
//! `u32` class count, `u64` dataset content hash, then `N*K` float32 raw
//! logits ordered by dataset index.

use std::path::Path;

use super::Dataset;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"SKDL";
pub const CACHE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitCache {
    classes: usize,
    dataset_hash: u64,
    logits: Vec<f32>,
}

impl LogitCache {
    pub fn new(classes: usize, dataset_hash: u64, logits: Vec<f32>) -> Result<Self> {
        if classes == 0 || logits.len() % classes != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} logits cannot be split into rows of {classes}",
                logits.len()
            )));
        }
        Ok(Self {
            classes,
            dataset_hash,
            logits,
        })
    }

    /// Runs `model` in eval mode over the whole dataset.
    pub fn from_model(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<Self> {
        let k = model
            .num_outputs()
            .ok_or_else(|| Error::InvalidArgument("teacher has no dense head".into()))?;
        if k != dataset.classes() {
            return Err(Error::CacheMismatch(format!(
                "teacher emits {k} logits but dataset has {} classes",
                dataset.classes()
            )));
        }
        let mut logits = Vec::with_capacity(dataset.len() * k);
        for batch in dataset.view().batches(batch_size, false, 0)? {
            logits.extend_from_slice(model.infer(&batch.images)?.data());
        }
        Self::new(k, dataset.content_hash(), logits)
    }

    pub fn len(&self) -> usize {
        self.logits.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dataset_hash(&self) -> u64 {
        self.dataset_hash
    }

    pub fn row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.len() {
            return Err(Error::CacheMiss(index));
        }
        Ok(&self.logits[index * self.classes..(index + 1) * self.classes])
    }

    /// Logits of the given samples as a `[B,K]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            data.extend_from_slice(self.row(i)?);
        }
        Tensor::new(vec![indices.len(), self.classes], data)
    }

    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        if self.len() != dataset.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} rows, dataset has {} samples",
                self.len(),
                dataset.len()
            )));
        }
        if self.classes != dataset.classes() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} classes, dataset has {}",
                self.classes,
                dataset.classes()
            )));
        }
        let hash = dataset.content_hash();
        if hash != self.dataset_hash {
            return Err(Error::CacheMismatch(format!(
                "content hash {:016x} does not match dataset {hash:016x}",
                self.dataset_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(CACHE_MAGIC, CACHE_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.classes as u32);
        w.u64(self.dataset_hash);
        for &v in &self.logits {
            w.f32(v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CACHE_MAGIC, CACHE_VERSION, "logit cache")?;
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let hash = r.u64()?;
        if k == 0 || n.checked_mul(k).and_then(|v| v.checked_mul(4)) != Some(r.remaining()) {
            return Err(r.corrupt(&format!(
                "expected {n}x{k} logits, found {} payload bytes",
                r.remaining()
            )));
        }
        let logits = r.f32s(n * k)?;
        r.finish()?;
        Self::new(k, hash, logits)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a cache and verifies it belongs to `dataset`.
    pub fn read(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Self> {
        let cache = Self::from_bytes(&std::fs::read(path)?)?;
        cache.check_against(dataset)?;
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthSpec};

    fn data(seed: u64) -> Dataset {
        gen_synthetic(
            &SynthSpec {
                classes: 3,
                per_class: 4,
                channels: 1,
                height: 2,
                width: 2,
                ..SynthSpec::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_and_lookup() {
        let d = data(0);
        let logits: Vec<f32> = (0..36).map(|i| i as f32 * 0.25 - 3.0).collect();
        let c = LogitCache::new(3, d.content_hash(), logits).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.skdl");
        c.write(&p).unwrap();
        let back = LogitCache::read(&p, &d).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.row(2).unwrap(), &[-1.5, -1.25, -1.0]);
        assert!(matches!(back.row(12), Err(Error::CacheMiss(12))));
    }

    #[test]
    fn wrong_hash_is_rejected() {
        let d = data(0);
        let c = LogitCache::new(3, data(1).content_hash(), vec![0.0; 36]).unwrap();
        assert!(matches!(c.check_against(&d), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn truncated_file() {
        let d = data(0);
        let c = LogitCache::new(3, d.content_hash(), vec![0.0; 36]).unwrap();
        let bytes = c.to_bytes();
        assert!(matches!(LogitCache::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::CorruptFile(_))));
    }
}
