//! Confusion matrices with accuracy and support-weighted precision/recall.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K x K` counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidArgument(format!(
                "{} counts do not form a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "class id ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    /// Elementwise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument("cannot merge matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `N_k`: samples whose true class is `k`.
    pub fn support(&self, k: usize) -> u64 {
        (0..self.classes).map(|p| self.get(k, p)).sum()
    }

    pub fn predicted(&self, k: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, k)).sum()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn false_positives(&self, k: usize) -> u64 {
        self.predicted(k) - self.get(k, k)
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        self.support(k) - self.get(k, k)
    }

    pub fn transposed(&self) -> Self {
        let k = self.classes;
        let mut t = Self::new(k);
        for i in 0..k {
            for j in 0..k {
                t.counts[j * k + i] = self.get(i, j);
            }
        }
        t
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::InvalidArgument("metrics of an empty confusion matrix".into())),
            n => Ok(n as f64),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok((0..self.classes).map(|k| self.true_positives(k) as f64).sum::<f64>() / n)
    }

    /// `(1/N) sum_k N_k * TP_k / (TP_k + FP_k)`; a class that is never
    /// predicted contributes zero.
    pub fn weighted_precision(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok((0..self.classes)
            .map(|k| self.support(k) as f64 * ratio(self.true_positives(k), self.predicted(k)))
            .sum::<f64>()
            / n)
    }

    /// `(1/N) sum_k N_k * TP_k / (TP_k + FN_k)`.
    pub fn weighted_recall(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok((0..self.classes)
            .map(|k| self.support(k) as f64 * ratio(self.true_positives(k), self.support(k)))
            .sum::<f64>()
            / n)
    }

    /// Unweighted mean of per-class precision over classes that occur.
    pub fn macro_precision(&self) -> Result<f64> {
        self.macro_mean(|k| ratio(self.true_positives(k), self.predicted(k)))
    }

    /// Unweighted mean of per-class recall over classes that occur.
    pub fn macro_recall(&self) -> Result<f64> {
        self.macro_mean(|k| ratio(self.true_positives(k), self.support(k)))
    }

    fn macro_mean(&self, per_class: impl Fn(usize) -> f64) -> Result<f64> {
        self.nonempty()?;
        let present: Vec<usize> = (0..self.classes).filter(|&k| self.support(k) > 0).collect();
        Ok(present.iter().map(|&k| per_class(k)).sum::<f64>() / present.len() as f64)
    }

    /// One line per true class, counts separated by commas.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.get(t, p).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<u64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<u64>()
                            .map_err(|_| Error::InvalidArgument(format!("bad count `{}`", c.trim())))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Self::from_counts(k, rows.into_iter().flatten().collect())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Tallies predictions against labels.
pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// Accuracy, weighted precision and weighted recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Summary {
    pub fn of(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: cm.accuracy()?,
            precision: cm.weighted_precision()?,
            recall: cm.weighted_recall()?,
        })
    }
}
