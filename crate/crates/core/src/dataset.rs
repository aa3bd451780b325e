//! Sequences of site measurements sharing one site set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::interpolation::SiteSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Counts for a sequential train/validation/test assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// Assignment by index order: the first `train` sequences are training data, and so on.
    pub fn assignment(&self) -> Vec<Split> {
        let mut out = Vec::with_capacity(self.total());
        out.extend(std::iter::repeat_n(Split::Train, self.train));
        out.extend(std::iter::repeat_n(Split::Validation, self.validation));
        out.extend(std::iter::repeat_n(Split::Test, self.test));
        out
    }
}

/// Scalar mean and population variance of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub variance: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        variance: 1.0,
    };

    /// Standard deviation, or 1 for degenerate (constant) data.
    pub fn divisor(&self) -> f64 {
        if self.variance > 0.0 {
            self.variance.sqrt()
        } else {
            1.0
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.divisor()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.divisor() + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    sites: SiteSet,
    n_sequences: usize,
    seq_len: usize,
    /// Row-major `[sequence][time][site]`.
    values: Vec<f64>,
    splits: Vec<Split>,
    stats: NormStats,
    normalized: bool,
}

impl SequenceDataset {
    /// Builds a raw (unnormalized) dataset and computes training statistics.
    pub fn new(sites: SiteSet, seq_len: usize, values: Vec<f64>, splits: Vec<Split>) -> Result<Self> {
        let n = sites.len();
        let n_sequences = splits.len();
        ensure!(seq_len >= 1, Validation, "sequence length must be positive");
        ensure!(
            values.len() == n_sequences * seq_len * n,
            Validation,
            "value array has {} entries, expected {} sequences x {} steps x {} sites",
            values.len(),
            n_sequences,
            seq_len,
            n
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Validation,
            "dataset contains non-finite values"
        );
        let mut ds = Self {
            sites,
            n_sequences,
            seq_len,
            values,
            splits,
            stats: NormStats::IDENTITY,
            normalized: false,
        };
        ds.stats = ds.training_stats();
        Ok(ds)
    }

    /// Reassembles a dataset from stored parts without recomputing statistics.
    pub fn from_parts(
        sites: SiteSet,
        seq_len: usize,
        values: Vec<f64>,
        splits: Vec<Split>,
        stats: NormStats,
        normalized: bool,
    ) -> Result<Self> {
        let mut ds = Self::new(sites, seq_len, values, splits)?;
        ds.stats = stats;
        ds.normalized = normalized;
        Ok(ds)
    }

    /// Mean and population variance over every training value.
    pub fn training_stats(&self) -> NormStats {
        let mut count = 0usize;
        let mut sum = 0.0;
        for s in self.indices(Split::Train) {
            sum += self.sequence(s).iter().sum::<f64>();
            count += self.seq_len * self.sites.len();
        }
        if count == 0 {
            return NormStats::IDENTITY;
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for s in self.indices(Split::Train) {
            ss += self.sequence(s).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        NormStats {
            mean,
            variance: ss / count as f64,
        }
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn stats(&self) -> NormStats {
        self.stats
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `seq_len × n` block of one sequence, row-major by time.
    pub fn sequence(&self, s: usize) -> &[f64] {
        let stride = self.seq_len * self.sites.len();
        &self.values[s * stride..(s + 1) * stride]
    }

    pub fn frame(&self, s: usize, t: usize) -> &[f64] {
        let n = self.sites.len();
        let start = (s * self.seq_len + t) * n;
        &self.values[start..start + n]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> SplitCounts {
        let count = |s| self.splits.iter().filter(|x| **x == s).count();
        SplitCounts::new(count(Split::Train), count(Split::Validation), count(Split::Test))
    }

    /// Frames `0..len` of the listed sequences as `n × B` matrices (one column per sequence).
    pub fn batch_frames(&self, indices: &[usize], len: usize) -> Result<Vec<DMatrix<f64>>> {
        ensure!(len <= self.seq_len, Argument, "requested {len} frames from sequences of length {}", self.seq_len);
        ensure!(
            indices.iter().all(|&i| i < self.n_sequences),
            Argument,
            "sequence index out of range"
        );
        let n = self.n_sites();
        Ok((0..len)
            .map(|t| DMatrix::from_fn(n, indices.len(), |i, b| self.frame(indices[b], t)[i]))
            .collect())
    }

    /// Applies `f` to every value and records the resulting normalization state.
    pub(crate) fn map_values(&self, normalized: bool, stats: NormStats, f: impl Fn(f64) -> f64) -> SequenceDataset {
        SequenceDataset {
            sites: self.sites.clone(),
            n_sequences: self.n_sequences,
            seq_len: self.seq_len,
            values: self.values.iter().map(|v| f(*v)).collect(),
            splits: self.splits.clone(),
            stats,
            normalized,
        }
    }

    /// Keeps only the listed sequences, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<SequenceDataset> {
        ensure!(
            indices.iter().all(|&i| i < self.n_sequences),
            Argument,
            "subset index out of range"
        );
        let mut values = Vec::with_capacity(indices.len() * self.seq_len * self.n_sites());
        for &i in indices {
            values.extend_from_slice(self.sequence(i));
        }
        Ok(SequenceDataset {
            sites: self.sites.clone(),
            n_sequences: indices.len(),
            seq_len: self.seq_len,
            values,
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            stats: self.stats,
            normalized: self.normalized,
        })
    }
}
