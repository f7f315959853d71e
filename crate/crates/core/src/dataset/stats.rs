//! Aggregate feature statistics and normalization.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Stats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of a plain sample matrix, one row per observation.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Option<Self> {
        let mut w = Welford::new(dim);
        for r in rows {
            w.push(r);
        }
        (w.count > 0).then(|| w.finish())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub features: BTreeMap<String, Stats>,
}

/// Single-pass mean and variance with running extrema.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Welford {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
        }
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in x.iter().enumerate() {
            let d = v - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (v - self.mean[i]);
            self.min[i] = self.min[i].min(v);
            self.max[i] = self.max[i].max(v);
        }
    }

    pub(crate) fn finish(self) -> Stats {
        let n = self.count as f64;
        let std = self.m2.iter().map(|m| (m / n).max(0.0).sqrt()).collect();
        // Rounding can push the mean a hair outside [min, max] on constant data.
        let mean = self
            .mean
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(m, (lo, hi))| m.clamp(*lo, *hi))
            .collect();
        Stats {
            mean,
            std,
            min: self.min,
            max: self.max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    MeanStd,
    MinMax,
}

impl NormMode {
    pub fn tag(&self) -> u8 {
        match self {
            NormMode::MeanStd => 0,
            NormMode::MinMax => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(NormMode::MeanStd),
            1 => Some(NormMode::MinMax),
            _ => None,
        }
    }
}

impl FromStr for NormMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "meanstd" => Ok(NormMode::MeanStd),
            "minmax" => Ok(NormMode::MinMax),
            other => Err(format!("unknown normalization '{other}' (expected meanstd or minmax)")),
        }
    }
}

pub fn normalize(x: &[f64], stats: &Stats, mode: NormMode) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| match mode {
            NormMode::MeanStd => (v - stats.mean[i]) / stats.std[i].max(NORM_EPS),
            NormMode::MinMax => 2.0 * (v - stats.min[i]) / (stats.max[i] - stats.min[i]).max(NORM_EPS) - 1.0,
        })
        .collect()
}

pub fn denormalize(y: &[f64], stats: &Stats, mode: NormMode) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, v)| match mode {
            NormMode::MeanStd => v * stats.std[i].max(NORM_EPS) + stats.mean[i],
            NormMode::MinMax => (v + 1.0) / 2.0 * (stats.max[i] - stats.min[i]).max(NORM_EPS) + stats.min[i],
        })
        .collect()
}
