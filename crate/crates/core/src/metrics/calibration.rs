//! Binned calibration error, single- and multi-rater.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EceMode, EvalConfig};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ForegroundProbMap, RaterStack};

/// Equal-width confidence bins over `[0, 1]`. Bins are right-open except
/// the last, which also holds `p = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    num_bins: usize,
    counts: Vec<u64>,
    conf_sum: Vec<f64>,
    label_sum: Vec<f64>,
}

impl CalibrationBins {
    pub fn new(num_bins: usize) -> Self {
        assert!(num_bins >= 1, "need at least one bin");
        Self {
            num_bins,
            counts: vec![0; num_bins],
            conf_sum: vec![0.0; num_bins],
            label_sum: vec![0.0; num_bins],
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn bin_index(&self, p: f64) -> usize {
        ((p * self.num_bins as f64).floor() as usize).min(self.num_bins - 1)
    }

    pub fn edges(&self, m: usize) -> (f64, f64) {
        let m_f = self.num_bins as f64;
        (m as f64 / m_f, (m + 1) as f64 / m_f)
    }

    /// Adds `count` items sharing confidence `p`, of which `positives` carry label 1.
    pub fn add(&mut self, p: f64, count: u64, positives: u64) {
        debug_assert!(positives <= count);
        let m = self.bin_index(p);
        self.counts[m] += count;
        self.conf_sum[m] += p * count as f64;
        self.label_sum[m] += positives as f64;
    }

    pub fn merge(&mut self, other: &CalibrationBins) {
        assert_eq!(self.num_bins, other.num_bins, "bin count mismatch");
        for m in 0..self.num_bins {
            self.counts[m] += other.counts[m];
            self.conf_sum[m] += other.conf_sum[m];
            self.label_sum[m] += other.label_sum[m];
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, m: usize) -> u64 {
        self.counts[m]
    }

    /// Mean confidence in bin `m`, `None` when empty.
    pub fn conf(&self, m: usize) -> Option<f64> {
        (self.counts[m] > 0).then(|| self.conf_sum[m] / self.counts[m] as f64)
    }

    /// Mean label in bin `m`, `None` when empty.
    pub fn acc(&self, m: usize) -> Option<f64> {
        (self.counts[m] > 0).then(|| self.label_sum[m] / self.counts[m] as f64)
    }

    /// Count-weighted mean absolute gap between confidence and label rate.
    pub fn ece(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.num_bins)
            .filter(|&m| self.counts[m] > 0)
            .map(|m| {
                let gap = (self.conf(m).unwrap() - self.acc(m).unwrap()).abs();
                self.counts[m] as f64 / total as f64 * gap
            })
            .sum()
    }
}

/// Bins for one image: each voxel contributes `K` (prediction, rater label) pairs.
fn sample_bins(pred: &ForegroundProbMap, stack: &RaterStack, cfg: &EvalConfig) -> CalibrationBins {
    let mut bins = CalibrationBins::new(cfg.num_bins);
    let k = stack.num_raters() as u64;
    for (v, &p) in pred.as_slice().iter().enumerate() {
        let votes = stack.votes_at(v) as u64;
        let positives = match cfg.ece_mode {
            EceMode::Frequency => votes,
            EceMode::PaperLiteral => {
                if p >= cfg.tau {
                    votes
                } else {
                    k - votes
                }
            }
        };
        bins.add(p, k, positives);
    }
    bins
}

pub(crate) fn check_inputs(preds: &[ForegroundProbMap], stacks: &[RaterStack]) -> Result<usize> {
    if preds.len() != stacks.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions for {} rater stacks",
            preds.len(),
            stacks.len()
        )));
    }
    let k = stacks.first().map_or(0, RaterStack::num_raters);
    for (i, (p, s)) in preds.iter().zip(stacks).enumerate() {
        if p.dims() != s.dims() {
            return Err(Error::DimensionMismatch {
                context: format!("evaluation sample {i}"),
                expected: s.dims(),
                actual: p.dims(),
            });
        }
        if s.num_raters() != k {
            return Err(Error::InconsistentRaterCount(k, s.num_raters()));
        }
    }
    Ok(k)
}

/// Accumulates bins over all samples; partial bins are merged in sample order.
pub fn accumulate_bins(preds: &[&ForegroundProbMap], stacks: &[&RaterStack], cfg: &EvalConfig) -> CalibrationBins {
    let partial: Vec<CalibrationBins> = preds
        .par_iter()
        .zip(stacks.par_iter())
        .map(|(p, s)| sample_bins(p, s, cfg))
        .collect();
    let mut bins = CalibrationBins::new(cfg.num_bins);
    for b in &partial {
        bins.merge(b);
    }
    bins
}

/// Multi-rater expected calibration error over voxel-rater pairs.
pub fn mr_ece(preds: &[ForegroundProbMap], stacks: &[RaterStack], cfg: &EvalConfig) -> Result<(f64, CalibrationBins)> {
    cfg.validate()?;
    check_inputs(preds, stacks)?;
    let p: Vec<&ForegroundProbMap> = preds.iter().collect();
    let s: Vec<&RaterStack> = stacks.iter().collect();
    let bins = accumulate_bins(&p, &s, cfg);
    Ok((bins.ece(), bins))
}

/// Expected calibration error against a single reference mask per image.
pub fn ece_single(preds: &[ForegroundProbMap], masks: &[BinaryMask], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    if preds.len() != masks.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions for {} masks",
            preds.len(),
            masks.len()
        )));
    }
    let mut bins = CalibrationBins::new(cfg.num_bins);
    for (i, (pred, mask)) in preds.iter().zip(masks).enumerate() {
        if pred.dims() != mask.dims() {
            return Err(Error::DimensionMismatch {
                context: format!("evaluation sample {i}"),
                expected: mask.dims(),
                actual: pred.dims(),
            });
        }
        for (&p, &y) in pred.as_slice().iter().zip(mask.as_slice()) {
            let label = match cfg.ece_mode {
                EceMode::Frequency => y,
                EceMode::PaperLiteral => ((p >= cfg.tau) as u8 == y) as u8,
            };
            bins.add(p, 1, label as u64);
        }
    }
    Ok(bins.ece())
}

/// CSV text: `bin_lo,bin_hi,count,conf,acc`, one row per bin. Empty bins
/// leave `conf` and `acc` blank.
pub fn reliability_csv_string(bins: &CalibrationBins) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,conf,acc\n");
    for m in 0..bins.num_bins() {
        let (lo, hi) = bins.edges(m);
        let _ = write!(out, "{lo:.9},{hi:.9},{}", bins.count(m));
        match (bins.conf(m), bins.acc(m)) {
            (Some(c), Some(a)) => {
                let _ = writeln!(out, ",{c:.9},{a:.9}");
            }
            _ => out.push_str(",,\n"),
        }
    }
    out
}

pub fn reliability_csv(bins: &CalibrationBins, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, reliability_csv_string(bins))?;
    Ok(())
}
