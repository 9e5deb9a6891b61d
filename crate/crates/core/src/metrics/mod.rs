//! Calibration and discrimination metrics.

mod auc;
mod bootstrap;
mod calibration;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use auc::{auc, auc_majority, auc_per_rater_mean};
pub use bootstrap::{bootstrap_eval, resample_size, MetricReport, MetricSummary, ReportMetadata};
pub use calibration::{
    accumulate_bins, ece_single, mr_ece, reliability_csv, reliability_csv_string, CalibrationBins,
};

/// What a bin's "accuracy" measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EceMode {
    /// Empirical foreground frequency of the labels in the bin.
    #[default]
    Frequency,
    /// Fraction of labels agreeing with the thresholded prediction.
    PaperLiteral,
}

impl fmt::Display for EceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EceMode::Frequency => "frequency",
            EceMode::PaperLiteral => "paper_literal",
        })
    }
}

impl FromStr for EceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frequency" => Ok(EceMode::Frequency),
            "paper_literal" => Ok(EceMode::PaperLiteral),
            other => Err(format!("unknown ECE mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_bins: usize,
    /// Decision threshold.
    pub tau: f64,
    pub bootstrap_n: usize,
    pub bootstrap_frac: f64,
    pub seed: u64,
    pub ece_mode: EceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_bins: 15,
            tau: 0.5,
            bootstrap_n: 10,
            bootstrap_frac: 0.6,
            seed: 0,
            ece_mode: EceMode::Frequency,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins == 0 {
            return Err(Error::InvalidConfig("num_bins must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if !(self.bootstrap_frac > 0.0 && self.bootstrap_frac <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bootstrap_frac must be in (0, 1], got {}",
                self.bootstrap_frac
            )));
        }
        if self.bootstrap_n == 0 {
            return Err(Error::InvalidConfig("bootstrap_n must be >= 1".into()));
        }
        Ok(())
    }
}
