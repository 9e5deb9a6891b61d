//! Image-level bootstrap of MR-ECE and AUC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::auc::{auc_majority, auc_per_rater_mean};
use super::calibration::{accumulate_bins, check_inputs, ece_single};
use super::{CalibrationBins, EvalConfig};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ForegroundProbMap, RaterStack};

/// Point estimate on the full set plus bootstrap mean and population
/// standard deviation. `None` where the metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub point: Option<f64>,
    pub boot_mean: Option<f64>,
    pub boot_std: Option<f64>,
    /// Replicates in which the metric was defined.
    pub boot_defined: usize,
}

impl MetricSummary {
    fn from_replicates(point: Option<f64>, values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, std) = if defined.is_empty() {
            (None, None)
        } else {
            let n = defined.len() as f64;
            let mean = defined.iter().sum::<f64>() / n;
            let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        Self {
            point,
            boot_mean: mean,
            boot_std: std,
            boot_defined: defined.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub auc_reference: String,
    pub std_divisor: String,
    pub resample_unit: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            auc_reference: "majority_vote_ties_to_foreground".into(),
            std_divisor: "population".into(),
            resample_unit: "image".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mr_ece: MetricSummary,
    pub auc: MetricSummary,
    /// Mean of per-rater AUCs.
    pub auc_per_rater: MetricSummary,
    /// Single-rater ECE of the full set against each rater.
    pub ece_single: Vec<f64>,
    pub num_images: usize,
    pub num_raters: usize,
    pub num_bootstrap: usize,
    pub resample_fraction: f64,
    pub resample_size: usize,
    pub bins_csv_path: Option<String>,
    pub config: EvalConfig,
    pub metadata: ReportMetadata,
    /// Full-set bins, for the reliability CSV.
    #[serde(skip)]
    pub bins: Option<CalibrationBins>,
}

/// Images per replicate: `ceil(frac * n)`, at least 1.
pub fn resample_size(n: usize, frac: f64) -> usize {
    // Guard against 0.6 * 5 = 3.0000000000000004.
    (((frac * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

pub fn bootstrap_eval(preds: &[ForegroundProbMap], stacks: &[RaterStack], cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if preds.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let k = check_inputs(preds, stacks)?;
    let n = preds.len();
    let all_p: Vec<&ForegroundProbMap> = preds.iter().collect();
    let all_s: Vec<&RaterStack> = stacks.iter().collect();

    let bins = accumulate_bins(&all_p, &all_s, cfg);
    let point_ece = bins.ece();
    let point_auc = auc_majority(&all_p, &all_s).ok();
    let point_rater_auc = auc_per_rater_mean(&all_p, &all_s);

    let m = resample_size(n, cfg.bootstrap_frac);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws: Vec<Vec<usize>> = (0..cfg.bootstrap_n)
        .map(|_| (0..m).map(|_| rng.random_range(0..n)).collect())
        .collect();

    let mut ece_reps = Vec::with_capacity(draws.len());
    let mut auc_reps = Vec::with_capacity(draws.len());
    let mut rater_auc_reps = Vec::with_capacity(draws.len());
    for idx in &draws {
        let p: Vec<&ForegroundProbMap> = idx.iter().map(|&i| &preds[i]).collect();
        let s: Vec<&RaterStack> = idx.iter().map(|&i| &stacks[i]).collect();
        ece_reps.push(Some(accumulate_bins(&p, &s, cfg).ece()));
        auc_reps.push(auc_majority(&p, &s).ok());
        rater_auc_reps.push(auc_per_rater_mean(&p, &s));
    }

    let ece_single = (0..k)
        .map(|r| {
            let masks: Vec<BinaryMask> = stacks.iter().map(|s| s.rater(r).clone()).collect();
            ece_single(preds, &masks, cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricReport {
        mr_ece: MetricSummary::from_replicates(Some(point_ece), &ece_reps),
        auc: MetricSummary::from_replicates(point_auc, &auc_reps),
        auc_per_rater: MetricSummary::from_replicates(point_rater_auc, &rater_auc_reps),
        ece_single,
        num_images: n,
        num_raters: k,
        num_bootstrap: cfg.bootstrap_n,
        resample_fraction: cfg.bootstrap_frac,
        resample_size: m,
        bins_csv_path: None,
        config: *cfg,
        metadata: ReportMetadata::default(),
        bins: Some(bins),
    })
}
