//! Ordinal rater consensus.
//!
//! A stack of `K` binary annotations becomes one ordinal label per voxel, the
//! number of raters voting foreground (`0..=K`). A model with `K + 1` softmax
//! outputs is trained against that label with the ranked probability score
//! (RPS) plus a binary cross-entropy term on the majority-vote foreground
//! probability, and at inference the same majority mass is reported as the
//! foreground probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ForegroundProbMap, Grid2D, RaterStack};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Tolerance on per-voxel normalization of an [`OrdinalProbMap`].
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Lowest consensus level counted as a foreground majority: the smallest
/// `k` with `k >= K / 2`. For even `K` the tie level `K / 2` is included.
pub fn majority_level(num_raters: usize) -> usize {
    num_raters.div_ceil(2)
}

/// Per-voxel count of raters voting foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct OrcMap {
    grid: Grid2D<u16>,
    num_raters: usize,
}

impl OrcMap {
    pub fn new(grid: Grid2D<u16>, num_raters: usize) -> Result<Self> {
        if let Some(&level) = grid.as_slice().iter().find(|&&l| l as usize > num_raters) {
            return Err(Error::TargetOutOfRange { level, num_raters });
        }
        Ok(Self { grid, num_raters })
    }

    pub fn grid(&self) -> &Grid2D<u16> {
        &self.grid
    }

    pub fn num_raters(&self) -> usize {
        self.num_raters
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn as_slice(&self) -> &[u16] {
        self.grid.as_slice()
    }

    /// Binary majority label: 1 where the level is at least [`majority_level`].
    pub fn majority_mask(&self) -> BinaryMask {
        let t = majority_level(self.num_raters) as u16;
        BinaryMask::new(self.grid.map(|&l| (l >= t) as u8)).expect("binary by construction")
    }
}

/// Sums the raters' votes at every voxel.
pub fn orc_encode(stack: &RaterStack) -> OrcMap {
    let (h, w) = stack.dims();
    let mut counts = vec![0u16; h * w];
    for mask in stack.raters() {
        for (c, &y) in counts.iter_mut().zip(mask.as_slice()) {
            *c += y as u16;
        }
    }
    OrcMap {
        grid: Grid2D::new(h, w, counts).expect("dims from stack"),
        num_raters: stack.num_raters(),
    }
}

/// Per-voxel categorical distribution over the `K + 1` consensus levels.
///
/// Stored level-major: `data[k * voxels + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalProbMap {
    height: usize,
    width: usize,
    num_raters: usize,
    data: Vec<f64>,
}

impl OrdinalProbMap {
    pub fn new(height: usize, width: usize, num_raters: usize, data: Vec<f64>) -> Result<Self> {
        let voxels = height * width;
        if voxels == 0 || data.len() != voxels * (num_raters + 1) {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} map with {} levels needs {} values, got {}",
                num_raters + 1,
                voxels * (num_raters + 1),
                data.len()
            )));
        }
        if data.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::InvalidShape(
                "ordinal probabilities must be non-negative".into(),
            ));
        }
        for v in 0..voxels {
            let total: f64 = (0..=num_raters).map(|k| data[k * voxels + v]).sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidShape(format!(
                    "voxel {v} probabilities sum to {total}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            num_raters,
            data,
        })
    }

    /// Applies a per-voxel softmax to level-major logits.
    pub fn from_logits(height: usize, width: usize, num_raters: usize, logits: &[f64]) -> Self {
        let voxels = height * width;
        let levels = num_raters + 1;
        assert_eq!(logits.len(), voxels * levels, "logit count");
        let mut data = vec![0.0; logits.len()];
        for v in 0..voxels {
            let max = (0..levels)
                .map(|k| logits[k * voxels + v])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..levels {
                let e = (logits[k * voxels + v] - max).exp();
                data[k * voxels + v] = e;
                total += e;
            }
            for k in 0..levels {
                data[k * voxels + v] /= total;
            }
        }
        Self {
            height,
            width,
            num_raters,
            data,
        }
    }

    pub fn uniform(height: usize, width: usize, num_raters: usize) -> Self {
        let p = 1.0 / (num_raters + 1) as f64;
        Self {
            height,
            width,
            num_raters,
            data: vec![p; height * width * (num_raters + 1)],
        }
    }

    /// Point mass at each voxel's consensus level.
    pub fn one_hot(orc: &OrcMap) -> Self {
        let (height, width) = orc.dims();
        let voxels = height * width;
        let mut data = vec![0.0; voxels * (orc.num_raters + 1)];
        for (v, &level) in orc.as_slice().iter().enumerate() {
            data[level as usize * voxels + v] = 1.0;
        }
        Self {
            height,
            width,
            num_raters: orc.num_raters,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_raters(&self) -> usize {
        self.num_raters
    }

    pub fn num_levels(&self) -> usize {
        self.num_raters + 1
    }

    pub fn num_voxels(&self) -> usize {
        self.height * self.width
    }

    /// All voxels of level `k`.
    pub fn level(&self, k: usize) -> &[f64] {
        let n = self.num_voxels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The distribution at voxel `v`, copied into `out`.
    pub fn voxel_into(&self, v: usize, out: &mut [f64]) {
        let n = self.num_voxels();
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.data[k * n + v];
        }
    }
}

/// Collapses the ordinal distribution to the probability that a majority of
/// raters would mark each voxel foreground.
pub fn aggregate_foreground(probs: &OrdinalProbMap) -> ForegroundProbMap {
    let n = probs.num_voxels();
    let start = majority_level(probs.num_raters);
    let mut out = vec![0.0; n];
    for k in start..probs.num_levels() {
        for (o, &p) in out.iter_mut().zip(probs.level(k)) {
            *o += p;
        }
    }
    let grid = Grid2D::new(probs.height, probs.width, out).expect("dims from map");
    ForegroundProbMap::new(grid).expect("sums of probabilities are finite")
}

/// Cumulative target and predicted distributions at one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeDist {
    pub target: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl CumulativeDist {
    pub fn new(probs: &[f64], level: usize) -> Self {
        let mut acc = 0.0;
        let predicted = probs
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        let target = (0..probs.len()).map(|j| (j >= level) as u8 as f64).collect();
        Self { target, predicted }
    }
}

/// RPS at one voxel: mean squared gap between the cumulative one-hot target
/// and the cumulative prediction.
pub fn rps_voxel(probs: &[f64], level: usize) -> f64 {
    let mut cum = 0.0;
    let mut total = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        cum += p;
        let target = if j >= level { 1.0 } else { 0.0 };
        total += (target - cum) * (target - cum);
    }
    total / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MeanOverVoxels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the RPS term.
    pub alpha: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            reduction: Reduction::MeanOverVoxels,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_pair(probs: &OrdinalProbMap, target: &OrcMap) -> Result<()> {
    if probs.dims() != target.dims() {
        return Err(Error::DimensionMismatch {
            context: "ordinal loss".into(),
            expected: probs.dims(),
            actual: target.dims(),
        });
    }
    if probs.num_raters != target.num_raters {
        return Err(Error::RaterCountMismatch {
            context: "ordinal loss".into(),
            expected: probs.num_raters,
            actual: target.num_raters,
        });
    }
    if let Some(&level) = target
        .as_slice()
        .iter()
        .find(|&&l| l as usize > probs.num_raters)
    {
        return Err(Error::TargetOutOfRange {
            level,
            num_raters: probs.num_raters,
        });
    }
    Ok(())
}

/// Mean RPS over all voxels.
pub fn rps_loss(probs: &OrdinalProbMap, target: &OrcMap) -> Result<f64> {
    check_pair(probs, target)?;
    let mut buf = vec![0.0; probs.num_levels()];
    let mut total = 0.0;
    for (v, &level) in target.as_slice().iter().enumerate() {
        probs.voxel_into(v, &mut buf);
        total += rps_voxel(&buf, level as usize);
    }
    Ok(total / probs.num_voxels() as f64)
}

/// Binary cross-entropy of `p` against `target`, with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`. `target` may be soft.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean BCE between the aggregated foreground probability and the
/// majority-vote label derived from `target`.
pub fn bce_loss(probs: &OrdinalProbMap, target: &OrcMap) -> Result<f64> {
    check_pair(probs, target)?;
    let fg = aggregate_foreground(probs);
    let t = majority_level(target.num_raters) as u16;
    let total: f64 = fg
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &level)| bce(p, (level >= t) as u8 as f64))
        .sum();
    Ok(total / probs.num_voxels() as f64)
}

/// Value and logit gradient of `BCE + alpha * RPS`.
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub total: f64,
    pub bce: f64,
    pub rps: f64,
    /// Gradient of `total` with respect to the pre-softmax logits, level-major
    /// like [`OrdinalProbMap`].
    pub grad_logits: Vec<f64>,
}

pub fn hybrid_loss(probs: &OrdinalProbMap, target: &OrcMap, cfg: &LossConfig) -> Result<HybridLoss> {
    cfg.validate()?;
    check_pair(probs, target)?;
    let n = probs.num_voxels();
    let levels = probs.num_levels();
    let start = majority_level(probs.num_raters);
    let inv_n = 1.0 / n as f64;
    let rps_scale = 2.0 / levels as f64;

    let mut grad_logits = vec![0.0; n * levels];
    let mut p = vec![0.0; levels];
    let mut g = vec![0.0; levels];
    let mut fhat = vec![0.0; levels];
    let mut bce_total = 0.0;
    let mut rps_total = 0.0;

    for (v, &level) in target.as_slice().iter().enumerate() {
        let level = level as usize;
        probs.voxel_into(v, &mut p);

        // BCE through the majority-mass sum.
        let fg: f64 = p[start..].iter().sum();
        let b = if level >= start { 1.0 } else { 0.0 };
        bce_total += bce(fg, b);
        let d_fg = if fg > PROB_EPS && fg < 1.0 - PROB_EPS {
            -b / fg + (1.0 - b) / (1.0 - fg)
        } else {
            0.0
        };
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = if k >= start { d_fg } else { 0.0 };
        }

        // RPS: d/dp_k = 2/(K+1) * sum_{j>=k} (Fhat_j - F_j), accumulated from the top level down.
        rps_total += rps_voxel(&p, level);
        if cfg.alpha != 0.0 {
            let mut cum = 0.0;
            for (j, &pj) in p.iter().enumerate() {
                cum += pj;
                fhat[j] = cum;
            }
            let mut running = 0.0;
            for j in (0..levels).rev() {
                let f = if j >= level { 1.0 } else { 0.0 };
                running += fhat[j] - f;
                g[j] += cfg.alpha * rps_scale * running;
            }
        }

        // Softmax Jacobian: dz_k = p_k * (g_k - <p, g>).
        let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        for k in 0..levels {
            grad_logits[k * n + v] = p[k] * (g[k] - dot) * inv_n;
        }
    }

    let bce_mean = bce_total * inv_n;
    let rps_mean = rps_total * inv_n;
    Ok(HybridLoss {
        total: bce_mean + cfg.alpha * rps_mean,
        bce: bce_mean,
        rps: rps_mean,
        grad_logits,
    })
}
