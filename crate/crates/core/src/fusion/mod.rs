//! Multi-annotation handling strategies. Each maps a [`RaterStack`] to a
//! single supervision target, either a hard mask or a soft label map.

mod simple;
mod smoothing;
mod staple;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid2D, RaterStack};
use crate::ordinal::orc_encode;

pub use simple::{fuse_simple, simple, SimpleResult};
pub use smoothing::{fuse_soft_gaussian, fuse_svls, gaussian_kernel_1d, reflect_index};
pub use staple::{fuse_staple, staple, StapleResult};

/// Soft supervision target with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap(Grid2D<f64>);

impl SoftLabelMap {
    /// Clamps into `[0, 1]`.
    pub fn new(grid: Grid2D<f64>) -> Self {
        Self(grid.map(|&v| v.clamp(0.0, 1.0)))
    }

    pub fn grid(&self) -> &Grid2D<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Estimated per-rater sensitivity and specificity, both in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterPerformance {
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    /// Random sampling: one rater per draw.
    Rs,
    /// Median consensus.
    Mc,
    /// Soft consensus.
    Sc,
    /// Soft consensus with Gaussian smoothing.
    Scg,
    Staple,
    Simple,
    /// Spatially varying label smoothing.
    Svls,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 7] = [
        FusionMethod::Rs,
        FusionMethod::Mc,
        FusionMethod::Sc,
        FusionMethod::Scg,
        FusionMethod::Staple,
        FusionMethod::Simple,
        FusionMethod::Svls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Rs => "rs",
            FusionMethod::Mc => "mc",
            FusionMethod::Sc => "sc",
            FusionMethod::Scg => "scg",
            FusionMethod::Staple => "staple",
            FusionMethod::Simple => "simple",
            FusionMethod::Svls => "svls",
        }
    }

    /// Whether the method yields a hard mask.
    pub fn is_hard(self) -> bool {
        matches!(self, FusionMethod::Rs | FusionMethod::Mc | FusionMethod::Simple)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown fusion method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Gaussian width for SC-G and SVLS.
    pub sigma: f64,
    pub staple_max_iters: usize,
    pub staple_tol: f64,
    pub simple_max_iters: usize,
    pub simple_min_raters: usize,
    pub rng_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::Mc,
            sigma: 1.0,
            staple_max_iters: 100,
            staple_tol: 1e-6,
            simple_max_iters: 10,
            simple_min_raters: 2,
            rng_seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn with_method(method: FusionMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.staple_max_iters == 0 || self.simple_max_iters == 0 {
            return Err(Error::InvalidConfig("iteration limits must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusedTarget {
    Hard(BinaryMask),
    Soft(SoftLabelMap),
}

impl FusedTarget {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            FusedTarget::Hard(m) => m.dims(),
            FusedTarget::Soft(s) => s.dims(),
        }
    }

    /// Target values as reals in `[0, 1]`.
    pub fn values(&self) -> Vec<f64> {
        match self {
            FusedTarget::Hard(m) => m.as_slice().iter().map(|&v| v as f64).collect(),
            FusedTarget::Soft(s) => s.as_slice().to_vec(),
        }
    }
}

/// A fused target plus whatever the method estimated along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub target: FusedTarget,
    pub rater_performance: Option<RaterPerformance>,
    /// Raters retained by SIMPLE.
    pub included_raters: Option<Vec<usize>>,
    /// Rater drawn by random sampling.
    pub sampled_rater: Option<usize>,
}

impl Fused {
    fn plain(target: FusedTarget) -> Self {
        Self {
            target,
            rater_performance: None,
            included_raters: None,
            sampled_rater: None,
        }
    }
}

/// Runs the configured method. `step` only matters for random sampling.
pub fn fuse(stack: &RaterStack, cfg: &FusionConfig, step: u64) -> Result<Fused> {
    cfg.validate()?;
    Ok(match cfg.method {
        FusionMethod::Rs => {
            let r = sample_rater_index(cfg.rng_seed, step, stack.num_raters());
            Fused {
                sampled_rater: Some(r),
                ..Fused::plain(FusedTarget::Hard(stack.rater(r).clone()))
            }
        }
        FusionMethod::Mc => Fused::plain(FusedTarget::Hard(fuse_median(stack))),
        FusionMethod::Sc => Fused::plain(FusedTarget::Soft(fuse_soft(stack))),
        FusionMethod::Scg => Fused::plain(FusedTarget::Soft(fuse_soft_gaussian(stack, cfg.sigma))),
        FusionMethod::Svls => Fused::plain(FusedTarget::Soft(fuse_svls(stack, cfg))),
        FusionMethod::Staple => {
            let (w, perf) = fuse_staple(stack, cfg)?;
            Fused {
                rater_performance: Some(perf),
                ..Fused::plain(FusedTarget::Soft(w))
            }
        }
        FusionMethod::Simple => {
            let res = simple(stack, cfg)?;
            Fused {
                included_raters: Some(res.included),
                ..Fused::plain(FusedTarget::Hard(res.mask))
            }
        }
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based uniform draw of a rater index from `(seed, step)`.
pub fn sample_rater_index(seed: u64, step: u64, num_raters: usize) -> usize {
    let h = splitmix64(splitmix64(seed) ^ step);
    ((h as u128 * num_raters as u128) >> 64) as usize
}

/// Returns the mask of one uniformly drawn rater.
pub fn fuse_random_sampling(stack: &RaterStack, seed: u64, step: u64) -> BinaryMask {
    stack
        .rater(sample_rater_index(seed, step, stack.num_raters()))
        .clone()
}

/// Per-voxel median of the votes; an even split goes to foreground.
pub fn fuse_median(stack: &RaterStack) -> BinaryMask {
    orc_encode(stack).majority_mask()
}

/// Per-voxel mean of the votes.
pub fn fuse_soft(stack: &RaterStack) -> SoftLabelMap {
    let orc = orc_encode(stack);
    let k = stack.num_raters() as f64;
    SoftLabelMap::new(orc.grid().map(|&c| c as f64 / k))
}

/// Majority vote over a subset of raters, ties to foreground.
pub(crate) fn majority_of(stack: &RaterStack, raters: &[usize]) -> BinaryMask {
    let n = stack.num_voxels();
    let mut votes = vec![0usize; n];
    for &r in raters {
        for (v, &y) in votes.iter_mut().zip(stack.rater(r).as_slice()) {
            *v += y as usize;
        }
    }
    let need = raters.len().div_ceil(2);
    let (h, w) = stack.dims();
    BinaryMask::new(Grid2D::new(h, w, votes.iter().map(|&c| (c >= need) as u8).collect()).unwrap())
        .expect("binary by construction")
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn median_votes() {
        let s = stack(1, 1, &[&[1], &[0], &[1]]);
        assert_eq!(fuse_median(&s).as_slice(), &[1]);
        let s = stack(1, 1, &[&[1], &[0]]);
        assert_eq!(fuse_median(&s).as_slice(), &[1]);
        let s = stack(1, 2, &[&[0, 0], &[0, 1], &[1, 0], &[0, 1]]);
        assert_eq!(fuse_median(&s).as_slice(), &[0, 1]);
        let m = [1, 0, 0, 1, 1, 0];
        let s = stack(2, 3, &[&m, &m, &m]);
        assert_eq!(fuse_median(&s).as_slice(), &m);
    }

    #[test]
    fn soft_consensus() {
        let s = stack(1, 1, &[&[1], &[1], &[0], &[0]]);
        assert_eq!(fuse_soft(&s).as_slice(), &[0.5]);
        let s = stack(2, 2, &[&[0; 4], &[0; 4]]);
        assert!(fuse_soft(&s).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn soft_equals_orc_over_k() {
        let s = random_stack(8, 6, 7, 5);
        let orc = orc_encode(&s);
        for (soft, &c) in fuse_soft(&s).as_slice().iter().zip(orc.as_slice()) {
            assert_eq!(*soft, c as f64 / 5.0);
        }
    }

    #[test]
    fn random_sampling_contract() {
        let single = random_stack(1, 3, 3, 1);
        for step in 0..20 {
            assert_eq!(fuse_random_sampling(&single, step * 7, step), *single.rater(0));
        }
        let s = random_stack(2, 3, 3, 3);
        let first = sample_rater_index(7, 0, 3);
        for _ in 0..5 {
            assert_eq!(sample_rater_index(7, 0, 3), first);
        }
        assert_eq!(fuse_random_sampling(&s, 7, 0), *s.rater(first));
    }

    #[test]
    fn random_sampling_is_uniform() {
        let mut counts = [0usize; 3];
        let n = 10_000;
        for step in 0..n {
            counts[sample_rater_index(42, step, 3)] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
        // Chi-square with 2 dof, 99.9% quantile is 13.8.
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.8, "chi2 = {chi2}");
    }

    #[test]
    fn outputs_keep_dims_and_ranges() {
        let s = random_stack(4, 9, 13, 4);
        for method in FusionMethod::ALL {
            let fused = fuse(&s, &FusionConfig::with_method(method), 3).unwrap();
            assert_eq!(fused.target.dims(), (9, 13), "{method}");
            let vals = fused.target.values();
            if method.is_hard() {
                assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0));
            } else {
                assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let s = random_stack(12, 10, 10, 4);
        let mut reversed: Vec<BinaryMask> = s.raters().to_vec();
        reversed.reverse();
        let p = RaterStack::new(reversed).unwrap();
        for method in FusionMethod::ALL.into_iter().filter(|m| *m != FusionMethod::Rs) {
            let cfg = FusionConfig::with_method(method);
            let a = fuse(&s, &cfg, 0).unwrap().target.values();
            let b = fuse(&p, &cfg, 0).unwrap().target.values();
            let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-9, "{method}: {worst}");
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in FusionMethod::ALL {
            assert_eq!(m.name().parse::<FusionMethod>().unwrap(), m);
        }
        assert!("median".parse::<FusionMethod>().is_err());
    }
}
