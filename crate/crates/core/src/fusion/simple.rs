//! SIMPLE: iterated majority voting that drops raters whose Dice overlap
//! with the current consensus falls below `mean - std` of all retained
//! raters' overlaps.

use super::{majority_of, FusionConfig};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RaterStack};

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleResult {
    pub mask: BinaryMask,
    /// Retained rater indices, ascending.
    pub included: Vec<usize>,
    /// Exclusion rounds that removed at least one rater.
    pub rounds: usize,
}

pub fn fuse_simple(stack: &RaterStack, cfg: &FusionConfig) -> Result<BinaryMask> {
    Ok(simple(stack, cfg)?.mask)
}

pub fn simple(stack: &RaterStack, cfg: &FusionConfig) -> Result<SimpleResult> {
    let k = stack.num_raters();
    if k < 2 {
        return Err(Error::TooFewRaters {
            method: "SIMPLE",
            min: 2,
            actual: k,
        });
    }
    let mut included: Vec<usize> = (0..k).collect();
    let mut rounds = 0;
    for _ in 0..cfg.simple_max_iters {
        let fused = majority_of(stack, &included);
        let scores: Vec<f64> = included
            .iter()
            .map(|&r| dice(stack.rater(r), &fused))
            .collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        let cutoff = mean - std;
        let keep: Vec<usize> = included
            .iter()
            .zip(&scores)
            .filter(|(_, &s)| s >= cutoff)
            .map(|(&r, _)| r)
            .collect();
        if keep.len() == included.len() || keep.len() < cfg.simple_min_raters {
            break;
        }
        included = keep;
        rounds += 1;
    }
    Ok(SimpleResult {
        mask: majority_of(stack, &included),
        included,
        rounds,
    })
}

/// Dice overlap; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
