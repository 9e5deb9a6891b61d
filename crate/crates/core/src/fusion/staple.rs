//! STAPLE: expectation-maximization over a latent binary truth with one
//! (sensitivity, specificity) pair per rater. Voxels are treated as
//! independent given the parameters; there is no spatial prior.

use super::{fuse_soft, FusionConfig, RaterPerformance, SoftLabelMap};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, RaterStack};

const PARAM_CLAMP: f64 = 1e-6;
const INITIAL_PERFORMANCE: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct StapleResult {
    /// Posterior foreground probability per voxel.
    pub weights: SoftLabelMap,
    pub performance: RaterPerformance,
    /// Fixed foreground prior (mean soft consensus).
    pub prior: f64,
    /// EM iterations run (M-steps).
    pub iterations: usize,
    /// Observed-data log-likelihood after each E-step, starting with the
    /// initial parameters.
    pub log_likelihood: Vec<f64>,
}

pub fn fuse_staple(stack: &RaterStack, cfg: &FusionConfig) -> Result<(SoftLabelMap, RaterPerformance)> {
    let res = staple(stack, cfg)?;
    Ok((res.weights, res.performance))
}

pub fn staple(stack: &RaterStack, cfg: &FusionConfig) -> Result<StapleResult> {
    let k = stack.num_raters();
    if k < 2 {
        return Err(Error::TooFewRaters {
            method: "STAPLE",
            min: 2,
            actual: k,
        });
    }
    let first = stack.rater(0).as_slice()[0];
    if stack.raters().iter().all(|m| m.as_slice().iter().all(|&y| y == first)) {
        return Err(Error::DegenerateStack);
    }

    let n = stack.num_voxels();
    let prior = fuse_soft(stack).as_slice().iter().sum::<f64>() / n as f64;
    let mut sens = vec![INITIAL_PERFORMANCE; k];
    let mut spec = vec![INITIAL_PERFORMANCE; k];

    let mut weights = vec![0.0; n];
    let mut ll = e_step(stack, prior, &sens, &spec, &mut weights);
    let mut trace = vec![ll];
    let mut next = vec![0.0; n];
    let mut iterations = 0;

    for _ in 0..cfg.staple_max_iters {
        m_step(stack, &weights, &mut sens, &mut spec);
        ll = e_step(stack, prior, &sens, &spec, &mut next);
        trace.push(ll);
        iterations += 1;
        let delta: f64 = weights.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        std::mem::swap(&mut weights, &mut next);
        if delta < cfg.staple_tol {
            break;
        }
    }

    let (h, w) = stack.dims();
    Ok(StapleResult {
        weights: SoftLabelMap::new(Grid2D::new(h, w, weights).expect("stack dims")),
        performance: RaterPerformance {
            sensitivity: sens,
            specificity: spec,
        },
        prior,
        iterations,
        log_likelihood: trace,
    })
}

/// Writes posteriors into `out` and returns the observed-data log-likelihood.
fn e_step(stack: &RaterStack, prior: f64, sens: &[f64], spec: &[f64], out: &mut [f64]) -> f64 {
    // Per-rater log factors for votes 1 and 0 under each latent class.
    let fg_if_1: Vec<f64> = sens.iter().map(|p| p.ln()).collect();
    let fg_if_0: Vec<f64> = sens.iter().map(|p| (1.0 - p).ln()).collect();
    let bg_if_1: Vec<f64> = spec.iter().map(|q| (1.0 - q).ln()).collect();
    let bg_if_0: Vec<f64> = spec.iter().map(|q| q.ln()).collect();
    let log_f = prior.ln();
    let log_not_f = (1.0 - prior).ln();

    let mut ll = 0.0;
    for (v, w) in out.iter_mut().enumerate() {
        let mut la = log_f;
        let mut lb = log_not_f;
        for (r, mask) in stack.raters().iter().enumerate() {
            if mask.as_slice()[v] == 1 {
                la += fg_if_1[r];
                lb += bg_if_1[r];
            } else {
                la += fg_if_0[r];
                lb += bg_if_0[r];
            }
        }
        let m = la.max(lb);
        let (ea, eb) = ((la - m).exp(), (lb - m).exp());
        *w = ea / (ea + eb);
        ll += m + (ea + eb).ln();
    }
    ll
}

fn m_step(stack: &RaterStack, weights: &[f64], sens: &mut [f64], spec: &mut [f64]) {
    let w_total: f64 = weights.iter().sum();
    let not_w_total: f64 = weights.iter().map(|w| 1.0 - w).sum();
    for (r, mask) in stack.raters().iter().enumerate() {
        let mut tp = 0.0;
        let mut tn = 0.0;
        for (&w, &y) in weights.iter().zip(mask.as_slice()) {
            if y == 1 {
                tp += w;
            } else {
                tn += 1.0 - w;
            }
        }
        sens[r] = (tp / w_total).clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP);
        spec[r] = (tn / not_w_total).clamp(PARAM_CLAMP, 1.0 - PARAM_CLAMP);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::test_util::*;
    use crate::fusion::FusionMethod;

    fn cfg() -> FusionConfig {
        FusionConfig::with_method(FusionMethod::Staple)
    }

    /// Direct-product EM with no log-space arithmetic, run for a fixed number
    /// of iterations.
    fn brute_force_em(votes: &[Vec<u8>], iters: usize) -> Vec<f64> {
        let k = votes.len();
        let n = votes[0].len();
        let f = votes.iter().flatten().map(|&y| y as f64).sum::<f64>() / (n * k) as f64;
        let mut p = vec![0.95f64; k];
        let mut q = vec![0.95f64; k];
        let mut w = vec![0.0; n];
        for _ in 0..iters {
            for v in 0..n {
                let mut a = f;
                let mut b = 1.0 - f;
                for r in 0..k {
                    let y = votes[r][v] as f64;
                    a *= p[r].powf(y) * (1.0 - p[r]).powf(1.0 - y);
                    b *= q[r].powf(1.0 - y) * (1.0 - q[r]).powf(y);
                }
                w[v] = a / (a + b);
            }
            for r in 0..k {
                let mut num_p = 0.0;
                let mut num_q = 0.0;
                for v in 0..n {
                    let y = votes[r][v] as f64;
                    num_p += w[v] * y;
                    num_q += (1.0 - w[v]) * (1.0 - y);
                }
                p[r] = (num_p / w.iter().sum::<f64>()).clamp(1e-6, 1.0 - 1e-6);
                q[r] = (num_q / w.iter().map(|x| 1.0 - x).sum::<f64>()).clamp(1e-6, 1.0 - 1e-6);
            }
        }
        w
    }

    #[test]
    fn agreeing_raters_recover_the_mask() {
        let m = [1, 1, 0, 0, 1, 0, 0, 0, 1];
        let s = stack(3, 3, &[&m, &m, &m]);
        let res = staple(&s, &cfg()).unwrap();
        for (w, &y) in res.weights.as_slice().iter().zip(&m) {
            assert!((w - y as f64).abs() < 1e-3);
        }
        for (&p, &q) in res.performance.sensitivity.iter().zip(&res.performance.specificity) {
            assert!(p > 0.999 && q > 0.999, "{p} {q}");
            assert!(p <= 1.0 - 1e-6 && q <= 1.0 - 1e-6);
        }
    }

    #[test]
    fn posterior_decreases_with_votes_removed() {
        // Voxels with 3, 2, 1, 0 of 3 votes.
        let votes = vec![vec![1, 1, 1, 0], vec![1, 1, 0, 0], vec![1, 0, 0, 0]];
        let refs: Vec<&[u8]> = votes.iter().map(|v| v.as_slice()).collect();
        let s = stack(1, 4, &refs);
        let res = staple(&s, &FusionConfig { staple_tol: 1e-12, staple_max_iters: 500, ..cfg() }).unwrap();
        let w = res.weights.as_slice();
        assert!(w.windows(2).all(|p| p[0] > p[1]), "{w:?}");
        let oracle = brute_force_em(&votes, 500);
        for (a, b) in w.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{w:?} vs {oracle:?}");
        }
    }

    #[test]
    fn matches_oracle_on_random_stack() {
        let s = random_stack(31, 6, 6, 4);
        let votes: Vec<Vec<u8>> = s.raters().iter().map(|m| m.as_slice().to_vec()).collect();
        let res = staple(&s, &FusionConfig { staple_tol: 0.0, staple_max_iters: 40, ..cfg() }).unwrap();
        // Our loop runs one E-step before the first M-step; the oracle's
        // iteration count matches M-steps + 1.
        let oracle = brute_force_em(&votes, 41);
        for (a, b) in res.weights.as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for seed in 0..10 {
            let s = random_stack(seed, 8, 8, 3 + (seed as usize % 3));
            let res = staple(&s, &FusionConfig { staple_tol: 0.0, staple_max_iters: 60, ..cfg() }).unwrap();
            for pair in res.log_likelihood.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-9, "seed {seed}: {pair:?}");
            }
            assert!(res.weights.as_slice().iter().all(|w| (0.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn degenerate_and_small_stacks() {
        let z = [0u8; 4];
        assert!(matches!(staple(&stack(2, 2, &[&z, &z]), &cfg()), Err(Error::DegenerateStack)));
        let one = [1u8, 0, 1, 0];
        assert!(matches!(
            staple(&stack(2, 2, &[&one]), &cfg()),
            Err(Error::TooFewRaters { .. })
        ));
    }
}
