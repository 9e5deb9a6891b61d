//! Gaussian smoothing of soft consensus maps: fixed-width (SC-G) and
//! disagreement-adaptive (SVLS). Kernels are truncated at `ceil(3 sigma)`
//! and borders use symmetric reflection (`d c b a | a b c d | d c b a`).

use super::{fuse_soft, FusionConfig, SoftLabelMap};
use crate::grid::{Grid2D, RaterStack};

/// Maps any integer coordinate into `0..n` by symmetric reflection.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized 1D Gaussian weights for offsets `-R..=R`, `R = ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Separable Gaussian blur with reflect padding.
pub(crate) fn gaussian_blur(grid: &Grid2D<f64>, sigma: f64) -> Grid2D<f64> {
    let (h, w) = grid.dims();
    let kernel = gaussian_kernel_1d(sigma);
    let r = (kernel.len() / 2) as isize;
    let src = grid.as_slice();

    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * line[reflect_index(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * rows[reflect_index(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    Grid2D::new(h, w, out).expect("same dims")
}

/// Soft consensus convolved with a normalized Gaussian of width `sigma`.
pub fn fuse_soft_gaussian(stack: &RaterStack, sigma: f64) -> SoftLabelMap {
    assert!(sigma > 0.0, "sigma must be positive");
    let soft = fuse_soft(stack);
    SoftLabelMap::new(gaussian_blur(soft.grid(), sigma))
}

/// Soft consensus smoothed with a per-voxel Gaussian whose width grows with
/// local disagreement `d = 4 p (1 - p)`: `sigma(v) = sigma * (0.25 + 0.75 d)`.
/// The window radius is fixed at `ceil(3 sigma)` and weights are renormalized
/// per voxel.
pub fn fuse_svls(stack: &RaterStack, cfg: &FusionConfig) -> SoftLabelMap {
    svls_from_soft(fuse_soft(stack).grid(), cfg.sigma)
}

pub(crate) fn svls_from_soft(soft: &Grid2D<f64>, sigma: f64) -> SoftLabelMap {
    assert!(sigma > 0.0, "sigma must be positive");
    let (h, w) = soft.dims();
    let r = radius(sigma) as isize;
    let src = soft.as_slice();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = src[y * w + x];
            let d = 4.0 * p * (1.0 - p);
            let s = sigma * (0.25 + 0.75 * d);
            let inv = 1.0 / (2.0 * s * s);
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -r..=r {
                let yy = reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    let xx = reflect_index(x as isize + dx, w);
                    let g = (-((dx * dx + dy * dy) as f64) * inv).exp();
                    num += g * src[yy * w + xx];
                    den += g;
                }
            }
            out[y * w + x] = num / den;
        }
    }
    SoftLabelMap::new(Grid2D::new(h, w, out).expect("same dims"))
}
