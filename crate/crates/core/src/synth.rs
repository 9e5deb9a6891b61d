//! Synthetic multi-rater data with a known consensus process.
//!
//! Each sample has a latent field `s(v)` in `[0, 1]` built from 1 to 3 soft
//! ellipses. Rater `r` labels `v` foreground when
//! `s(v) + b_r + e_r(v) >= 0.5`, with a threshold offset `b_r ~ N(0, bias²)`
//! and Gaussian-smoothed noise `e_r(v)` of marginal std `noise`. Offsets are
//! drawn per (sample, rater), so the probability that a random rater marks
//! `v` is exactly `Phi((s(v) - 0.5) / sigma_eff)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::container::{write_container, Container};
use crate::dataset::{DatasetManifest, SampleEntry, Split, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::fusion::gaussian_kernel_1d;
use crate::grid::{BinaryMask, ForegroundProbMap, Grid2D, RaterStack, Sample};

/// Width of the smoothing kernel applied to rater noise.
pub const NOISE_SMOOTHING_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_raters: usize,
    /// Boundary blur in `[0, 1]`; 0 gives hard object edges.
    pub ambiguity: f64,
    pub rater_bias_std: f64,
    pub rater_noise_std: f64,
    pub image_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 20,
            image_size: 64,
            num_raters: 3,
            ambiguity: 0.5,
            rater_bias_std: 0.1,
            rater_noise_std: 0.15,
            image_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_samples == 0 {
            return bad("num_samples must be >= 1".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size must be >= 8, got {}", self.image_size));
        }
        if self.num_raters == 0 {
            return bad("num_raters must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad(format!("ambiguity must be in [0, 1], got {}", self.ambiguity));
        }
        for (name, v) in [
            ("rater_bias_std", self.rater_bias_std),
            ("rater_noise_std", self.rater_noise_std),
            ("image_noise_std", self.image_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Std of the total threshold perturbation `b + e`.
    pub fn sigma_eff(&self) -> f64 {
        self.rater_bias_std.hypot(self.rater_noise_std)
    }

    /// Logistic boundary width of the ellipses, in pixels.
    pub fn boundary_width(&self) -> f64 {
        self.ambiguity * self.image_size as f64 / 16.0
    }
}

/// Noise-free object field; its 0.5 level set is the true boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub grid: Grid2D<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub index: usize,
    pub id: String,
    pub latent: LatentField,
    pub image: Grid2D<f64>,
    pub raters: RaterStack,
}

impl SynthSample {
    pub fn to_sample(&self) -> Sample {
        Sample::new(self.id.clone(), self.image.clone(), self.raters.clone()).expect("generated dims agree")
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut impl Rng, size: f64) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cy: rng.random_range(0.25..0.75) * size,
            cx: rng.random_range(0.25..0.75) * size,
            a: rng.random_range(0.1..0.25) * size,
            b: rng.random_range(0.1..0.25) * size,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// First-order signed distance to the outline, negative inside.
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let w = -dx * self.sin + dy * self.cos;
        let rho = ((u / self.a).powi(2) + (w / self.b).powi(2)).sqrt();
        let grad = ((u / (self.a * self.a)).powi(2) + (w / (self.b * self.b)).powi(2)).sqrt();
        if grad < 1e-12 {
            return -self.a.min(self.b);
        }
        (rho - 1.0) * rho / grad
    }
}

fn latent_field(rng: &mut impl Rng, cfg: &SynthConfig) -> LatentField {
    let n = cfg.image_size;
    let count = rng.random_range(1..=3);
    let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(rng, n as f64)).collect();
    let width = cfg.boundary_width();
    let grid = Grid2D::from_fn(n, n, |y, x| {
        let total: f64 = ellipses
            .iter()
            .map(|e| {
                let d = e.signed_distance(y as f64 + 0.5, x as f64 + 0.5);
                if width == 0.0 {
                    if d <= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    1.0 / (1.0 + (d / width).exp())
                }
            })
            .sum();
        // Stored as f32 on disk; round now so in-memory and loaded latents agree.
        total.clamp(0.0, 1.0) as f32 as f64
    });
    LatentField { grid }
}

/// Unit-variance Gaussian noise smoothed with a normalized kernel.
fn smoothed_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let kernel = gaussian_kernel_1d(NOISE_SMOOTHING_SIGMA);
    let r = kernel.len() / 2;
    let padded = n + 2 * r;
    let white: Vec<f64> = (0..padded * padded).map(|_| rng.sample(StandardNormal)).collect();
    // Sum of squared 2D weights is the square of the 1D sum.
    let norm = kernel.iter().map(|k| k * k).sum::<f64>();

    let mut rows = vec![0.0; padded * n];
    for y in 0..padded {
        for x in 0..n {
            rows[y * n + x] = kernel.iter().enumerate().map(|(i, k)| k * white[y * padded + x + i]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let v: f64 = kernel.iter().enumerate().map(|(i, k)| k * rows[(y + i) * n + x]).sum();
            out[y * n + x] = v / norm;
        }
    }
    out
}

/// Deterministic in `(cfg.seed, index)` only.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> SynthSample {
    let n = cfg.image_size;
    let mut rng = sample_rng(cfg.seed, index);
    let latent = latent_field(&mut rng, cfg);

    let image_noise = Normal::new(0.0, cfg.image_noise_std).expect("validated std");
    let image = latent
        .grid
        .map(|&s| (s + image_noise.sample(&mut rng)).clamp(0.0, 1.0) as f32 as f64);

    let bias = Normal::new(0.0, cfg.rater_bias_std).expect("validated std");
    let masks = (0..cfg.num_raters)
        .map(|_| {
            let b = bias.sample(&mut rng);
            let noise = smoothed_noise(&mut rng, n);
            let values: Vec<u8> = latent
                .grid
                .as_slice()
                .iter()
                .zip(&noise)
                .map(|(&s, &e)| (s + b + cfg.rater_noise_std * e >= 0.5) as u8)
                .collect();
            BinaryMask::new(Grid2D::new(n, n, values).expect("square grid")).expect("binary")
        })
        .collect();

    SynthSample {
        index,
        id: sample_id(index),
        latent,
        image,
        raters: RaterStack::new(masks).expect("at least one rater"),
    }
}

pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    Ok((0..cfg.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect())
}

/// Seeded shuffle, then `floor(0.7 n)` train, `floor(0.15 n)` val and the
/// remainder test. Indexed by sample index.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Writes `images/`, `raters/`, `latent/` and `manifest.json` under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let samples = generate_samples(cfg)?;
    for sub in ["images", "raters", "latent"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let splits = assign_splits(cfg.num_samples, cfg.seed);

    let entries = samples
        .par_iter()
        .map(|s| {
            let image_path = format!("images/{}.mrc", s.id);
            let latent_path = format!("latent/{}.mrc", s.id);
            write_container(&Container::from_real_grid(&s.image), out_dir.join(&image_path))?;
            write_container(&Container::from_real_grid(&s.latent.grid), out_dir.join(&latent_path))?;
            let rater_paths = s
                .raters
                .raters()
                .iter()
                .enumerate()
                .map(|(r, mask)| {
                    let p = format!("raters/{}_r{r}.mrc", s.id);
                    write_container(&Container::from_mask(mask), out_dir.join(&p))?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleEntry {
                id: s.id.clone(),
                image_path,
                rater_paths,
                split: splits[s.index],
                latent_path: Some(latent_path),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        num_raters: cfg.num_raters,
        samples: entries,
        synth: Some(*cfg),
    };
    manifest.write(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that a random rater from the generating process marks each
/// voxel foreground.
pub fn true_consensus_probability(latent: &LatentField, cfg: &SynthConfig) -> ForegroundProbMap {
    let sigma = cfg.sigma_eff();
    let probs = latent.grid.map(|&s| {
        if sigma == 0.0 {
            if s >= 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf((s - 0.5) / sigma)
        }
    });
    ForegroundProbMap::new(probs).expect("finite probabilities")
}
