//! Minibatch SGD over a fixed training split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMetadata};
use super::net::{sigmoid, Architecture, Head, TinyNet, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_soft, FusionConfig, FusionMethod, RaterPerformance};
use crate::grid::{Grid2D, Sample};
use crate::ordinal::{hybrid_loss, orc_encode, LossConfig, OrcMap, OrdinalProbMap, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    /// Sigmoid head, BCE against the fused target of `fusion.method`.
    BceVsFused,
    /// Ordinal head, `BCE + alpha * RPS` against the consensus count.
    HybridRps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: TrainLoss,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: TrainLoss::HybridRps,
            alpha: 0.8,
            lr: 0.01,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            fusion: FusionConfig::default(),
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden must be >= 1".into()));
        }
        self.loss_config().validate()?;
        self.fusion.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            reduction: Reduction::MeanOverVoxels,
        }
    }

    pub fn architecture(&self, num_raters: usize) -> Architecture {
        let head = match self.loss {
            TrainLoss::BceVsFused => Head::Sigmoid,
            TrainLoss::HybridRps => Head::Ordinal { num_raters },
        };
        Architecture {
            in_channels: 1,
            hidden: self.hidden,
            head,
        }
    }
}

/// Per-sample supervision.
enum Target {
    Ordinal(OrcMap),
    Soft(Vec<f64>),
    /// Random sampling: redrawn every epoch.
    Resampled,
}

/// Mean BCE of `sigmoid(z)` against soft targets, computed from the logits
/// (`softplus(z) - t z`), and its logit gradient.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let inv_n = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            loss += softplus - t * z;
            (sigmoid(z) - t) * inv_n
        })
        .collect();
    (loss * inv_n, grad)
}

/// Supervision for one image.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// Consensus counts, for the ordinal head and the hybrid loss.
    Ordinal(&'a OrcMap),
    /// Per-voxel targets in `[0, 1]`, for the sigmoid head and BCE.
    Soft(&'a [f64]),
}

/// Voxel-mean loss of one image and its gradient with respect to every
/// network parameter.
pub fn loss_and_grad(
    net: &TinyNet,
    image: &Grid2D<f64>,
    target: &Supervision<'_>,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let cache = net.forward_cached(image);
    let (loss, grad_logits) = match target {
        Supervision::Ordinal(orc) => {
            let (h, w) = image.dims();
            let probs = OrdinalProbMap::from_logits(h, w, orc.num_raters(), &cache.logits);
            let l = hybrid_loss(&probs, orc, loss_cfg)?;
            (l.total, l.grad_logits)
        }
        Supervision::Soft(t) => bce_with_logits(&cache.logits, t),
    };
    Ok((loss, net.backward(&cache, &grad_logits)))
}

/// Result of a training run before it is frozen into a checkpoint.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: TinyNet,
    pub loss_trace: Vec<f64>,
    pub rater_performance: Option<RaterPerformance>,
}

pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(samples, cfg, |_, _| {})
}

/// Trains and calls `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with(samples: &[Sample], cfg: &TrainConfig, on_epoch: impl FnMut(usize, f64)) -> Result<Checkpoint> {
    let outcome = train_net(samples, cfg, on_epoch)?;
    Ok(Checkpoint::from_net(
        &outcome.net,
        TrainingMetadata {
            config: *cfg,
            final_loss: *outcome.loss_trace.last().expect("epochs >= 1"),
            loss_trace: outcome.loss_trace,
            num_train_samples: samples.len(),
            rater_performance: outcome.rater_performance,
        },
    ))
}

pub fn train_net(samples: &[Sample], cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = samples.first().ok_or(Error::EmptyTrainSplit)?;
    let k = first.annotations.num_raters();
    for s in samples {
        if s.annotations.num_raters() != k {
            return Err(Error::RaterCountMismatch {
                context: format!("sample {:?}", s.id),
                expected: k,
                actual: s.annotations.num_raters(),
            });
        }
    }

    // Random sampling draws with the training seed.
    let fusion = FusionConfig {
        rng_seed: cfg.seed,
        ..cfg.fusion
    };
    let (targets, rater_performance) = build_targets(samples, cfg, &fusion)?;

    let mut net = TinyNet::new(cfg.architecture(k), cfg.seed);
    let loss_cfg = cfg.loss_config();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let resampled: Vec<Option<Vec<f64>>> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| match t {
                Target::Resampled => {
                    let step = (epoch * n + i) as u64;
                    fuse(&samples[i].annotations, &fusion, step).map(|f| Some(f.target.values()))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;

        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let target = match &targets[i] {
                        Target::Ordinal(orc) => Supervision::Ordinal(orc),
                        Target::Soft(t) => Supervision::Soft(t),
                        Target::Resampled => Supervision::Soft(resampled[i].as_deref().expect("drawn this epoch")),
                    };
                    loss_and_grad(&net, &samples[i].image, &target, &loss_cfg)
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; net.params().len()];
            for (loss, g) in &results {
                epoch_loss += loss;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi * scale;
                }
            }
            for (p, g) in net.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        loss_trace.push(mean);
        on_epoch(epoch, mean);
    }

    Ok(TrainOutcome {
        net,
        loss_trace,
        rater_performance,
    })
}

fn build_targets(
    samples: &[Sample],
    cfg: &TrainConfig,
    fusion: &FusionConfig,
) -> Result<(Vec<Target>, Option<RaterPerformance>)> {
    if cfg.loss == TrainLoss::HybridRps {
        let targets = samples.par_iter().map(|s| Target::Ordinal(orc_encode(&s.annotations))).collect();
        return Ok((targets, None));
    }
    if fusion.method == FusionMethod::Rs {
        return Ok((samples.iter().map(|_| Target::Resampled).collect(), None));
    }

    let fused = samples
        .par_iter()
        .map(|s| match fuse(&s.annotations, fusion, 0) {
            // A constant stack leaves STAPLE nothing to estimate; its consensus is the constant.
            Err(Error::DegenerateStack) => Ok((fuse_soft(&s.annotations).as_slice().to_vec(), None)),
            Err(e) => Err(e),
            Ok(f) => Ok((f.target.values(), f.rater_performance)),
        })
        .collect::<Result<Vec<_>>>()?;

    let perfs: Vec<&RaterPerformance> = fused.iter().filter_map(|(_, p)| p.as_ref()).collect();
    let performance = (!perfs.is_empty()).then(|| mean_performance(&perfs));
    Ok((fused.into_iter().map(|(t, _)| Target::Soft(t)).collect(), performance))
}

/// Per-rater mean over samples.
fn mean_performance(perfs: &[&RaterPerformance]) -> RaterPerformance {
    let k = perfs[0].sensitivity.len();
    let n = perfs.len() as f64;
    let avg = |f: fn(&RaterPerformance) -> &Vec<f64>| -> Vec<f64> {
        (0..k).map(|r| perfs.iter().map(|p| f(p)[r]).sum::<f64>() / n).collect()
    };
    RaterPerformance {
        sensitivity: avg(|p| &p.sensitivity),
        specificity: avg(|p| &p.specificity),
    }
}
