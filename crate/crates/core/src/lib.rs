//! Ordinal rater-consensus training and multi-rater calibration evaluation
//! for binary segmentation.
//!
//! The per-voxel count of foreground votes among `K` raters is treated as an
//! ordered label in `0..=K`. A network predicts a distribution over those
//! levels, is trained with BCE on the majority mass plus a ranked probability
//! score, and is evaluated with calibration error over every
//! (voxel, rater) pair.
//!
//! ```
//! use mrcal::{aggregate_foreground, OrdinalProbMap};
//!
//! let probs = OrdinalProbMap::new(1, 1, 3, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
//! let fg = aggregate_foreground(&probs);
//! assert!((fg.as_slice()[0] - 0.7).abs() < 1e-12);
//! ```

pub mod container;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod ordinal;
pub mod synth;

pub use container::{read_container, write_container, Container, Dtype, Payload};
pub use dataset::{load_dataset, Dataset, DatasetManifest, SampleEntry, Split};
pub use error::{Error, Result};
pub use fusion::{fuse, FusedTarget, FusionConfig, FusionMethod, SoftLabelMap};
pub use grid::{BinaryMask, ForegroundProbMap, Grid2D, RaterStack, Sample};
pub use metrics::{auc, bootstrap_eval, mr_ece, CalibrationBins, EceMode, EvalConfig, MetricReport};
pub use model::{predict, train, Checkpoint, TinyNet, TrainConfig, TrainLoss};
pub use ordinal::{
    aggregate_foreground, hybrid_loss, orc_encode, rps_loss, LossConfig, OrcMap, OrdinalProbMap,
};
pub use synth::{generate, true_consensus_probability, LatentField, SynthConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/consensus.md")]
    mod consensus {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
