//! Segmentation network, training loop and checkpoints.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{predict, sidecar_path, Checkpoint, TrainingMetadata, CHECKPOINT_FORMAT};
pub use net::{sigmoid, Architecture, ForwardCache, Head, NetOutput, TinyNet, DEFAULT_HIDDEN};
pub use train::{bce_with_logits, loss_and_grad, train, train_net, train_with, TrainConfig, TrainLoss, TrainOutcome, Supervision};
