//! Checkpoint files: a 1-D f32 container holding the flat parameter vector
//! next to a JSON sidecar (`<file>.json`) with the architecture and training
//! record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{Architecture, TinyNet};
use super::train::TrainConfig;
use crate::container::{read_container, write_container, Container, Payload};
use crate::error::{Error, Result};
use crate::fusion::RaterPerformance;
use crate::grid::{ForegroundProbMap, Grid2D};

pub const CHECKPOINT_FORMAT: &str = "mrcal-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub config: TrainConfig,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub num_train_samples: usize,
    /// Mean STAPLE sensitivity/specificity per rater over the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_performance: Option<RaterPerformance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    architecture: Architecture,
    num_params: usize,
    training: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub params: Vec<f32>,
    pub meta: TrainingMetadata,
}

pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_net(net: &TinyNet, meta: TrainingMetadata) -> Self {
        Self {
            architecture: *net.architecture(),
            params: net.params().iter().map(|&p| p as f32).collect(),
            meta,
        }
    }

    pub fn to_net(&self) -> Result<TinyNet> {
        TinyNet::from_params(self.architecture, self.params.iter().map(|&p| p as f64).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let container = Container::new(vec![self.params.len() as u32], Payload::F32(self.params.clone()))?;
        write_container(&container, path)?;
        let sidecar = Sidecar {
            format: CHECKPOINT_FORMAT.into(),
            architecture: self.architecture,
            num_params: self.params.len(),
            training: self.meta.clone(),
        };
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side_path = sidecar_path(path);
        let text = fs::read_to_string(&side_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(side_path.clone()),
            _ => Error::Io(e),
        })?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.format != CHECKPOINT_FORMAT {
            return Err(Error::ArchitectureMismatch(format!("unknown checkpoint format {:?}", sidecar.format)));
        }
        let container = read_container(path)?;
        let params = match container.payload {
            Payload::F32(v) if container.dims.len() == 1 => v,
            Payload::F32(_) => return Err(Error::InvalidShape("checkpoint parameters must be 1-D".into())),
            Payload::U8(_) => {
                return Err(Error::DtypeMismatch {
                    expected: "f32",
                    actual: "u8",
                })
            }
        };
        let expected = sidecar.architecture.num_params();
        if params.len() != expected || sidecar.num_params != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "architecture needs {expected} parameters, file has {}",
                params.len()
            )));
        }
        Ok(Self {
            architecture: sidecar.architecture,
            params,
            meta: sidecar.training,
        })
    }
}

/// Foreground probability for `image`; ordinal outputs are collapsed by
/// majority mass.
pub fn predict(checkpoint: &Checkpoint, image: &Grid2D<f64>) -> Result<ForegroundProbMap> {
    if checkpoint.architecture.in_channels != 1 {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint expects {} input channels, images have 1",
            checkpoint.architecture.in_channels
        )));
    }
    Ok(checkpoint.to_net()?.forward(image).foreground())
}
