//! Dataset manifests and loading.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::read_container;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, RaterStack, Sample};
use crate::synth::SynthConfig;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub image_path: String,
    pub rater_paths: Vec<String>,
    pub split: Split,
    /// Noise-free latent field; only present for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub num_raters: usize,
    pub samples: Vec<SampleEntry>,
    /// Generator settings, recorded when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.samples {
            if entry.rater_paths.len() != self.num_raters {
                return Err(Error::RaterCountMismatch {
                    context: format!("sample {:?}", entry.id),
                    expected: self.num_raters,
                    actual: entry.rater_paths.len(),
                });
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::OverlappingSplits(entry.id.clone()));
            }
        }
        Ok(())
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for entry in &self.samples {
            counts[entry.split as usize] += 1;
        }
        counts
    }
}

/// A loaded dataset, samples grouped by split in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_raters(&self) -> usize {
        self.manifest.num_raters
    }

    /// Latent fields for the samples of `split`, for synthetic datasets.
    pub fn load_latents(&self, split: Split) -> Result<Vec<Grid2D<f64>>> {
        self.manifest
            .samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let rel = e.latent_path.as_ref().ok_or_else(|| {
                    Error::InvalidConfig(format!("sample {:?} has no latent field", e.id))
                })?;
                read_container(self.root.join(rel))?.into_real_grid()
            })
            .collect()
    }
}

/// Accepts either the manifest file or the directory containing `manifest.json`.
pub fn resolve_manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = resolve_manifest_path(manifest_path);
    let manifest = DatasetManifest::read(&manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut dataset = Dataset {
        root: root.clone(),
        manifest: manifest.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.samples {
        let sample = load_sample(&root, entry)?;
        match entry.split {
            Split::Train => dataset.train.push(sample),
            Split::Val => dataset.val.push(sample),
            Split::Test => dataset.test.push(sample),
        }
    }
    Ok(dataset)
}

fn load_sample(root: &Path, entry: &SampleEntry) -> Result<Sample> {
    let image = read_container(root.join(&entry.image_path))?.into_real_grid()?;
    let masks = entry
        .rater_paths
        .iter()
        .map(|p| read_container(root.join(p))?.into_mask())
        .collect::<Result<Vec<_>>>()?;
    for mask in &masks {
        if mask.dims() != image.dims() {
            return Err(Error::DimensionMismatch {
                context: format!("sample {:?}", entry.id),
                expected: image.dims(),
                actual: mask.dims(),
            });
        }
    }
    let stack = RaterStack::new(masks)?;
    Sample::new(entry.id.clone(), image, stack)
}
