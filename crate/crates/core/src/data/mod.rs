//! Synthetic fingerprint pairs, on-disk datasets, augmentation and batching.

pub mod augment;
pub mod batch;
pub mod manifest;
pub mod pgm;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::tensor::{Tensor, TensorError};

pub use augment::{augment, AugmentParams};
pub use batch::{Batch, BatchIter};
pub use manifest::{load_dataset, split_sizes, write_dataset, DatasetManifest, Entry};
pub use synth::{generate_pair, DegradeOp, Degradation, GenConfig};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Pgm { path: PathBuf, source: pgm::PgmError },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("missing or unpaired image files for ids: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

/// A degraded image and its clean original, both `[1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub clean: Tensor,
    pub noisy: Tensor,
}

impl SamplePair {
    /// Height and width, or an error if the two images disagree.
    pub fn dims(&self) -> Result<(usize, usize), DataError> {
        match (self.clean.shape(), self.noisy.shape()) {
            ([1, h, w], [1, h2, w2]) if h == h2 && w == w2 => Ok((*h, *w)),
            (a, b) => Err(DataError::Sample {
                id: self.id.clone(),
                message: format!("clean {a:?} and noisy {b:?} are not matching [1, H, W] images"),
            }),
        }
    }
}
