//! Training, evaluation and reproducibility tooling around the model.

mod checkpoint;
mod config;
mod data;
mod eval;
pub mod gradcheck;
mod model;
mod optim;
pub mod plot;
pub mod synth;
mod train;

use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, INDEX_FILE};
pub use config::{AdamWConfig, Prompts, RunConfig, DEFAULT_GUIDE_PROMPT};
pub use data::{sample_frames, select_axis, stack, BatchInput, Dataset, Splits, VideoRecord};
pub use eval::{cross_dataset_eval, evaluate, fingerprint, predict, split_name, CrossDatasetReport, EvalReport, ScoreRow};
pub use model::{DvltaModel, ModelOutput, ModelShapes};
pub use optim::AdamW;
pub use synth::{synth_dataset, SynthConfig, SynthOutput};
pub use train::{minibatches, train, EpochLog, Trainer};

use crate::numerics::NumericsError;
use crate::scoring::ScoringError;
use crate::storage::StorageError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Configuration mistakes, as opposed to bad or missing data.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}
