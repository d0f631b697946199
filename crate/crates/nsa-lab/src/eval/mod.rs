//! Desk-scale empirical harness: selection recall against the dense
//! oracle, structural needle retrieval, toy training on synthetic tasks,
//! and attention-map export.

mod heatmap;
mod needle;
mod recall;
mod train;

pub use heatmap::heatmap_export;
pub use needle::{needle_task_eval, NeedleGrid};
pub use recall::{block_recall_eval, RecallReport};
pub use train::{beacon, build_task, toy_train, TaskData, ToyModel, TrainLog, TrainStep};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Needle,
    ClusteredAttention,
}

/// A deterministic synthetic task instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub needle_position: Option<usize>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.feature_dim == 0 {
            return Err(Error::Config("task sizes must be positive".into()));
        }
        if let Some(p) = self.needle_position {
            if p >= self.seq_len {
                return Err(Error::Config(format!(
                    "needle position {p} outside sequence of length {}",
                    self.seq_len
                )));
            }
        }
        Ok(())
    }
}
