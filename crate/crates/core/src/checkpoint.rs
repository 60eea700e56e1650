//! Per-phase checkpoints and generators as JSON. Floats are written in shortest
//! round-trip form, so load followed by save reproduces the file byte for byte.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassCounters;
use crate::model::IncrementalModel;
use crate::protocol::TaskSchedule;
use crate::tensor::Scalar;

/// Accuracy and duration of a completed phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub phase: usize,
    pub config_hash: String,
    pub schedule: TaskSchedule,
    /// Extractor and head, with partitions and batch-norm statistics.
    pub model: IncrementalModel<T>,
    pub counters: ClassCounters,
    /// Summaries of phases `1..=phase`.
    pub history: Vec<PhaseSummary>,
}

pub fn save_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_vec(value).map_err(|e| Error::format(path, e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}
