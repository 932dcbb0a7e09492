//! Run configuration: a JSON file whose fields flags can override.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use haad::scoring::DEFAULT_K;
use haad::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every field is optional in the file; missing ones take these defaults.
///
/// ```json
/// {
///   "train": { "normal_label": "wave", "epochs": 50, "encoder": { "dct_coeffs": 10 } },
///   "data": "data/manifest.json",
///   "test": "test/manifest.json",
///   "scheme": "knn",
///   "k": 3
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Training manifest.
    pub data: Option<PathBuf>,
    /// Test manifest for `eval` and `sweep`.
    pub test: Option<PathBuf>,
    /// `knn` or `nll`.
    pub scheme: String,
    pub k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            test: None,
            scheme: "knn".into(),
            k: DEFAULT_K,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
