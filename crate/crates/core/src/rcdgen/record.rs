//! One line of the synthetic-pair manifest.

use serde::{Deserialize, Serialize};

use crate::error::{RcdError, Result};

/// A generated pair: paths are stored as written, relative to the manifest
/// directory when produced by the generate task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub id: String,
    pub pre_image: String,
    pub post_image: String,
    pub change_map: String,
    pub prompt: String,
    pub source: String,
    pub s_i: f64,
    pub s_t: f64,
    pub steps: usize,
    pub seed: u64,
}

impl SyntheticRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| RcdError::Validation(format!("bad manifest line: {e}")))
    }
}
