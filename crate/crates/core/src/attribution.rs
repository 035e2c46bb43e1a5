//! Shared output format for every attribution method.
//!
//! All methods — the amortized gate classifier, its non-amortized variant,
//! and the four baselines — emit the same per-example structure so the
//! evaluation harness and CLI can treat them uniformly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One edge's attribution at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttribution {
    pub edge: usize,
    /// Soft relevance score in [0, 1] (probability of a non-zero gate for
    /// gate-based methods, normalized magnitude for gradient methods).
    pub prob: f64,
    /// Binary retained/superfluous decision.
    pub hard: bool,
}

/// Full attribution for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub original_prediction: usize,
    /// Prediction after dropping everything marked superfluous, using the
    /// method's own replacement semantics.
    pub masked_prediction: usize,
    /// KL(original ‖ masked) over the output distribution.
    pub divergence: f64,
    /// `layers[k][e]` is edge e's attribution at layer k.
    pub layers: Vec<Vec<EdgeAttribution>>,
}

impl AttributionResult {
    /// Hard decisions flattened layer-major, matching
    /// `layers.concat()` order.
    pub fn hard_flat(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().map(|a| a.hard))
            .collect()
    }

    pub fn prob_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().map(|a| a.prob))
            .collect()
    }

    pub fn retained_edges(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter())
            .filter(|a| a.hard)
            .count()
    }

    pub fn num_gates(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

/// A set of attributions over a dataset, with provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionFile {
    pub method: String,
    /// Binarization threshold for score-based methods.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold: Option<f64>,
    /// Free-form provenance: hyperparameters, seeds, checkpoint digests.
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub examples: Vec<AttributionResult>,
}

impl AttributionFile {
    pub fn new(method: &str, examples: Vec<AttributionResult>) -> Self {
        AttributionFile {
            method: method.to_string(),
            threshold: None,
            metadata: serde_json::Value::Null,
            examples,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Data(format!("cannot read attributions {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed attributions {}: {e}", path.display())))
    }
}
