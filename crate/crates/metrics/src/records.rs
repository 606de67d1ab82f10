use serde::{Deserialize, Serialize};

use crate::error::{MetricError, Result};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["NFD", "TA", "Diff-CA", "Undiff-CA", "MALT"];

/// One slide-level prediction; scores are percentages summing to 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePredictionRecord {
    pub slide_id: String,
    pub true_class: usize,
    pub predicted_class: usize,
    pub scores: [f64; NUM_CLASSES],
}

impl SlidePredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| MetricError::Record {
            id: self.slide_id.clone(),
            reason,
        };
        if self.true_class >= NUM_CLASSES || self.predicted_class >= NUM_CLASSES {
            return Err(bad(format!(
                "classes ({}, {}) outside 0..{}",
                self.true_class, self.predicted_class, NUM_CLASSES
            )));
        }
        let total: f64 = self.scores.iter().sum();
        if (total - 100.0).abs() > 1e-3 {
            return Err(bad(format!("scores sum to {}", total)));
        }
        Ok(())
    }
}

/// Per-patch predictions of one slide, flattened over all of its patch stacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPredictionRecord {
    pub slide_id: String,
    pub slide_true_class: usize,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub foreground: Vec<f64>,
}

impl PatchPredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| MetricError::Record {
            id: self.slide_id.clone(),
            reason,
        };
        if self.slide_true_class >= NUM_CLASSES {
            return Err(bad(format!("slide class {}", self.slide_true_class)));
        }
        if self.predicted.len() != self.truth.len() || self.truth.len() != self.foreground.len() {
            return Err(bad(format!(
                "misaligned extents: {} predicted, {} truth, {} foreground",
                self.predicted.len(),
                self.truth.len(),
                self.foreground.len()
            )));
        }
        Ok(())
    }
}
