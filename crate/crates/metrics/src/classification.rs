use serde::{Deserialize, Serialize};

use crate::error::{MetricError, Result};
use crate::records::{PatchPredictionRecord, SlidePredictionRecord, NUM_CLASSES};

/// One-vs-rest counts for a class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

pub fn confusion_counts(records: &[SlidePredictionRecord], class: usize) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for r in records {
        match (r.true_class == class, r.predicted_class == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Metrics with a zero denominator are `None`, never a silent zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    ClassMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        specificity: ratio(c.tn, c.tn + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub mean: f64,
    /// Population standard deviation across the averaged class values.
    pub std: f64,
}

/// Unweighted mean over per-class values, with their spread.
pub fn macro_average(values: &[f64]) -> Result<MacroAverage> {
    if values.is_empty() {
        return Err(MetricError::Argument("macro average of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MacroAverage {
        mean,
        std: var.sqrt(),
    })
}

/// Macro average over the classes where the value is defined.
pub fn macro_average_defined(values: &[Option<f64>]) -> Result<MacroAverage> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    macro_average(&defined)
}

/// Plain mean over raw records.
pub fn micro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricError::Argument("micro average of no records".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Fraction of slide records whose prediction is correct: the micro average of
/// per-record correctness.
pub fn micro_accuracy(records: &[SlidePredictionRecord]) -> Result<f64> {
    let hits: Vec<f64> = records
        .iter()
        .map(|r| f64::from(u8::from(r.true_class == r.predicted_class)))
        .collect();
    micro_average(&hits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchNormalization {
    /// Mean over foreground-masked patches only.
    #[default]
    MaskedMean,
    /// Masked correct count divided by all patches of the slide.
    AllPatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAccuracy {
    /// `None` for classes without any (scorable) slide.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub average: Option<MacroAverage>,
}

pub const DEFAULT_PATCH_FOREGROUND: f64 = 0.10;

/// Per slide, the foreground-masked patch correctness; per class, the mean over slides
/// whose slide-level truth is that class.
pub fn patch_accuracy(
    records: &[PatchPredictionRecord],
    foreground_threshold: f64,
    normalization: PatchNormalization,
) -> Result<PatchAccuracy> {
    let mut sums = [0.0f64; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for r in records {
        r.validate()?;
        let mut masked = 0usize;
        let mut correct = 0usize;
        for ((&p, &t), &fg) in r.predicted.iter().zip(&r.truth).zip(&r.foreground) {
            if fg > foreground_threshold {
                masked += 1;
                correct += usize::from(p == t);
            }
        }
        let denom = match normalization {
            PatchNormalization::MaskedMean => masked,
            PatchNormalization::AllPatches => r.truth.len(),
        };
        if denom == 0 {
            continue;
        }
        sums[r.slide_true_class] += correct as f64 / denom as f64;
        counts[r.slide_true_class] += 1;
    }
    let mut per_class = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            per_class[c] = Some(sums[c] / counts[c] as f64);
        }
    }
    let average = macro_average_defined(&per_class).ok();
    Ok(PatchAccuracy { per_class, average })
}
