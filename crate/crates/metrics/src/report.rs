use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classification::{
    class_metrics, confusion_counts, macro_average_defined, micro_accuracy, patch_accuracy,
    ConfusionCounts, MacroAverage, PatchNormalization,
};
use crate::error::Result;
use crate::records::{PatchPredictionRecord, SlidePredictionRecord, CLASS_NAMES, NUM_CLASSES};
use crate::roc::{auc, roc_curve, RocPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub patch_accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub accuracy: Option<MacroAverage>,
    pub specificity: Option<MacroAverage>,
    pub sensitivity: Option<MacroAverage>,
    pub patch_accuracy: Option<MacroAverage>,
    pub auc: Option<MacroAverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub slides: usize,
    pub classes: Vec<ClassReport>,
    pub average: AverageRow,
    pub micro_accuracy: Option<f64>,
}

impl MetricReport {
    pub fn macro_sensitivity(&self) -> Option<f64> {
        self.average.sensitivity.map(|m| m.mean)
    }

    pub fn macro_patch_accuracy(&self) -> Option<f64> {
        self.average.patch_accuracy.map(|m| m.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per class plus an `Average` row of `mean ± std` cells; undefined cells
    /// are written as `-`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "patch_accuracy", "accuracy", "specificity", "sensitivity", "auc"])?;
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        for c in &self.classes {
            w.write_record([
                format!("{} {}", c.class, c.name),
                cell(c.patch_accuracy),
                cell(c.accuracy),
                cell(c.specificity),
                cell(c.sensitivity),
                cell(c.auc),
            ])?;
        }
        let avg = |m: Option<MacroAverage>| {
            m.map_or_else(|| "-".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
        };
        let a = &self.average;
        w.write_record([
            "Average".to_string(),
            avg(a.patch_accuracy),
            avg(a.accuracy),
            avg(a.specificity),
            avg(a.sensitivity),
            avg(a.auc),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Builds the full report. Patch records are optional; classes absent from the slide
/// records report undefined sensitivity and AUC.
pub fn build_report(
    slides: &[SlidePredictionRecord],
    patches: Option<&[PatchPredictionRecord]>,
    foreground_threshold: f64,
    normalization: PatchNormalization,
) -> Result<MetricReport> {
    for r in slides {
        r.validate()?;
    }
    let patch = match patches {
        Some(p) => Some(patch_accuracy(p, foreground_threshold, normalization)?),
        None => None,
    };
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let counts = confusion_counts(slides, c);
        let m = class_metrics(&counts);
        let roc = roc_curve(slides, c).unwrap_or_default();
        let class_auc = (!roc.is_empty()).then(|| auc(&roc));
        classes.push(ClassReport {
            class: c,
            name: CLASS_NAMES[c].to_string(),
            counts,
            accuracy: m.accuracy,
            specificity: m.specificity,
            sensitivity: m.sensitivity,
            patch_accuracy: patch.as_ref().and_then(|p| p.per_class[c]),
            auc: class_auc,
            roc,
        });
    }
    let collect = |f: fn(&ClassReport) -> Option<f64>| -> Option<MacroAverage> {
        let vals: Vec<Option<f64>> = classes.iter().map(f).collect();
        macro_average_defined(&vals).ok()
    };
    let average = AverageRow {
        accuracy: collect(|c| c.accuracy),
        specificity: collect(|c| c.specificity),
        sensitivity: collect(|c| c.sensitivity),
        patch_accuracy: collect(|c| c.patch_accuracy),
        auc: collect(|c| c.auc),
    };
    Ok(MetricReport {
        slides: slides.len(),
        classes,
        average,
        micro_accuracy: micro_accuracy(slides).ok(),
    })
}
