//! Complete run configuration with the full-scale and desk-scale presets.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::GeometryConfig;
use crate::ingest::LabStats;
use crate::roi::RoiConfig;
use crate::slide::{SlideConfig, DEFAULT_TOP_K};
use crate::synth::{SplitPlan, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    /// Patches count toward patch accuracy above this foreground fraction.
    pub patch_foreground: f64,
    /// Divide by all patches of a slide instead of the masked ones.
    pub literal_patch_accuracy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            patch_foreground: 0.10,
            literal_patch_accuracy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Slides per class in class-index order.
    pub counts: [usize; 5],
    /// Side of each synthetic slide in pixels.
    pub extent: usize,
    pub split: SplitPlan,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            counts: [30; 5],
            extent: 768,
            split: SplitPlan::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub stain: LabStats,
    pub roi: RoiConfig,
    pub slide: SlideConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale preset: 256 px stacks, 24×24 slide grid, 768 px synthetic slides.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            geometry: GeometryConfig::toy(),
            data: DataConfig::default(),
            stain: LabStats::reference(),
            roi: RoiConfig::default(),
            slide: SlideConfig::default(),
            stage1: TrainConfig::stage1_toy(),
            stage2: TrainConfig::stage2_toy(),
            eval: EvalConfig::default(),
        }
    }

    /// Full-scale geometry and optimizer settings (networks stay at configurable width).
    pub fn full() -> Self {
        let geometry = GeometryConfig::default();
        Self {
            data: DataConfig {
                extent: geometry.slide_px(),
                synth: SynthConfig {
                    min_extent: geometry.stack_px,
                    ..SynthConfig::default()
                },
                ..DataConfig::default()
            },
            geometry,
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(CoreError::Config(format!("unknown preset {other:?} (expected toy or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.roi.validate()?;
        self.slide.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.stain.validate()?;
        if self.roi.d_model != self.slide.d_model {
            return Err(CoreError::Config(format!(
                "stage-1 d_model {} differs from stage-2 d_model {}",
                self.roi.d_model, self.slide.d_model
            )));
        }
        if self.eval.top_k == 0 {
            return Err(CoreError::Config("eval.top_k must be at least 1".into()));
        }
        Ok(())
    }
}
