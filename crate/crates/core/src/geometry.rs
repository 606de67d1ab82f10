//! Slide, stack and patch extents and their physical size.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Non-overlapping window of the slide-level max pool.
pub const POOL: usize = 3;

/// Every backbone stage (four of them) halves the resolution after the stem.
pub const BACKBONE_STAGE_DOWNSAMPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub stack_px: usize,
    pub grid: usize,
    pub mpp: f64,
    pub slide_grid: usize,
    pub max_stacks: usize,
    pub min_foreground_fraction: f64,
    /// Pixels shared by horizontally or vertically adjacent windows; a multiple of `patch_px`.
    pub overlap_px: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            stack_px: 2048,
            grid: 8,
            mpp: 0.485,
            slide_grid: 96,
            max_stacks: 100,
            min_foreground_fraction: 0.30,
            overlap_px: 0,
        }
    }
}

impl GeometryConfig {
    /// Desk-scale geometry: 256 px stacks of 8×8 patches on a 24×24 slide grid.
    pub fn toy() -> Self {
        Self {
            stack_px: 256,
            slide_grid: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Geometry(m));
        if self.grid == 0 || self.stack_px == 0 || self.stack_px % self.grid != 0 {
            return bad(format!("stack_px {} is not divisible by grid {}", self.stack_px, self.grid));
        }
        let p = self.patch_px();
        if p % BACKBONE_STAGE_DOWNSAMPLE != 0 {
            return bad(format!("patch_px {p} must be a multiple of {BACKBONE_STAGE_DOWNSAMPLE}"));
        }
        if self.slide_grid == 0 || self.slide_grid % POOL != 0 {
            return bad(format!("slide_grid {} is not divisible by {POOL}", self.slide_grid));
        }
        if self.slide_grid < self.grid {
            return bad(format!("slide_grid {} is smaller than one stack ({})", self.slide_grid, self.grid));
        }
        if self.overlap_px >= self.stack_px || self.overlap_px % p != 0 {
            return bad(format!(
                "overlap {} must be a multiple of patch_px {p} below stack_px {}",
                self.overlap_px, self.stack_px
            ));
        }
        if !(self.mpp > 0.0 && self.mpp.is_finite()) {
            return bad(format!("mpp must be positive, got {}", self.mpp));
        }
        if !(0.0..=1.0).contains(&self.min_foreground_fraction) {
            return bad(format!("min_foreground_fraction {} outside [0,1]", self.min_foreground_fraction));
        }
        if self.max_stacks == 0 {
            return bad("max_stacks must be at least 1".into());
        }
        Ok(())
    }

    pub fn patch_px(&self) -> usize {
        self.stack_px / self.grid
    }

    pub fn stride_px(&self) -> usize {
        self.stack_px - self.overlap_px
    }

    pub fn patches_per_stack(&self) -> usize {
        self.grid * self.grid
    }

    /// Physical side of one patch in millimetres.
    pub fn patch_field_mm(&self) -> f64 {
        self.patch_px() as f64 * self.mpp / 1000.0
    }

    pub fn stack_field_mm(&self) -> f64 {
        self.stack_px as f64 * self.mpp / 1000.0
    }

    /// Physical side covered by the stage-2 grid.
    pub fn slide_field_mm(&self) -> f64 {
        self.slide_grid as f64 * self.patch_px() as f64 * self.mpp / 1000.0
    }

    pub fn slide_px(&self) -> usize {
        self.slide_grid * self.patch_px()
    }

    pub fn pooled_side(&self) -> usize {
        self.slide_grid / POOL
    }

    pub fn pooled_tokens(&self) -> usize {
        self.pooled_side() * self.pooled_side()
    }

    /// Stem stride so that stem × 16 = patch_px.
    pub fn stem_stride(&self) -> usize {
        self.patch_px() / BACKBONE_STAGE_DOWNSAMPLE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_extents() {
        let g = GeometryConfig::default();
        g.validate().unwrap();
        assert_eq!(g.patch_px(), 256);
        assert_eq!(g.pooled_tokens(), 1024);
        assert_eq!(g.stem_stride(), 16);
    }

    #[test]
    fn toy_extents() {
        let g = GeometryConfig::toy();
        g.validate().unwrap();
        assert_eq!(g.patch_px(), 32);
        assert_eq!(g.slide_px(), 768);
        assert_eq!(g.pooled_tokens(), 64);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut g = GeometryConfig::toy();
        g.slide_grid = 25;
        assert!(g.validate().is_err());
        let mut g = GeometryConfig::toy();
        g.overlap_px = 20;
        assert!(g.validate().is_err());
        let mut g = GeometryConfig::toy();
        g.stack_px = 250;
        assert!(g.validate().is_err());
    }
}
