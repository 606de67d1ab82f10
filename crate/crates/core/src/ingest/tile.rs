use std::cmp::Ordering;

use image::{GrayImage, RgbImage};

use super::mask::{foreground_mask, Mask};
use crate::error::{CoreError, Result};
use crate::geometry::GeometryConfig;
use crate::NUM_CLASSES;

/// One window of the slide cut into `grid × grid` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack {
    pub pixels: RgbImage,
    /// `(row, col)` of the top-left patch in slide patch coordinates.
    pub origin: (usize, usize),
    /// Row-major `grid × grid` patch classes.
    pub labels: Vec<u8>,
    /// Row-major per-patch foreground fractions.
    pub patch_foreground: Vec<f32>,
    pub foreground_fraction: f64,
}

impl PatchStack {
    pub fn grid(&self) -> usize {
        (self.labels.len() as f64).sqrt().round() as usize
    }
}

/// Pixel origins `(y, x)` of every full window, row-major.
pub fn candidate_windows(width: usize, height: usize, cfg: &GeometryConfig) -> Vec<(usize, usize)> {
    let (s, step) = (cfg.stack_px, cfg.stride_px());
    let axis = |n: usize| -> Vec<usize> {
        if n < s {
            return vec![];
        }
        (0..=(n - s) / step).map(|i| i * step).collect()
    };
    let xs = axis(width);
    axis(height)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| (y, x)))
        .collect()
}

pub fn tile_slide(slide: &RgbImage, annotation: &GrayImage, cfg: &GeometryConfig) -> Result<Vec<PatchStack>> {
    tile_slide_with_mask(slide, annotation, &foreground_mask(slide), cfg)
}

/// Tiles `slide` using a precomputed foreground mask (normally taken before stain
/// normalization, which can move pixels across the HSV thresholds).
pub fn tile_slide_with_mask(
    slide: &RgbImage,
    annotation: &GrayImage,
    mask: &Mask,
    cfg: &GeometryConfig,
) -> Result<Vec<PatchStack>> {
    cfg.validate()?;
    let (w, h) = (slide.width() as usize, slide.height() as usize);
    if (annotation.width() as usize, annotation.height() as usize) != (w, h) || (mask.width(), mask.height()) != (w, h) {
        return Err(CoreError::Geometry(format!(
            "slide {}x{}, annotation {}x{}, mask {}x{} differ",
            w,
            h,
            annotation.width(),
            annotation.height(),
            mask.width(),
            mask.height()
        )));
    }
    if w < cfg.stack_px || h < cfg.stack_px {
        return Err(CoreError::Geometry(format!(
            "slide {}x{} is smaller than one {} px stack",
            w, h, cfg.stack_px
        )));
    }
    if let Some(bad) = annotation.pixels().map(|p| p.0[0]).find(|&v| v as usize >= NUM_CLASSES) {
        return Err(CoreError::Argument(format!("annotation contains class {bad}")));
    }

    let s = cfg.stack_px;
    let mut kept: Vec<((usize, usize), f64)> = candidate_windows(w, h, cfg)
        .into_iter()
        .map(|(y, x)| ((y, x), mask.fraction_in(x, y, s, s)))
        .filter(|&(_, f)| f >= cfg.min_foreground_fraction)
        .collect();
    if kept.len() > cfg.max_stacks {
        kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        kept.truncate(cfg.max_stacks);
        kept.sort_by(|a, b| a.0.cmp(&b.0));
    }

    let p = cfg.patch_px();
    Ok(kept
        .into_iter()
        .map(|((y, x), frac)| {
            let pixels = image::imageops::crop_imm(slide, x as u32, y as u32, s as u32, s as u32).to_image();
            let mut labels = Vec::with_capacity(cfg.patches_per_stack());
            let mut patch_foreground = Vec::with_capacity(cfg.patches_per_stack());
            for r in 0..cfg.grid {
                for c in 0..cfg.grid {
                    let (py, px) = (y + r * p, x + c * p);
                    labels.push(majority_label(annotation, px, py, p));
                    patch_foreground.push(mask.fraction_in(px, py, p, p) as f32);
                }
            }
            PatchStack {
                pixels,
                origin: (y / p, x / p),
                labels,
                patch_foreground,
                foreground_fraction: frac,
            }
        })
        .collect())
}

/// Most frequent class in a `p × p` block; ties go to the higher class index.
fn majority_label(ann: &GrayImage, x: usize, y: usize, p: usize) -> u8 {
    let mut hist = [0usize; NUM_CLASSES];
    for yy in y..y + p {
        for xx in x..x + p {
            hist[ann.get_pixel(xx as u32, yy as u32).0[0] as usize] += 1;
        }
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if hist[c] >= hist[best] {
            best = c;
        }
    }
    best as u8
}
