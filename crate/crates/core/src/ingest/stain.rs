//! Reinhard colour transfer in the lαβ opponent space.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::mask::Mask;
use crate::error::{CoreError, Result};

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];
const LMS_FLOOR: f64 = 1e-4;

/// Per-channel mean and standard deviation in lαβ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabStats {
    /// Foreground statistics of an untinted synthetic slide, used as the shipped reference.
    pub fn reference() -> Self {
        Self {
            mean: [-0.2142, -0.0284, 0.0127],
            std: [0.1090, 0.0360, 0.0034],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().chain(&self.mean).any(|v| !v.is_finite()) || self.std.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::Argument(format!("reference stds must be positive: {:?}", self.std)));
        }
        Ok(())
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

fn mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn rgb_to_lab(p: [u8; 3]) -> [f64; 3] {
    let rgb = p.map(|c| c as f64 / 255.0);
    let lms = mul(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
    let (s3, s6, s2) = (3f64.sqrt(), 6f64.sqrt(), 2f64.sqrt());
    [
        (lms[0] + lms[1] + lms[2]) / s3,
        (lms[0] + lms[1] - 2.0 * lms[2]) / s6,
        (lms[0] - lms[1]) / s2,
    ]
}

fn lms_to_rgb() -> &'static [[f64; 3]; 3] {
    static INV: std::sync::OnceLock<[[f64; 3]; 3]> = std::sync::OnceLock::new();
    INV.get_or_init(|| invert3(&RGB_TO_LMS))
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let (a, b, c) = (lab[0] / 3f64.sqrt(), lab[1] / 6f64.sqrt(), lab[2] / 2f64.sqrt());
    let log_lms = [a + b + c, a + b - c, a - 2.0 * b];
    let rgb = mul(lms_to_rgb(), log_lms.map(|v| 10f64.powf(v)));
    rgb.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// lαβ statistics over all pixels, or over the masked ones. `None` when nothing is selected.
pub fn lab_stats(image: &RgbImage, mask: Option<&Mask>) -> Option<LabStats> {
    let mut n = 0usize;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for (x, y, p) in image.enumerate_pixels() {
        if mask.is_some_and(|m| !m.get(x as usize, y as usize)) {
            continue;
        }
        let lab = rgb_to_lab(p.0);
        for c in 0..3 {
            sum[c] += lab[c];
            sq[c] += lab[c] * lab[c];
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mean = sum.map(|s| s / nf);
    let std = [0, 1, 2].map(|c| (sq[c] / nf - mean[c] * mean[c]).max(0.0).sqrt());
    Some(LabStats { mean, std })
}

/// Channels with (numerically) zero spread carry no texture; they map to the reference mean.
const DEGENERATE_STD: f64 = 1e-9;

fn transfer(image: &RgbImage, mask: Option<&Mask>, reference: &LabStats) -> Result<RgbImage> {
    reference.validate()?;
    let Some(src) = lab_stats(image, mask) else {
        return Ok(image.clone());
    };
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.is_some_and(|m| !m.get(x as usize, y as usize)) {
            continue;
        }
        let lab = rgb_to_lab(p.0);
        let mapped = [0, 1, 2].map(|c| {
            if src.std[c] <= DEGENERATE_STD {
                reference.mean[c]
            } else {
                (lab[c] - src.mean[c]) / src.std[c] * reference.std[c] + reference.mean[c]
            }
        });
        p.0 = lab_to_rgb(mapped);
    }
    Ok(out)
}

/// Matches the whole image's lαβ statistics to `reference`.
pub fn stain_normalize(image: &RgbImage, reference: &LabStats) -> Result<RgbImage> {
    transfer(image, None, reference)
}

/// Matches the statistics of the masked pixels to `reference`; other pixels are untouched.
pub fn stain_normalize_masked(image: &RgbImage, mask: &Mask, reference: &LabStats) -> Result<RgbImage> {
    transfer(image, Some(mask), reference)
}
