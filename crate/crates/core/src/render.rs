use image::{Rgba, RgbaImage};

use crate::roi::PatchProbabilityMap;
use crate::NUM_CLASSES;

/// NFD green, TA amber, Diff-CA red, Undiff-CA purple, MALT blue.
pub const DEFAULT_PALETTE: [[u8; 3]; NUM_CLASSES] = [[46, 160, 67], [255, 193, 7], [220, 50, 47], [155, 39, 176], [33, 113, 181]];

/// Cells at or below this foreground fraction render transparent.
pub const RENDER_FOREGROUND: f32 = 0.10;

/// Slide-sized RGBA overlay with `cell_px` pixels per patch. Each cell's colour is the
/// probability-weighted palette mix and its alpha the top probability; overlapping
/// maps are averaged; uncovered and background cells stay transparent.
pub fn render_probability_map(
    maps: &[PatchProbabilityMap],
    extent_patches: (usize, usize),
    cell_px: u32,
    palette: &[[u8; 3]; NUM_CLASSES],
) -> RgbaImage {
    let (rows, cols) = extent_patches;
    let mut sum = vec![[0f64; NUM_CLASSES]; rows * cols];
    let mut count = vec![0u32; rows * cols];
    for m in maps {
        for (k, p) in m.probs.iter().enumerate() {
            let (r, c) = (m.origin.0 + k / m.grid, m.origin.1 + k % m.grid);
            if r >= rows || c >= cols || m.foreground[k] <= RENDER_FOREGROUND {
                continue;
            }
            let i = r * cols + c;
            count[i] += 1;
            for (s, v) in sum[i].iter_mut().zip(p) {
                *s += v;
            }
        }
    }
    let cells: Vec<Rgba<u8>> = (0..rows * cols)
        .map(|i| {
            if count[i] == 0 {
                return Rgba([0, 0, 0, 0]);
            }
            let p = sum[i].map(|s| s / count[i] as f64);
            let mut rgb = [0f64; 3];
            for (c, pc) in p.iter().enumerate() {
                for ch in 0..3 {
                    rgb[ch] += pc * palette[c][ch] as f64;
                }
            }
            let total: f64 = p.iter().sum();
            let alpha = p.iter().copied().fold(0.0, f64::max);
            let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            Rgba([q(rgb[0] / total), q(rgb[1] / total), q(rgb[2] / total), q(alpha * 255.0)])
        })
        .collect();
    RgbaImage::from_fn(cols as u32 * cell_px, rows as u32 * cell_px, |x, y| {
        cells[(y / cell_px) as usize * cols + (x / cell_px) as usize]
    })
}
