//! Procedural slides with per-pixel class annotations.
//!
//! Tissue and lesion regions are laid out on a coarse cell lattice (one cell per patch
//! at the desk geometry) from thresholded value noise, then filled with per-class
//! textures. Each slide draws from its own ChaCha stream, so generation parallelizes
//! across slides without changing the output.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ingest::{write_manifest, DatasetManifest, ManifestRecord, Split};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Round filled blobs.
    Blob,
    /// Filled ellipses with random orientation.
    Gland,
    /// Annuli.
    Ring,
    /// Single-pixel-scale dots at random positions.
    Speckle,
    /// Dots on a jittered square lattice.
    Carpet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub kind: TextureKind,
    pub base: [u8; 3],
    pub blob: [u8; 3],
    /// Structures per 1000 px².
    pub density: f64,
    /// Characteristic radius in pixels.
    pub scale: f64,
    /// Uniform per-channel pixel noise amplitude.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexturePolicy {
    pub classes: [ClassTexture; NUM_CLASSES],
}

impl Default for ClassTexturePolicy {
    fn default() -> Self {
        use TextureKind::*;
        let t = |kind, base, blob, density, scale| ClassTexture {
            kind,
            base,
            blob,
            density,
            scale,
            noise: 6.0,
        };
        Self {
            classes: [
                t(Blob, [236, 190, 214], [212, 150, 196], 0.6, 4.0),
                t(Gland, [228, 172, 204], [160, 96, 176], 2.2, 11.0),
                t(Ring, [220, 160, 200], [112, 58, 150], 6.0, 5.0),
                t(Speckle, [220, 160, 200], [112, 58, 150], 80.0, 1.0),
                t(Carpet, [214, 170, 218], [88, 72, 168], 28.0, 1.6),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Side of the layout lattice cell; tissue and lesion boundaries fall on it.
    pub cell_px: usize,
    /// Minimum slide side, normally one stack.
    pub min_extent: usize,
    pub tissue_fraction: (f64, f64),
    /// Share of tissue cells given to the lesion on non-NFD slides.
    pub lesion_fraction: (f64, f64),
    /// Maximum relative change of stain optical density per channel.
    pub tint: f64,
    pub textures: ClassTexturePolicy,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cell_px: 32,
            min_extent: 256,
            tissue_fraction: (0.45, 0.7),
            lesion_fraction: (0.3, 0.6),
            tint: 0.08,
            textures: ClassTexturePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub image: RgbImage,
    pub annotation: GrayImage,
    pub slide_label: usize,
    pub seed: u64,
}

/// Mixes a dataset seed with a slide index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bilinear value noise on an `n × n` lattice with knots every `spacing` cells.
fn value_noise(rng: &mut ChaCha8Rng, n: usize, spacing: f64) -> Vec<f64> {
    let knots = (n as f64 / spacing).ceil() as usize + 2;
    let k: Vec<f64> = (0..knots * knots).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (fy, fx) = (r as f64 / spacing, c as f64 / spacing);
            let (y0, x0) = (fy as usize, fx as usize);
            let (ty, tx) = (smooth(fy - y0 as f64), smooth(fx - x0 as f64));
            let at = |y: usize, x: usize| k[y * knots + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Indices of the `count` largest values (ties by index).
fn top_cells(values: &[f64], candidates: &[usize], count: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

pub fn synth_slide(class: usize, seed: u64, extent: usize) -> Result<SyntheticSlide> {
    synth_slide_with(&SynthConfig::default(), class, seed, extent)
}

pub fn synth_slide_with(cfg: &SynthConfig, class: usize, seed: u64, extent: usize) -> Result<SyntheticSlide> {
    if class >= NUM_CLASSES {
        return Err(CoreError::Argument(format!("class {class} out of range")));
    }
    if extent < cfg.min_extent || extent < cfg.cell_px || cfg.cell_px == 0 {
        return Err(CoreError::Geometry(format!(
            "extent {extent} is smaller than the minimum {}",
            cfg.min_extent.max(cfg.cell_px)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = extent.div_ceil(cfg.cell_px);
    let n = cells * cells;

    let tissue_noise = value_noise(&mut rng, cells, 6.0);
    let tissue_frac = rng.random_range(cfg.tissue_fraction.0..=cfg.tissue_fraction.1);
    let all: Vec<usize> = (0..n).collect();
    let tissue = top_cells(&tissue_noise, &all, ((n as f64) * tissue_frac).round().max(1.0) as usize);

    let mut cell_class = vec![None::<usize>; n];
    for &i in &tissue {
        cell_class[i] = Some(0);
    }
    let lesion_noise = value_noise(&mut rng, cells, 4.0);
    let lesion_frac = rng.random_range(cfg.lesion_fraction.0..=cfg.lesion_fraction.1);
    if class > 0 {
        let count = ((tissue.len() as f64) * lesion_frac).round().max(1.0) as usize;
        for i in top_cells(&lesion_noise, &tissue, count) {
            cell_class[i] = Some(class);
        }
    }

    let tint: [f64; 3] = [0; 3].map(|_| 1.0 + rng.random_range(-cfg.tint..=cfg.tint));
    let cell_at = |x: usize, y: usize| cell_class[(y / cfg.cell_px) * cells + x / cfg.cell_px];

    // Base layer: white glass or the class stroma colour, both with pixel noise.
    let mut buf = vec![[0f64; 3]; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let px = &mut buf[y * extent + x];
            match cell_at(x, y) {
                None => {
                    let v = 250.0 + rng.random_range(-3.0..=3.0);
                    *px = [v, v + rng.random_range(-1.0..=1.0), v + rng.random_range(-1.0..=1.0)];
                }
                Some(c) => {
                    let t = &cfg.textures.classes[c];
                    *px = t.base.map(|b| b as f64 + rng.random_range(-t.noise..=t.noise));
                }
            }
        }
    }
    let mut present = vec![false; NUM_CLASSES];
    cell_class.iter().flatten().for_each(|&c| present[c] = true);
    for c in 0..NUM_CLASSES {
        if present[c] {
            paint_structures(&mut buf, extent, &cfg.textures.classes[c], &mut rng, |x, y| cell_at(x, y) == Some(c));
        }
    }

    let image = RgbImage::from_fn(extent as u32, extent as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let v = buf[y * extent + x];
        let out = if cell_at(x, y).is_some() {
            [0, 1, 2].map(|c| 255.0 - (255.0 - v[c]) * tint[c])
        } else {
            v
        };
        Rgb(out.map(|c| c.round().clamp(0.0, 255.0) as u8))
    });
    let annotation = GrayImage::from_fn(extent as u32, extent as u32, |x, y| {
        Luma([cell_at(x as usize, y as usize).unwrap_or(0) as u8])
    });
    Ok(SyntheticSlide {
        image,
        annotation,
        slide_label: class,
        seed,
    })
}

fn blend(px: &mut [f64; 3], color: [u8; 3], alpha: f64) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] as f64 * alpha;
    }
}

/// Rasterizes one class's structures, restricted to pixels where `inside` holds.
fn paint_structures(
    buf: &mut [[f64; 3]],
    extent: usize,
    t: &ClassTexture,
    rng: &mut ChaCha8Rng,
    inside: impl Fn(usize, usize) -> bool,
) {
    let area = (extent * extent) as f64;
    let mut stamp = |cx: f64, cy: f64, reach: f64, cover: &dyn Fn(f64, f64) -> f64| {
        let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(extent - 1));
        let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(extent - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = cover(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if a > 0.0 && inside(x, y) {
                    blend(&mut buf[y * extent + x], t.blob, a.min(1.0));
                }
            }
        }
    };
    match t.kind {
        TextureKind::Carpet => {
            let spacing = (1000.0 / t.density).sqrt();
            let steps = (extent as f64 / spacing).ceil() as usize + 1;
            for i in 0..steps {
                for j in 0..steps {
                    let cx = j as f64 * spacing + rng.random_range(-1.0..=1.0);
                    let cy = i as f64 * spacing + rng.random_range(-1.0..=1.0);
                    let r = t.scale * rng.random_range(0.85..=1.15);
                    stamp(cx, cy, r + 1.0, &|dx, dy| r + 0.5 - (dx * dx + dy * dy).sqrt());
                }
            }
        }
        kind => {
            let count = (area / 1000.0 * t.density).round() as usize;
            for _ in 0..count {
                let cx = rng.random_range(0.0..extent as f64);
                let cy = rng.random_range(0.0..extent as f64);
                let jitter: f64 = rng.random_range(0.75..=1.25);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let r = t.scale * jitter;
                match kind {
                    TextureKind::Blob | TextureKind::Speckle => {
                        stamp(cx, cy, r + 1.0, &|dx, dy| r + 0.5 - (dx * dx + dy * dy).sqrt())
                    }
                    TextureKind::Ring => {
                        let half = 1.0;
                        stamp(cx, cy, r + 2.0, &|dx, dy| half + 0.5 - ((dx * dx + dy * dy).sqrt() - r).abs())
                    }
                    TextureKind::Gland => {
                        let (a, b) = (r, (r * 0.25).max(1.5));
                        let (cs, sn) = (angle.cos(), angle.sin());
                        stamp(cx, cy, a + 1.0, &|dx, dy| {
                            let u = (dx * cs + dy * sn) / a;
                            let v = (-dx * sn + dy * cs) / b;
                            (1.0 - (u * u + v * v).sqrt()) * b + 0.5
                        })
                    }
                    TextureKind::Carpet => unreachable!(),
                }
            }
        }
    }
}

/// How each class's slides are divided between the splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitPlan {
    /// 16 / 4 / 10 out of 30 slides per class.
    fn default() -> Self {
        Self {
            val_fraction: 4.0 / 30.0,
            test_fraction: 1.0 / 3.0,
        }
    }
}

impl SplitPlan {
    /// Split of the `i`-th of `n` slides of one class: train first, then val, then test.
    pub fn assign(&self, i: usize, n: usize) -> Split {
        let test = (n as f64 * self.test_fraction).round() as usize;
        let val = (n as f64 * self.val_fraction).round() as usize;
        let train = n.saturating_sub(test + val);
        if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub counts: [usize; NUM_CLASSES],
    pub extent: usize,
    pub mpp: f64,
    pub split: SplitPlan,
    pub synth: SynthConfig,
}

impl DatasetSpec {
    pub fn new(counts: [usize; NUM_CLASSES], extent: usize) -> Self {
        Self {
            counts,
            extent,
            mpp: 0.485,
            split: SplitPlan::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Writes `slide_XXXX.png` / `slide_XXXX_ann.png` pairs and `manifest.jsonl` into `dir`.
/// Slides are numbered class by class.
pub fn synth_dataset(spec: &DatasetSpec, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let mut jobs = Vec::new();
    for (class, &count) in spec.counts.iter().enumerate() {
        for i in 0..count {
            jobs.push((jobs.len(), class, spec.split.assign(i, count)));
        }
    }
    let records: Vec<ManifestRecord> = jobs
        .par_iter()
        .map(|&(index, class, split)| {
            let slide = synth_slide_with(&spec.synth, class, derive_seed(seed, index as u64), spec.extent)?;
            let name = format!("slide_{index:04}.png");
            let ann = format!("slide_{index:04}_ann.png");
            save_png(&slide.image, &dir.join(&name))?;
            save_png(&slide.annotation, &dir.join(&ann))?;
            Ok(ManifestRecord {
                slide_path: name.into(),
                annotation_path: ann.into(),
                slide_label: slide.slide_label,
                split,
                mpp: spec.mpp,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&records, &dir.join("manifest.jsonl"))?;
    Ok(DatasetManifest {
        records: records
            .into_iter()
            .map(|mut r| {
                r.slide_path = dir.join(&r.slide_path);
                r.annotation_path = dir.join(&r.annotation_path);
                r
            })
            .collect(),
    })
}

pub(crate) fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CoreError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_plan_thirty() {
        let plan = SplitPlan::default();
        let splits: Vec<Split> = (0..30).map(|i| plan.assign(i, 30)).collect();
        assert_eq!(splits.iter().filter(|s| **s == Split::Train).count(), 16);
        assert_eq!(splits.iter().filter(|s| **s == Split::Val).count(), 4);
        assert_eq!(splits.iter().filter(|s| **s == Split::Test).count(), 10);
    }

    #[test]
    fn seeds_differ_by_index() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn lesion_cells_carry_the_class() {
        let s = synth_slide(2, 5, 256).unwrap();
        let hist = s.annotation.pixels().fold([0usize; 5], |mut h, p| {
            h[p.0[0] as usize] += 1;
            h
        });
        assert!(hist[2] > 0);
        assert_eq!(hist[1] + hist[3] + hist[4], 0);
    }
}
