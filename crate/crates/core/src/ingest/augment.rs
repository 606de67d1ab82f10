//! Seeded stack augmentation. Geometric transforms move pixels, labels and patch
//! foreground together; photometric ones touch pixels only.

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tile::PatchStack;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotate: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Scale factor drawn uniformly from `[1 - jitter, 1 + jitter]`.
    pub scale_jitter: f64,
    pub color_jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
    pub solarize_threshold: u8,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotate: true,
            hflip_p: 0.5,
            vflip_p: 0.5,
            scale_jitter: 0.1,
            color_jitter_p: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.02,
            blur_p: 0.1,
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.2,
            solarize_threshold: 128,
        }
    }
}

impl AugmentPolicy {
    /// Nothing applied.
    pub fn identity() -> Self {
        Self {
            rotate: false,
            hflip_p: 0.0,
            vflip_p: 0.0,
            scale_jitter: 0.0,
            color_jitter_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("color_jitter_p", self.color_jitter_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let mags = [
            ("scale_jitter", self.scale_jitter),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (name, m) in mags {
            if !(0.0..1.0).contains(&m) {
                return Err(CoreError::Config(format!("{name} = {m} must lie in [0, 1)")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(CoreError::Config(format!("hue = {} must lie in [0, 0.5]", self.hue)));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(CoreError::Config(format!("blur_sigma range ({lo}, {hi}) is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricDraw {
    /// Clockwise quarter turns.
    pub k: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub scale: f64,
}

impl GeometricDraw {
    pub const IDENTITY: Self = Self {
        k: 0,
        hflip: false,
        vflip: false,
        scale: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricDraw {
    pub color: Option<[f64; 4]>,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

/// All random numbers are drawn in a fixed order whatever the policy, so changing one
/// probability never shifts the others' draws.
pub fn draw(rng: &mut ChaCha8Rng, policy: &AugmentPolicy) -> (GeometricDraw, PhotometricDraw) {
    let k: u8 = rng.random_range(0..4);
    let hflip = rng.random::<f64>() < policy.hflip_p;
    let vflip = rng.random::<f64>() < policy.vflip_p;
    let s: f64 = rng.random_range(-1.0..=1.0);
    let color_on = rng.random::<f64>() < policy.color_jitter_p;
    let factors: [f64; 4] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    let blur_on = rng.random::<f64>() < policy.blur_p;
    let t: f64 = rng.random();
    let solarize = rng.random::<f64>() < policy.solarize_p;
    let geo = GeometricDraw {
        k: if policy.rotate { k } else { 0 },
        hflip,
        vflip,
        scale: 1.0 + s * policy.scale_jitter,
    };
    let color = color_on.then(|| {
        [
            1.0 + factors[0] * policy.brightness,
            1.0 + factors[1] * policy.contrast,
            1.0 + factors[2] * policy.saturation,
            factors[3] * policy.hue,
        ]
    });
    let (lo, hi) = policy.blur_sigma;
    let photo = PhotometricDraw {
        color,
        blur_sigma: blur_on.then(|| lo + t * (hi - lo)),
        solarize,
    };
    (geo, photo)
}

pub fn augment(stack: &PatchStack, seed: u64, policy: &AugmentPolicy) -> Result<PatchStack> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (geo, photo) = draw(&mut rng, policy);
    let mut out = apply_geometric(stack, &geo);
    apply_photometric(&mut out.pixels, &photo, policy.solarize_threshold);
    Ok(out)
}

fn rotate_grid<T: Copy>(v: &[T], n: usize, k: u8) -> Vec<T> {
    let mut cur = v.to_vec();
    for _ in 0..k {
        // clockwise: new[r][c] = old[n-1-c][r]
        cur = (0..n * n).map(|i| cur[(n - 1 - i % n) * n + i / n]).collect();
    }
    cur
}

fn flip_grid<T: Copy>(v: &[T], n: usize, horizontal: bool) -> Vec<T> {
    (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            if horizontal {
                v[r * n + (n - 1 - c)]
            } else {
                v[(n - 1 - r) * n + c]
            }
        })
        .collect()
}

/// Source coordinate under a centre-anchored zoom by `scale`, or `None` outside the stack.
fn zoom_source(dst_center: f64, side: f64, scale: f64) -> Option<f64> {
    let s = (dst_center - side / 2.0) / scale + side / 2.0;
    (s >= 0.0 && s < side).then_some(s)
}

pub fn apply_geometric(stack: &PatchStack, g: &GeometricDraw) -> PatchStack {
    let n = stack.grid();
    let mut pixels = match g.k % 4 {
        1 => imageops::rotate90(&stack.pixels),
        2 => imageops::rotate180(&stack.pixels),
        3 => imageops::rotate270(&stack.pixels),
        _ => stack.pixels.clone(),
    };
    let mut labels = rotate_grid(&stack.labels, n, g.k % 4);
    let mut fg = rotate_grid(&stack.patch_foreground, n, g.k % 4);
    if g.hflip {
        imageops::flip_horizontal_in_place(&mut pixels);
        labels = flip_grid(&labels, n, true);
        fg = flip_grid(&fg, n, true);
    }
    if g.vflip {
        imageops::flip_vertical_in_place(&mut pixels);
        labels = flip_grid(&labels, n, false);
        fg = flip_grid(&fg, n, false);
    }
    if g.scale != 1.0 {
        let side = pixels.width() as f64;
        let src = pixels;
        pixels = RgbImage::from_fn(src.width(), src.height(), |x, y| {
            match (
                zoom_source(x as f64 + 0.5, side, g.scale),
                zoom_source(y as f64 + 0.5, side, g.scale),
            ) {
                (Some(sx), Some(sy)) => *src.get_pixel(sx as u32, sy as u32),
                _ => Rgb([255, 255, 255]),
            }
        });
        let patch = side / n as f64;
        let mut new_labels = vec![0u8; n * n];
        let mut new_fg = vec![0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                let sy = zoom_source((r as f64 + 0.5) * patch, side, g.scale);
                let sx = zoom_source((c as f64 + 0.5) * patch, side, g.scale);
                if let (Some(sx), Some(sy)) = (sx, sy) {
                    let (pr, pc) = ((sy / patch) as usize, (sx / patch) as usize);
                    new_labels[r * n + c] = labels[pr * n + pc];
                    new_fg[r * n + c] = fg[pr * n + pc];
                }
            }
        }
        labels = new_labels;
        fg = new_fg;
    }
    PatchStack {
        pixels,
        origin: stack.origin,
        labels,
        patch_foreground: fg,
        foreground_fraction: stack.foreground_fraction,
    }
}

fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        (p[2] - p[0]) / d + 2.0
    } else {
        (p[0] - p[1]) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn apply_photometric(img: &mut RgbImage, d: &PhotometricDraw, solarize_threshold: u8) {
    if let Some([brightness, contrast, saturation, hue]) = d.color {
        color_jitter(img, brightness, contrast, saturation, hue);
    }
    if let Some(sigma) = d.blur_sigma {
        *img = gaussian_blur(img, sigma);
    }
    if d.solarize {
        for p in img.pixels_mut() {
            for v in p.0.iter_mut() {
                if *v >= solarize_threshold {
                    *v = 255 - *v;
                }
            }
        }
    }
}

fn color_jitter(img: &mut RgbImage, brightness: f64, contrast: f64, saturation: f64, hue: f64) {
    let n = (img.width() * img.height()) as f64;
    let mean_gray = img
        .pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .sum::<f64>()
        / n.max(1.0)
        / 255.0
        * brightness;
    for p in img.pixels_mut() {
        let mut c = p.0.map(|v| (v as f64 / 255.0 * brightness).min(1.0));
        c = c.map(|v| ((v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0));
        let gray = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        c = c.map(|v| ((v - gray) * saturation + gray).clamp(0.0, 1.0));
        if hue != 0.0 {
            let mut hsv = rgb_to_hsv(c);
            hsv[0] += hue;
            c = hsv_to_rgb(hsv);
        }
        p.0 = c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &Vec<[f64; 3]>, horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (ki, k) in kernel.iter().enumerate() {
                    let o = ki as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    let v = src[(sy * w + sx) as usize];
                    for c in 0..3 {
                        acc[c] += k * v[c];
                    }
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    };
    let src: Vec<[f64; 3]> = img.pixels().map(|p| p.0.map(|v| v as f64)).collect();
    let out = pass(&pass(&src, true), false);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        Rgb(out[(y as i64 * w + x as i64) as usize].map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rotation_matches_image_rotation() {
        // 2×2 grid of patch ids painted into a 4×4 image
        let v = [0u8, 1, 2, 3];
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb([v[(y / 2 * 2 + x / 2) as usize], 0, 0]));
        let rot = imageops::rotate90(&img);
        let rg = rotate_grid(&v, 2, 1);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(rot.get_pixel(c * 2, r * 2).0[0], rg[(r * 2 + c) as usize]);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.9, 0.6, 0.8], [0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [1.0, 0.0, 0.0]] {
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for c in 0..3 {
                assert!((back[c] - p[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = RgbImage::from_pixel(9, 7, Rgb([200, 100, 50]));
        assert_eq!(gaussian_blur(&img, 1.3), img);
    }
}
