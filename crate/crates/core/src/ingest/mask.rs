use image::RgbImage;

pub const SATURATION_MIN: f64 = 0.07;
pub const VALUE_MAX: f64 = 0.95;

/// HSV rule: saturation above 0.07 and value below 0.95.
pub fn is_foreground(p: [u8; 3]) -> bool {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    if max == 0 {
        return false;
    }
    let v = max as f64 / 255.0;
    let s = (max - min) as f64 / max as f64;
    s > SATURATION_MIN && v < VALUE_MAX
}

/// Binary foreground raster with a summed-area table for O(1) window fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    integral: Vec<u64>,
}

impl Mask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        let mut integral = vec![0u64; (width + 1) * (height + 1)];
        for y in 0..height {
            let mut row = 0u64;
            for x in 0..width {
                row += bits[y * width + x] as u64;
                integral[(y + 1) * (width + 1) + x + 1] = integral[y * (width + 1) + x + 1] + row;
            }
        }
        Self {
            width,
            height,
            bits,
            integral,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> u64 {
        self.integral[self.integral.len() - 1]
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.bits.len() as f64
    }

    /// Foreground count inside `[x, x+w) × [y, y+h)`.
    pub fn count_in(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        let s = self.width + 1;
        let (x1, y1) = (x + w, y + h);
        self.integral[y1 * s + x1] + self.integral[y * s + x] - self.integral[y * s + x1] - self.integral[y1 * s + x]
    }

    pub fn fraction_in(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        if w == 0 || h == 0 {
            return 0.0;
        }
        self.count_in(x, y, w, h) as f64 / (w * h) as f64
    }
}

pub fn foreground_mask(image: &RgbImage) -> Mask {
    Mask::from_fn(image.width() as usize, image.height() as usize, |x, y| {
        is_foreground(image.get_pixel(x as u32, y as u32).0)
    })
}
