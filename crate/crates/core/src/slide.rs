//! Stage 2: stage-1 tokens laid out on the slide grid, 3×3 max pooling, and a
//! class-token transformer classifier. Also the Top-K mean baseline.

use mshvit_tensor::nn::{encoder_block, LAYER_NORM_EPS};
use mshvit_tensor::{softmax, Element, Graph, Reduction, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{GeometryConfig, POOL};
use crate::params::{block_specs, block_vars, spec, Bound, Init, ParamSpec};
use crate::roi::{argmax_lowest, PatchProbabilityMap};
use crate::{CLASS_NAMES, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl SlideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.mlp_ratio == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "slide d_model {} must be positive and divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

pub fn slide_param_specs(cfg: &SlideConfig, geom: &GeometryConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut v = vec![
        spec("cls", &[1, d], Init::Zeros),
        spec("pos", &[geom.pooled_tokens() + 1, d], Init::TruncNormal(0.02)),
    ];
    for i in 0..cfg.depth {
        v.extend(block_specs(&format!("blocks.{i}"), d, d * cfg.mlp_ratio));
    }
    v.extend([
        spec("norm.g", &[d], Init::Ones),
        spec("norm.b", &[d], Init::Zeros),
        spec("head.w", &[d, NUM_CLASSES], Init::TruncNormal(0.02)),
        spec("head.b", &[NUM_CLASSES], Init::Zeros),
    ]);
    v
}

/// Stage-1 tokens on the slide patch lattice, stored position-major (`[side, side, d]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SlideFeatureGrid {
    pub side: usize,
    pub d: usize,
    pub features: Vec<f32>,
    pub occupancy: Vec<bool>,
}

impl SlideFeatureGrid {
    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.side + c) * self.d;
        &self.features[i..i + self.d]
    }

    /// Channel-major `[d, side, side]` copy for the pooling kernel.
    pub fn to_chw<T: Element>(&self) -> Tensor<T> {
        let n = self.side * self.side;
        let mut data = vec![T::zero(); self.d * n];
        for pos in 0..n {
            for ch in 0..self.d {
                data[ch * n + pos] = T::from_f64_lossy(self.features[pos * self.d + ch] as f64);
            }
        }
        Tensor::new([self.d, self.side, self.side], data).expect("extent matches")
    }
}

/// Offset subtracted from every origin so that stacks fit the slide grid. Zero when the
/// stacks already fit; otherwise the grid is centred on the occupied bounding box.
pub fn crop_offset(origins: &[(usize, usize)], grid: usize, slide_grid: usize) -> Result<(usize, usize)> {
    if origins.is_empty() {
        return Ok((0, 0));
    }
    let axis = |vals: Vec<usize>| -> Result<usize> {
        let lo = *vals.iter().min().unwrap();
        let hi = vals.iter().max().unwrap() + grid;
        if hi <= slide_grid {
            return Ok(0);
        }
        if hi - lo > slide_grid {
            return Err(CoreError::Geometry(format!(
                "occupied extent {} patches exceeds the {slide_grid}-patch slide grid",
                hi - lo
            )));
        }
        let centre = (lo + hi) / 2;
        Ok(centre.saturating_sub(slide_grid / 2).clamp(hi - slide_grid, lo))
    };
    Ok((
        axis(origins.iter().map(|o| o.0).collect())?,
        axis(origins.iter().map(|o| o.1).collect())?,
    ))
}

/// Places each stack's `[grid², d]` tokens at its origin. Overlaps are averaged; the
/// contributions are summed in a canonical order so the result is independent of input order.
pub fn assemble_slide_grid(stacks: &[((usize, usize), &Tensor<f32>)], grid: usize, slide_grid: usize) -> Result<SlideFeatureGrid> {
    let d = match stacks.first() {
        Some((_, t)) => t.last_dim(),
        None => 0,
    };
    for (origin, t) in stacks {
        if t.shape() != [grid * grid, d] {
            return Err(CoreError::Geometry(format!("tokens {:?}, expected [{}, {d}]", t.shape(), grid * grid)));
        }
        if origin.0 + grid > slide_grid || origin.1 + grid > slide_grid {
            return Err(CoreError::Geometry(format!(
                "stack at {origin:?} leaves the {slide_grid}x{slide_grid} slide grid"
            )));
        }
    }
    let mut order: Vec<usize> = (0..stacks.len()).collect();
    order.sort_by(|&a, &b| {
        stacks[a].0.cmp(&stacks[b].0).then_with(|| {
            let (x, y) = (stacks[a].1.data(), stacks[b].1.data());
            x.iter().map(|v| v.to_bits()).cmp(y.iter().map(|v| v.to_bits()))
        })
    });
    let n = slide_grid * slide_grid;
    let mut sum = vec![0f64; n * d];
    let mut count = vec![0u32; n];
    for i in order {
        let ((r0, c0), t) = stacks[i];
        for (k, tok) in t.data().chunks(d).enumerate() {
            let pos = (r0 + k / grid) * slide_grid + c0 + k % grid;
            count[pos] += 1;
            for (s, v) in sum[pos * d..(pos + 1) * d].iter_mut().zip(tok) {
                *s += *v as f64;
            }
        }
    }
    let features = sum
        .iter()
        .enumerate()
        .map(|(i, s)| match count[i / d.max(1)] {
            0 => 0.0,
            c => (s / c as f64) as f32,
        })
        .collect();
    Ok(SlideFeatureGrid {
        side: slide_grid,
        d,
        features,
        occupancy: count.iter().map(|&c| c > 0).collect(),
    })
}

/// Channel-wise max over non-overlapping 3×3 windows, flattened row-major to `[(side/3)², d]`.
pub fn pool_slide_grid(grid: &SlideFeatureGrid) -> Result<Tensor<f32>> {
    if grid.side % POOL != 0 {
        return Err(CoreError::Geometry(format!("slide grid {} is not divisible by {POOL}", grid.side)));
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(grid.to_chw());
    let pooled = pool_in_graph(&mut g, x)?;
    Ok(g.value(pooled).clone())
}

fn pool_in_graph<T: Element>(g: &mut Graph<T>, chw: Var) -> Result<Var> {
    let d = g.shape(chw)[0];
    let p = g.max_pool2d(chw, POOL, POOL, true)?;
    let n = g.shape(p)[1] * g.shape(p)[2];
    let flat = g.reshape(p, &[d, n])?;
    Ok(g.transpose(flat)?)
}

/// Class-token encoder over pooled tokens `[n, d]`; returns `[1, 5]` logits.
pub fn classify_pooled<T: Element>(g: &mut Graph<T>, b: &Bound, cfg: &SlideConfig, pooled: Var) -> Result<Var> {
    let pos = b.get("pos")?;
    let want = g.shape(pos)[0] - 1;
    let have = g.shape(pooled).to_vec();
    if have.len() != 2 || have[0] != want || have[1] != cfg.d_model {
        return Err(CoreError::Config(format!(
            "slide classifier expects [{want}, {}] pooled tokens, got {have:?}",
            cfg.d_model
        )));
    }
    let seq = g.concat_rows(&[b.get("cls")?, pooled])?;
    let mut z = g.add(seq, pos)?;
    for i in 0..cfg.depth {
        z = encoder_block(g, z, &block_vars(b, &format!("blocks.{i}"))?, cfg.heads)?;
    }
    let z = g.layer_norm(z, b.get("norm.g")?, b.get("norm.b")?, LAYER_NORM_EPS)?;
    let o = g.row_slice(z, 0, 1)?;
    Ok(g.linear(o, b.get("head.w")?, Some(b.get("head.b")?))?)
}

/// Pooling plus classification from a channel-major `[d, side, side]` grid.
pub fn slide_forward<T: Element>(g: &mut Graph<T>, b: &Bound, cfg: &SlideConfig, chw: Var) -> Result<Var> {
    let pooled = pool_in_graph(g, chw)?;
    classify_pooled(g, b, cfg, pooled)
}

/// `−w[label] · log softmax(logits)[label]` for one slide.
pub fn slide_loss<T: Element>(g: &mut Graph<T>, logits: Var, label: usize, weights: &[T]) -> Result<Var> {
    if weights.iter().any(|w| !(*w > T::zero())) {
        return Err(CoreError::Argument("class weights must be positive".into()));
    }
    Ok(g.cross_entropy(logits, &[label], Some(weights), Reduction::Sum)?)
}

/// Inverse class frequency normalized to mean 1. Absent classes count as one slide.
pub fn inverse_frequency_weights(hist: &[usize; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let inv = hist.map(|h| 1.0 / h.max(1) as f64);
    let mean = inv.iter().sum::<f64>() / NUM_CLASSES as f64;
    inv.map(|v| v / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideDiagnosis {
    /// Percentages summing to 100.
    pub scores: [f64; NUM_CLASSES],
    pub predicted_class: usize,
}

impl SlideDiagnosis {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let t = Tensor::new([1, NUM_CLASSES], logits.to_vec())?;
        let p = softmax(&t)?;
        let mut scores = [0.0; NUM_CLASSES];
        for (s, v) in scores.iter_mut().zip(p.data()) {
            *s = v * 100.0;
        }
        Ok(Self {
            predicted_class: argmax_lowest(&scores),
            scores,
        })
    }

    /// Rescales non-negative raw scores to percentages.
    pub fn from_raw(raw: [f64; NUM_CLASSES]) -> Self {
        let total: f64 = raw.iter().sum();
        let scores = if total > 0.0 {
            raw.map(|v| v / total * 100.0)
        } else {
            [100.0 / NUM_CLASSES as f64; NUM_CLASSES]
        };
        Self {
            predicted_class: argmax_lowest(&scores),
            scores,
        }
    }

    /// Diagnosis for a slide without any tissue stacks.
    pub fn empty() -> Self {
        let mut scores = [0.0; NUM_CLASSES];
        scores[0] = 100.0;
        Self {
            scores,
            predicted_class: 0,
        }
    }

    pub fn class_name(&self) -> &'static str {
        CLASS_NAMES[self.predicted_class]
    }

    pub fn export(&self, slide_id: &str) -> DiagnosisExport {
        DiagnosisExport {
            slide_id: slide_id.to_string(),
            scores: self.scores,
            predicted_class: self.predicted_class,
            class_name: self.class_name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisExport {
    pub slide_id: String,
    pub scores: [f64; NUM_CLASSES],
    pub predicted_class: usize,
    pub class_name: String,
}

pub const DEFAULT_TOP_K: usize = 10;

/// Per class, the mean of the `k` highest cell probabilities over foreground cells
/// (`foreground > threshold`), then rescaled to percentages.
pub fn topk_mean_baseline(maps: &[PatchProbabilityMap], k: usize, threshold: f64) -> Result<(SlideDiagnosis, [f64; NUM_CLASSES])> {
    if k == 0 {
        return Err(CoreError::Argument("K must be at least 1".into()));
    }
    let cells: Vec<&[f64; NUM_CLASSES]> = maps
        .iter()
        .flat_map(|m| m.probs.iter().zip(&m.foreground))
        .filter(|(_, &f)| f as f64 > threshold)
        .map(|(p, _)| p)
        .collect();
    if cells.is_empty() {
        return Err(CoreError::EmptySlide);
    }
    let mut raw = [0.0; NUM_CLASSES];
    for (c, r) in raw.iter_mut().enumerate() {
        let mut col: Vec<f64> = cells.iter().map(|p| p[c]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        let take = k.min(col.len());
        *r = col[..take].iter().sum::<f64>() / take as f64;
    }
    Ok((SlideDiagnosis::from_raw(raw), raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_from_histogram() {
        let w = inverse_frequency_weights(&[10, 10, 20, 40, 20]);
        let inv = [0.1, 0.1, 0.05, 0.025, 0.05];
        let mean: f64 = inv.iter().sum::<f64>() / 5.0;
        for c in 0..5 {
            assert!((w[c] - inv[c] / mean).abs() < 1e-12);
        }
        assert!((w[0] - 20.0 / 13.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn crop_centres_on_bounding_box() {
        assert_eq!(crop_offset(&[(0, 0), (8, 8)], 8, 24).unwrap(), (0, 0));
        // occupied rows 10..34 (24 patches), must shift by 10
        assert_eq!(crop_offset(&[(10, 0), (26, 0)], 8, 24).unwrap(), (10, 0));
        assert!(crop_offset(&[(0, 0), (40, 0)], 8, 24).is_err());
    }

    #[test]
    fn empty_diagnosis_is_nfd() {
        let d = SlideDiagnosis::empty();
        assert_eq!(d.predicted_class, 0);
        assert_eq!(d.scores.iter().sum::<f64>(), 100.0);
    }
}
