//! Stage 1: per-patch residual CNN features, a transformer encoder over the stack's
//! patch tokens, and a linear five-class head per token.

use image::RgbImage;
use mshvit_tensor::nn::encoder_block;
use mshvit_tensor::{softmax, Element, Graph, Reduction, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::GeometryConfig;
use crate::params::{block_specs, block_vars, spec, Bound, Init, ParamSet, ParamSpec};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub stem_width: usize,
    pub widths: [usize; 4],
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Run the backbone on each patch separately so features never see a neighbour.
    pub strict_locality: bool,
    /// Sum the per-patch losses instead of averaging them.
    pub loss_sum: bool,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            stem_width: 8,
            widths: [16, 24, 32, 48],
            d_model: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            strict_locality: true,
            loss_sum: false,
        }
    }
}

impl RoiConfig {
    pub fn d_feat(&self) -> usize {
        self.widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.widths.contains(&0) || self.d_model == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::Config("network widths must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn reduction(&self) -> Reduction {
        if self.loss_sum {
            Reduction::Sum
        } else {
            Reduction::Mean
        }
    }
}

/// Stem kernel, stride and padding for a given patch size.
fn stem_geometry(geom: &GeometryConfig) -> (usize, usize, usize) {
    match geom.stem_stride() {
        1 => (3, 1, 1),
        s => (s, s, 0),
    }
}

pub fn roi_param_specs(cfg: &RoiConfig, geom: &GeometryConfig) -> Vec<ParamSpec> {
    let (k, _, _) = stem_geometry(geom);
    let mut v = vec![
        spec("backbone.stem.w", &[cfg.stem_width, 3, k, k], Init::Kaiming { fan_in: 3 * k * k }),
        spec("backbone.stem.b", &[cfg.stem_width], Init::Zeros),
    ];
    let mut c_in = cfg.stem_width;
    for (i, &c) in cfg.widths.iter().enumerate() {
        v.extend([
            spec(format!("backbone.s{i}.down.w"), &[c, c_in, 3, 3], Init::Kaiming { fan_in: c_in * 9 }),
            spec(format!("backbone.s{i}.down.b"), &[c], Init::Zeros),
            spec(format!("backbone.s{i}.res.w"), &[c, c, 3, 3], Init::Kaiming { fan_in: c * 9 }),
            spec(format!("backbone.s{i}.res.b"), &[c], Init::Zeros),
        ]);
        c_in = c;
    }
    let d = cfg.d_model;
    v.extend([
        spec("embed.w", &[cfg.d_feat(), d], Init::TruncNormal(0.02)),
        spec("embed.b", &[d], Init::Zeros),
        spec("pos", &[geom.patches_per_stack(), d], Init::Zeros),
    ]);
    for i in 0..cfg.depth {
        v.extend(block_specs(&format!("blocks.{i}"), d, d * cfg.mlp_ratio));
    }
    v.extend([
        spec("head.w", &[d, NUM_CLASSES], Init::TruncNormal(0.02)),
        spec("head.b", &[NUM_CLASSES], Init::Zeros),
    ]);
    v
}

/// Network input for a batch of stacks: `[B·grid², 3, P, P]` in strict mode, else `[B, 3, S, S]`.
/// Pixels are scaled to `[-1, 1]`.
pub fn roi_input<T: Element>(stacks: &[&RgbImage], geom: &GeometryConfig, strict: bool) -> Result<Tensor<T>> {
    let (s, p, n) = (geom.stack_px, geom.patch_px(), geom.grid);
    for img in stacks {
        if (img.width() as usize, img.height() as usize) != (s, s) {
            return Err(CoreError::Geometry(format!(
                "stack is {}x{}, expected {s}x{s}",
                img.width(),
                img.height()
            )));
        }
    }
    let scale = |v: u8| T::from_f64_lossy(v as f64 / 127.5 - 1.0);
    let mut data = Vec::with_capacity(stacks.len() * 3 * s * s);
    if strict {
        for img in stacks {
            for r in 0..n {
                for c in 0..n {
                    for ch in 0..3 {
                        for y in 0..p {
                            for x in 0..p {
                                data.push(scale(img.get_pixel((c * p + x) as u32, (r * p + y) as u32).0[ch]));
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::new([stacks.len() * n * n, 3, p, p], data)?)
    } else {
        for img in stacks {
            for ch in 0..3 {
                data.extend(img.pixels().map(|px| scale(px.0[ch])));
            }
        }
        Ok(Tensor::new([stacks.len(), 3, s, s], data)?)
    }
}

/// Residual CNN; total downsample equals `patch_px`.
pub fn backbone<T: Element>(g: &mut Graph<T>, b: &Bound, geom: &GeometryConfig, x: Var) -> Result<Var> {
    let (_, stride, pad) = stem_geometry(geom);
    let mut h = g.conv2d(x, b.get("backbone.stem.w")?, Some(b.get("backbone.stem.b")?), stride, pad)?;
    h = g.relu(h);
    for i in 0..4 {
        let w = |s: &str| b.get(&format!("backbone.s{i}.{s}"));
        h = g.conv2d(h, w("down.w")?, Some(w("down.b")?), 2, 1)?;
        h = g.relu(h);
        let r = g.conv2d(h, w("res.w")?, Some(w("res.b")?), 1, 1)?;
        let sum = g.add(h, r)?;
        h = g.relu(sum);
    }
    Ok(h)
}

/// One `[grid², d_feat]` feature grid (flattened row-major) per stack.
pub fn extract_features<T: Element>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &RoiConfig,
    geom: &GeometryConfig,
    x: Var,
) -> Result<Vec<Var>> {
    let n2 = geom.patches_per_stack();
    let df = cfg.d_feat();
    let h = backbone(g, b, geom, x)?;
    let shape = g.shape(h).to_vec();
    if cfg.strict_locality {
        if shape[2..] != [1, 1] || shape[0] % n2 != 0 {
            return Err(CoreError::Geometry(format!("backbone output {shape:?} is not one vector per patch")));
        }
        let flat = g.reshape(h, &[shape[0], df])?;
        (0..shape[0] / n2).map(|i| Ok(g.row_slice(flat, i * n2, n2)?)).collect()
    } else {
        if shape[2..] != [geom.grid, geom.grid] {
            return Err(CoreError::Geometry(format!("backbone output {shape:?} does not match the patch grid")));
        }
        let flat = g.reshape(h, &[shape[0], df * n2])?;
        (0..shape[0])
            .map(|i| {
                let row = g.row_slice(flat, i, 1)?;
                let chw = g.reshape(row, &[df, n2])?;
                Ok(g.transpose(chw)?)
            })
            .collect()
    }
}

/// Tokens `Z = encoder(F · embed + pos)`.
pub fn encode_roi<T: Element>(g: &mut Graph<T>, b: &Bound, cfg: &RoiConfig, features: Var) -> Result<Var> {
    let e = g.linear(features, b.get("embed.w")?, Some(b.get("embed.b")?))?;
    let mut z = g.add(e, b.get("pos")?)?;
    for i in 0..cfg.depth {
        z = encoder_block(g, z, &block_vars(b, &format!("blocks.{i}"))?, cfg.heads)?;
    }
    Ok(z)
}

pub fn roi_head<T: Element>(g: &mut Graph<T>, b: &Bound, tokens: Var) -> Result<Var> {
    Ok(g.linear(tokens, b.get("head.w")?, Some(b.get("head.b")?))?)
}

#[derive(Debug, Clone, Copy)]
pub struct RoiVars {
    pub tokens: Var,
    pub logits: Var,
}

/// Full stage-1 forward pass for a batch input built by [`roi_input`].
pub fn roi_forward<T: Element>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &RoiConfig,
    geom: &GeometryConfig,
    x: Var,
) -> Result<Vec<RoiVars>> {
    extract_features(g, b, cfg, geom, x)?
        .into_iter()
        .map(|f| {
            let tokens = encode_roi(g, b, cfg, f)?;
            let logits = roi_head(g, b, tokens)?;
            Ok(RoiVars { tokens, logits })
        })
        .collect()
}

/// Per-patch cross entropy over all stacks of the batch; `labels` concatenates each stack's grid.
pub fn roi_loss<T: Element>(g: &mut Graph<T>, cfg: &RoiConfig, outputs: &[RoiVars], labels: &[usize]) -> Result<Var> {
    let logits: Vec<Var> = outputs.iter().map(|o| o.logits).collect();
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    Ok(g.cross_entropy(all, labels, None, cfg.reduction())?)
}

/// Per-cell class probabilities over one stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchProbabilityMap {
    pub grid: usize,
    pub origin: (usize, usize),
    /// Row-major cells of five probabilities each.
    pub probs: Vec<[f64; NUM_CLASSES]>,
    pub argmax: Vec<u8>,
    /// Foreground fraction of each cell's patch.
    pub foreground: Vec<f32>,
}

/// First index of the maximum, so ties go to the lowest class.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `[grid², 5]` logits reshaped to the stack grid.
pub fn predict_roi<T: Element>(logits: &Tensor<T>, grid: usize, origin: (usize, usize), foreground: &[f32]) -> Result<PatchProbabilityMap> {
    if logits.shape() != [grid * grid, NUM_CLASSES] || foreground.len() != grid * grid {
        return Err(CoreError::Geometry(format!(
            "logits {:?} / {} foreground cells for a {grid}x{grid} grid",
            logits.shape(),
            foreground.len()
        )));
    }
    let p = softmax(logits)?;
    let mut probs = Vec::with_capacity(grid * grid);
    let mut argmax = Vec::with_capacity(grid * grid);
    for row in p.data().chunks(NUM_CLASSES) {
        let mut cell = [0.0; NUM_CLASSES];
        for (c, v) in cell.iter_mut().zip(row) {
            *c = v.as_f64();
        }
        argmax.push(argmax_lowest(&cell) as u8);
        probs.push(cell);
    }
    Ok(PatchProbabilityMap {
        grid,
        origin,
        probs,
        argmax,
        foreground: foreground.to_vec(),
    })
}

/// Stage-1 output for one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiInference {
    pub tokens: Tensor<f32>,
    pub map: PatchProbabilityMap,
}

/// Trained stage-1 weights with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiModel {
    pub cfg: RoiConfig,
    pub geom: GeometryConfig,
    pub params: ParamSet<f32>,
}

/// Stacks per inference graph.
const INFER_CHUNK: usize = 4;

impl RoiModel {
    pub fn new(cfg: RoiConfig, geom: GeometryConfig, params: ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        geom.validate()?;
        params.check_against(&roi_param_specs(&cfg, &geom))?;
        Ok(Self { cfg, geom, params })
    }

    /// Runs stage 1 on `(pixels, origin, patch_foreground)` triples. Chunks run in parallel;
    /// each chunk's result is independent of scheduling.
    pub fn infer(&self, stacks: &[(&RgbImage, (usize, usize), &[f32])]) -> Result<Vec<RoiInference>> {
        let chunks: Vec<Result<Vec<RoiInference>>> = stacks
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let mut g = Graph::<f32>::new();
                let b = self.params.bind(&mut g, false);
                let imgs: Vec<&RgbImage> = chunk.iter().map(|s| s.0).collect();
                let x = g.constant(roi_input(&imgs, &self.geom, self.cfg.strict_locality)?);
                let outs = roi_forward(&mut g, &b, &self.cfg, &self.geom, x)?;
                outs.iter()
                    .zip(chunk)
                    .map(|(o, s)| {
                        Ok(RoiInference {
                            tokens: g.value(o.tokens).clone(),
                            map: predict_roi(g.value(o.logits), self.geom.grid, s.1, s.2)?,
                        })
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(stacks.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}
