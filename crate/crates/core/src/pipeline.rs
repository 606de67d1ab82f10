//! End-to-end plumbing: slide preparation, stage-1 inference over a slide, slide grids,
//! diagnosis and evaluation.

use std::path::Path;

use image::{GrayImage, RgbImage};
use mshvit_metrics::{build_report, MetricReport, PatchNormalization, PatchPredictionRecord, SlidePredictionRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, RunConfig};
use crate::error::{CoreError, Result};
use crate::geometry::GeometryConfig;
use crate::ingest::{foreground_mask, stain_normalize_masked, tile_slide_with_mask, DatasetManifest, LabStats, PatchStack, Split};
use crate::params::ParamSet;
use crate::roi::{PatchProbabilityMap, RoiConfig, RoiModel};
use crate::slide::{assemble_slide_grid, crop_offset, slide_param_specs, topk_mean_baseline, SlideConfig, SlideDiagnosis, SlideFeatureGrid};
use crate::train::{classify_grid, merge_prefixed, Checkpoint, SlideSample};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8())
}

/// Foreground mask on the raw slide, stain normalization of the foreground, then tiling.
/// Without an annotation every patch is labelled 0.
pub fn prepare_slide(image: &RgbImage, annotation: Option<&GrayImage>, geom: &GeometryConfig, stain: &LabStats) -> Result<Vec<PatchStack>> {
    let mask = foreground_mask(image);
    let normalized = stain_normalize_masked(image, &mask, stain)?;
    let blank;
    let ann = match annotation {
        Some(a) => a,
        None => {
            blank = GrayImage::new(image.width(), image.height());
            &blank
        }
    };
    tile_slide_with_mask(&normalized, ann, &mask, geom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiledSlide {
    pub slide_id: String,
    pub slide_label: usize,
    pub split: Split,
    /// Slide extent in whole patches, `(rows, cols)`.
    pub extent_patches: (usize, usize),
    pub stacks: Vec<PatchStack>,
}

/// Prepares every slide of the manifest; parallel across slides, order preserved.
pub fn tile_manifest(manifest: &DatasetManifest, geom: &GeometryConfig, stain: &LabStats) -> Result<Vec<TiledSlide>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let img = load_rgb(&r.slide_path)?;
            let ann = load_gray(&r.annotation_path)?;
            let p = geom.patch_px();
            Ok(TiledSlide {
                slide_id: r.slide_id(),
                slide_label: r.slide_label,
                split: r.split,
                extent_patches: (img.height() as usize / p, img.width() as usize / p),
                stacks: prepare_slide(&img, Some(&ann), geom, stain)?,
            })
        })
        .collect()
}

/// Stage-1 tokens of every stack placed on the slide grid, plus the probability maps.
pub fn slide_grid_for(roi: &RoiModel, stacks: &[PatchStack]) -> Result<(SlideFeatureGrid, Vec<PatchProbabilityMap>)> {
    let geom = &roi.geom;
    let inputs: Vec<_> = stacks.iter().map(|s| (&s.pixels, s.origin, s.patch_foreground.as_slice())).collect();
    let inferred = roi.infer(&inputs)?;
    let origins: Vec<(usize, usize)> = stacks.iter().map(|s| s.origin).collect();
    let (dr, dc) = crop_offset(&origins, geom.grid, geom.slide_grid)?;
    let placed: Vec<((usize, usize), &mshvit_tensor::Tensor<f32>)> =
        inferred.iter().zip(&origins).map(|(inf, o)| ((o.0 - dr, o.1 - dc), &inf.tokens)).collect();
    let grid = if placed.is_empty() {
        SlideFeatureGrid {
            side: geom.slide_grid,
            d: roi.cfg.d_model,
            features: vec![0.0; geom.slide_grid * geom.slide_grid * roi.cfg.d_model],
            occupancy: vec![false; geom.slide_grid * geom.slide_grid],
        }
    } else {
        assemble_slide_grid(&placed, geom.grid, geom.slide_grid)?
    };
    Ok((grid, inferred.into_iter().map(|i| i.map).collect()))
}

/// Stage-2 inputs for the given slides.
pub fn slide_samples(roi: &RoiModel, slides: &[&TiledSlide]) -> Result<Vec<SlideSample>> {
    slides
        .iter()
        .map(|s| {
            let (grid, _) = slide_grid_for(roi, &s.stacks)?;
            Ok(SlideSample {
                slide_id: s.slide_id.clone(),
                grid: grid.to_chw(),
                label: s.slide_label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideResult {
    pub diagnosis: SlideDiagnosis,
    pub maps: Vec<PatchProbabilityMap>,
    pub tissue_stacks: usize,
}

/// Both stages with their configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub roi: RoiModel,
    pub slide_cfg: SlideConfig,
    pub slide_params: ParamSet<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PipelineMeta {
    geometry: GeometryConfig,
    roi: RoiConfig,
    slide: SlideConfig,
}

impl PipelineModel {
    pub fn new(roi: RoiModel, slide_cfg: SlideConfig, slide_params: ParamSet<f32>) -> Result<Self> {
        slide_cfg.validate()?;
        if slide_cfg.d_model != roi.cfg.d_model {
            return Err(CoreError::Config(format!(
                "stage-1 d_model {} differs from stage-2 d_model {}",
                roi.cfg.d_model, slide_cfg.d_model
            )));
        }
        slide_params.check_against(&slide_param_specs(&slide_cfg, &roi.geom))?;
        Ok(Self {
            roi,
            slide_cfg,
            slide_params,
        })
    }

    /// Combined checkpoint with `roi.` and `slide.` tensor names.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = PipelineMeta {
            geometry: self.roi.geom.clone(),
            roi: self.roi.cfg.clone(),
            slide: self.slide_cfg.clone(),
        };
        let mut metadata = serde_json::json!({"kind": "pipeline", "model": serde_json::to_value(meta).map_err(|e| CoreError::Format(e.to_string()))?});
        metadata["training"] = extra;
        Ok(Checkpoint::new(
            merge_prefixed(&[("roi", &self.roi.params), ("slide", &self.slide_params)]),
            metadata,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.metadata.get("kind").and_then(|k| k.as_str()) != Some("pipeline") {
            return Err(CoreError::Format("not a pipeline checkpoint (train-slide writes one)".into()));
        }
        let meta: PipelineMeta = serde_json::from_value(ckpt.metadata["model"].clone()).map_err(|e| CoreError::Format(format!("model metadata: {e}")))?;
        let roi = RoiModel::new(meta.roi, meta.geometry, ckpt.prefixed("roi"))?;
        Self::new(roi, meta.slide, ckpt.prefixed("slide"))
    }

    /// Diagnosis from prepared stacks. A slide without tissue stacks is reported as NFD
    /// with full confidence.
    pub fn diagnose_stacks(&self, stacks: &[PatchStack]) -> Result<SlideResult> {
        let (grid, maps) = slide_grid_for(&self.roi, stacks)?;
        let diagnosis = if stacks.is_empty() {
            SlideDiagnosis::empty()
        } else {
            classify_grid(&self.slide_params, &self.slide_cfg, &grid.to_chw())?.0
        };
        Ok(SlideResult {
            diagnosis,
            maps,
            tissue_stacks: stacks.len(),
        })
    }

    pub fn diagnose_image(&self, image: &RgbImage, stain: &LabStats) -> Result<SlideResult> {
        let stacks = prepare_slide(image, None, &self.roi.geom, stain)?;
        self.diagnose_stacks(&stacks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub slides: Vec<SlidePredictionRecord>,
    pub patches: Vec<PatchPredictionRecord>,
    pub topk: Vec<SlidePredictionRecord>,
    pub report: MetricReport,
    pub topk_report: MetricReport,
}

pub fn evaluate(model: &PipelineModel, slides: &[&TiledSlide], eval: &EvalConfig) -> Result<Evaluation> {
    let norm = if eval.literal_patch_accuracy {
        PatchNormalization::AllPatches
    } else {
        PatchNormalization::MaskedMean
    };
    let mut records = Vec::new();
    let mut patches = Vec::new();
    let mut topk = Vec::new();
    for s in slides {
        let r = model.diagnose_stacks(&s.stacks)?;
        records.push(SlidePredictionRecord {
            slide_id: s.slide_id.clone(),
            true_class: s.slide_label,
            predicted_class: r.diagnosis.predicted_class,
            scores: r.diagnosis.scores,
        });
        let tk = match topk_mean_baseline(&r.maps, eval.top_k, eval.patch_foreground) {
            Ok((d, _)) => d,
            Err(CoreError::EmptySlide) => SlideDiagnosis::empty(),
            Err(e) => return Err(e),
        };
        topk.push(SlidePredictionRecord {
            slide_id: s.slide_id.clone(),
            true_class: s.slide_label,
            predicted_class: tk.predicted_class,
            scores: tk.scores,
        });
        if !s.stacks.is_empty() {
            let mut rec = PatchPredictionRecord {
                slide_id: s.slide_id.clone(),
                slide_true_class: s.slide_label,
                predicted: Vec::new(),
                truth: Vec::new(),
                foreground: Vec::new(),
            };
            for (m, st) in r.maps.iter().zip(&s.stacks) {
                rec.predicted.extend(m.argmax.iter().map(|&a| a as usize));
                rec.truth.extend(st.labels.iter().map(|&l| l as usize));
                rec.foreground.extend(st.patch_foreground.iter().map(|&f| f as f64));
            }
            patches.push(rec);
        }
    }
    let report = build_report(&records, Some(&patches), eval.patch_foreground, norm)?;
    let topk_report = build_report(&topk, None, eval.patch_foreground, norm)?;
    Ok(Evaluation {
        slides: records,
        patches,
        topk,
        report,
        topk_report,
    })
}

/// Stage sets of a tiled dataset.
pub fn by_split(slides: &[TiledSlide], split: Split) -> Vec<&TiledSlide> {
    slides.iter().filter(|s| s.split == split).collect()
}

pub fn stacks_of(slides: &[&TiledSlide]) -> Vec<PatchStack> {
    slides.iter().flat_map(|s| s.stacks.iter().cloned()).collect()
}

/// Convenience for library callers: train both stages on tiled slides with `cfg`.
pub fn train_pipeline(slides: &[TiledSlide], cfg: &RunConfig) -> Result<(PipelineModel, crate::train::TrainOutcome, crate::train::TrainOutcome)> {
    cfg.validate()?;
    let train = by_split(slides, Split::Train);
    let val = by_split(slides, Split::Val);
    let s1 = crate::train::train_roi(&stacks_of(&train), &stacks_of(&val), &cfg.roi, &cfg.geometry, &cfg.stage1, cfg.seed)?;
    let roi = RoiModel::new(cfg.roi.clone(), cfg.geometry.clone(), s1.params.clone())?;
    let tr = slide_samples(&roi, &train)?;
    let va = slide_samples(&roi, &val)?;
    let s2 = crate::train::train_slide(&tr, &va, &cfg.slide, &cfg.geometry, &cfg.stage2, cfg.seed.wrapping_add(1))?;
    let model = PipelineModel::new(roi, cfg.slide.clone(), s2.params.clone())?;
    Ok((model, s1, s2))
}
