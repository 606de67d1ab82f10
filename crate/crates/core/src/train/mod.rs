//! Optimization for both stages: schedules, optimizers, checkpoints and the
//! deterministic training loops.

mod checkpoint;
mod optim;

use std::io::Write;

use mshvit_metrics::{confusion_counts, class_metrics, macro_average_defined, SlidePredictionRecord};
use mshvit_tensor::{Graph, Reduction, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{merge_prefixed, write_atomic, Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{cosine_schedule, AdamW, Optimizer, OptimizerKind, Sgd};

use crate::error::{CoreError, Result};
use crate::geometry::GeometryConfig;
use crate::ingest::{augment, AugmentPolicy, PatchStack};
use crate::params::ParamSet;
use crate::roi::{roi_forward, roi_input, roi_loss, roi_param_specs, RoiConfig, RoiModel};
use crate::slide::{inverse_frequency_weights, slide_forward, slide_param_specs, SlideConfig, SlideDiagnosis};
use crate::NUM_CLASSES;

/// Patches at or below this foreground fraction are ignored by validation accuracy.
pub const VAL_FOREGROUND: f32 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Decay weight decay to zero along the same cosine as the learning rate.
    pub cosine_weight_decay: bool,
    pub momentum: f64,
    /// Inverse-frequency class weights in the loss (stage 2).
    pub class_weights: bool,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    /// Stage-1 settings at full scale.
    pub fn stage1() -> Self {
        Self {
            batch_size: 4,
            epochs: 30,
            base_lr: 1e-5,
            lr_floor: 0.0,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.05,
            cosine_weight_decay: true,
            momentum: 0.9,
            class_weights: false,
            augment: AugmentPolicy::default(),
        }
    }

    /// Stage-2 settings at full scale.
    pub fn stage2() -> Self {
        Self {
            batch_size: 5,
            epochs: 50,
            base_lr: 4e-4,
            lr_floor: 0.0,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            cosine_weight_decay: false,
            momentum: 0.9,
            class_weights: true,
            augment: AugmentPolicy::identity(),
        }
    }

    /// Stage 1 for randomly initialized desk-scale networks: same optimizer and schedules,
    /// fewer epochs and a learning rate raised to match.
    pub fn stage1_toy() -> Self {
        Self {
            epochs: 20,
            base_lr: 3e-3,
            ..Self::stage1()
        }
    }

    pub fn stage2_toy() -> Self {
        Self {
            base_lr: 1e-2,
            ..Self::stage2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CoreError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.base_lr > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.base_lr {
            return Err(CoreError::Config(format!("learning rate {} / floor {} invalid", self.base_lr, self.lr_floor)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config("weight_decay must be ≥ 0 and momentum in [0, 1)".into()));
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut w = w;
    let io = |e| CoreError::Io {
        path: "training log".into(),
        source: e,
    };
    writeln!(w, "epoch,split,loss,metric").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.epoch, r.split, r.loss, r.metric).map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ParamSet<f32>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub seed: u64,
    /// Position of the ChaCha stream when training finished.
    pub rng_word_pos: u128,
}

impl TrainOutcome {
    pub fn metadata(&self, kind: &str, config: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "kind": kind,
            "config": config,
            "epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "steps": self.steps,
            "rng": {"seed": self.seed, "word_pos": self.rng_word_pos.to_string()},
        })
    }
}

/// Better validation result: higher metric, then lower loss; earlier epochs win full ties.
fn improves(metric: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bm, bl)) => metric > bm || (metric == bm && loss < bl),
    }
}

/// Masked patch accuracy and mean per-patch loss of stage 1 over `stacks`.
pub fn evaluate_roi(model: &RoiModel, stacks: &[PatchStack]) -> Result<(f64, f64)> {
    let inputs: Vec<_> = stacks.iter().map(|s| (&s.pixels, s.origin, s.patch_foreground.as_slice())).collect();
    let out = model.infer(&inputs)?;
    let (mut correct, mut counted, mut loss, mut cells) = (0usize, 0usize, 0.0f64, 0usize);
    for (inf, s) in out.iter().zip(stacks) {
        for (i, p) in inf.map.probs.iter().enumerate() {
            let t = s.labels[i] as usize;
            loss -= p[t].max(1e-12).ln();
            cells += 1;
            if s.patch_foreground[i] > VAL_FOREGROUND {
                counted += 1;
                correct += (inf.map.argmax[i] as usize == t) as usize;
            }
        }
    }
    let acc = if counted == 0 { 0.0 } else { correct as f64 / counted as f64 };
    Ok((acc, loss / cells.max(1) as f64))
}

fn grads_for(g: &Graph<f32>, loss: mshvit_tensor::Var, vars: &[mshvit_tensor::Var], params: &ParamSet<f32>) -> Result<Vec<Tensor<f32>>> {
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

fn scheduled(cfg: &TrainConfig, step: usize, total: usize) -> Result<(f64, f64)> {
    let lr = cosine_schedule(step, total, cfg.base_lr, cfg.lr_floor)?;
    let wd = if cfg.cosine_weight_decay {
        cosine_schedule(step, total, cfg.weight_decay, 0.0)?
    } else {
        cfg.weight_decay
    };
    Ok((lr, wd))
}

/// Stage-1 training on pre-tiled (and stain-normalized) stacks.
///
/// One ChaCha stream seeded by `seed` drives initialization, epoch shuffles and the
/// per-stack augmentation seeds, in that order. Augmentation runs on worker threads but
/// each stack's seed is fixed before dispatch.
pub fn train_roi(
    train: &[PatchStack],
    val: &[PatchStack],
    net: &RoiConfig,
    geom: &GeometryConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    net.validate()?;
    geom.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Config(format!(
            "stage 1 needs train and val stacks (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::<f32>::init(&roi_param_specs(net, geom), &mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, &params, cfg.momentum);
    let per_epoch = cfg.steps_per_epoch(train.len());
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = params.clone();
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();
        let (mut loss_sum, mut correct, mut counted) = (0.0, 0usize, 0usize);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let off = batch_idx * cfg.batch_size;
            let stacks: Vec<PatchStack> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| augment(&train[i], seeds[off + k], &cfg.augment))
                .collect::<Result<_>>()?;
            let imgs: Vec<_> = stacks.iter().map(|s| &s.pixels).collect();
            let labels: Vec<usize> = stacks.iter().flat_map(|s| s.labels.iter().map(|&l| l as usize)).collect();

            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(roi_input(&imgs, geom, net.strict_locality)?);
            let outs = roi_forward(&mut g, &bound, net, geom, x)?;
            let loss = roi_loss(&mut g, net, &outs, &labels)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(CoreError::Numeric("stage-1 loss".into()));
            }
            loss_sum += lv;
            for (o, s) in outs.iter().zip(&stacks) {
                for (i, row) in g.value(o.logits).data().chunks(NUM_CLASSES).enumerate() {
                    if s.patch_foreground[i] > VAL_FOREGROUND {
                        let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                        counted += 1;
                        correct += (crate::roi::argmax_lowest(&row64) == s.labels[i] as usize) as usize;
                    }
                }
            }
            let grads = grads_for(&g, loss, &bound.vars, &params)?;
            let (lr, wd) = scheduled(cfg, step, total)?;
            opt.step(&mut params, &grads, lr, wd)?;
            step += 1;
        }
        log.push(LogRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / per_epoch as f64,
            metric: if counted == 0 { 0.0 } else { correct as f64 / counted as f64 },
        });
        let model = RoiModel::new(net.clone(), geom.clone(), params.clone())?;
        let (acc, vloss) = evaluate_roi(&model, val)?;
        log.push(LogRow {
            epoch,
            split: "val".into(),
            loss: vloss,
            metric: acc,
        });
        if improves(acc, vloss, best) {
            best = Some((acc, vloss));
            best_params = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_metric: best.map_or(0.0, |b| b.0),
        log,
        steps: step,
        seed,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// One slide as seen by stage 2: its channel-major token grid and label.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideSample {
    pub slide_id: String,
    pub grid: Tensor<f32>,
    pub label: usize,
}

/// Stage-2 forward pass on one slide.
pub fn classify_grid(params: &ParamSet<f32>, net: &SlideConfig, grid: &Tensor<f32>) -> Result<(SlideDiagnosis, Vec<f64>)> {
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(grid.clone());
    let logits = slide_forward(&mut g, &b, net, x)?;
    let l: Vec<f64> = g.value(logits).data().iter().map(|&v| v as f64).collect();
    Ok((SlideDiagnosis::from_logits(&l)?, l))
}

/// Macro sensitivity over present classes and mean unweighted loss of stage 2.
pub fn evaluate_slides(params: &ParamSet<f32>, net: &SlideConfig, samples: &[SlideSample]) -> Result<(f64, f64, Vec<SlidePredictionRecord>)> {
    let results: Vec<Result<(SlideDiagnosis, Vec<f64>)>> =
        samples.par_iter().map(|s| classify_grid(params, net, &s.grid)).collect();
    let mut records = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for (r, s) in results.into_iter().zip(samples) {
        let (d, _) = r?;
        loss -= (d.scores[s.label] / 100.0).max(1e-12).ln();
        records.push(SlidePredictionRecord {
            slide_id: s.slide_id.clone(),
            true_class: s.label,
            predicted_class: d.predicted_class,
            scores: d.scores,
        });
    }
    let sens: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|c| class_metrics(&confusion_counts(&records, c)).sensitivity)
        .collect();
    let macro_sens = macro_average_defined(&sens).map(|m| m.mean).unwrap_or(0.0);
    Ok((macro_sens, loss / samples.len().max(1) as f64, records))
}

/// Stage-2 training on precomputed slide grids; stage 1 never changes here.
pub fn train_slide(
    train: &[SlideSample],
    val: &[SlideSample],
    net: &SlideConfig,
    geom: &GeometryConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Config(format!(
            "stage 2 needs train and val slides (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    for s in train.iter().chain(val) {
        if s.grid.shape() != [net.d_model, geom.slide_grid, geom.slide_grid] {
            return Err(CoreError::Config(format!(
                "slide {} grid {:?} does not match d_model {} on a {} grid",
                s.slide_id,
                s.grid.shape(),
                net.d_model,
                geom.slide_grid
            )));
        }
    }
    let mut hist = [0usize; NUM_CLASSES];
    train.iter().for_each(|s| hist[s.label] += 1);
    let weights: Vec<f32> = if cfg.class_weights {
        inverse_frequency_weights(&hist).iter().map(|&w| w as f32).collect()
    } else {
        vec![1.0; NUM_CLASSES]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::<f32>::init(&slide_param_specs(net, geom), &mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, &params, cfg.momentum);
    let per_epoch = cfg.steps_per_epoch(train.len());
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = params.clone();
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g, true);
            let mut logits = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = g.constant(train[i].grid.clone());
                logits.push(slide_forward(&mut g, &bound, net, x)?);
            }
            let all = g.concat_rows(&logits)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let loss = g.cross_entropy(all, &labels, Some(&weights), Reduction::Mean)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(CoreError::Numeric("stage-2 loss".into()));
            }
            loss_sum += lv;
            for (row, &t) in g.value(all).data().chunks(NUM_CLASSES).zip(&labels) {
                let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += (crate::roi::argmax_lowest(&row64) == t) as usize;
            }
            let grads = grads_for(&g, loss, &bound.vars, &params)?;
            let (lr, wd) = scheduled(cfg, step, total)?;
            opt.step(&mut params, &grads, lr, wd)?;
            step += 1;
        }
        log.push(LogRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / per_epoch as f64,
            metric: correct as f64 / train.len() as f64,
        });
        let (sens, vloss, _) = evaluate_slides(&params, net, val)?;
        log.push(LogRow {
            epoch,
            split: "val".into(),
            loss: vloss,
            metric: sens,
        });
        if improves(sens, vloss, best) {
            best = Some((sens, vloss));
            best_params = params.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_metric: best.map_or(0.0, |b| b.0),
        log,
        steps: step,
        seed,
        rng_word_pos: rng.get_word_pos(),
    })
}
