use std::path::Path;

use mshvit_core::config::RunConfig;
use mshvit_core::geometry::GeometryConfig;
use mshvit_core::ingest::{load_manifest, Split};
use mshvit_core::pipeline::{by_split, evaluate, load_rgb, slide_samples, stacks_of, PipelineModel, TiledSlide};
use mshvit_core::render::{render_probability_map, DEFAULT_PALETTE};
use mshvit_core::roi::{PatchProbabilityMap, RoiConfig, RoiModel};
use mshvit_core::synth::{synth_dataset, DatasetSpec};
use mshvit_core::tileset::{read_tile_index, write_tile_index, INDEX_FILE};
use mshvit_core::train::{train_roi, train_slide, write_log_csv, Checkpoint, LogRow};
use mshvit_core::{CoreError, CLASS_NAMES};
use mshvit_metrics::{ks_normality, wilcoxon_rank_sum, write_roc_csv, SlidePredictionRecord, WilcoxonMode};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::config::{apply_geometry, apply_train, load};
use crate::output::Outputs;
use crate::CliError;

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool; that is fine for repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = load(g)?;
    match &cli.command {
        Command::Synth(a) => synth(g, &mut cfg, a),
        Command::Tile(a) => tile(g, &mut cfg, a),
        Command::TrainRoi(a) => train_roi_cmd(g, &mut cfg, a),
        Command::TrainSlide(a) => train_slide_cmd(g, &mut cfg, a),
        Command::Infer(a) => infer(g, &cfg, a),
        Command::Eval(a) => eval(g, &mut cfg, a),
        Command::RenderMap(a) => render(g, &cfg, a),
        Command::Stats(a) => stats(g, &cfg, a),
    }
}

fn synth(g: &GlobalArgs, cfg: &mut RunConfig, a: &SynthArgs) -> Result<(), CliError> {
    if let Some(c) = &a.classes {
        if c.len() != cfg.data.counts.len() {
            return Err(CliError::Usage(format!("--classes needs {} counts, got {}", cfg.data.counts.len(), c.len())));
        }
        cfg.data.counts.copy_from_slice(c);
    }
    if let Some(e) = a.extent {
        cfg.data.extent = e;
    }
    let mut out = Outputs::new(g.out.as_deref(), g.overwrite, "synth")?;
    let total: usize = cfg.data.counts.iter().sum();
    out.check(&out.dir.join("manifest.jsonl"))?;
    for i in 0..total {
        out.check(&out.dir.join(format!("slide_{i:04}.png")))?;
        out.check(&out.dir.join(format!("slide_{i:04}_ann.png")))?;
    }
    let spec = DatasetSpec {
        counts: cfg.data.counts,
        extent: cfg.data.extent,
        mpp: cfg.geometry.mpp,
        split: cfg.data.split.clone(),
        synth: cfg.data.synth.clone(),
    };
    let manifest = synth_dataset(&spec, cfg.seed, &out.dir)?;
    for r in &manifest.records {
        out.record(r.slide_path.clone());
        out.record(r.annotation_path.clone());
    }
    out.record(out.dir.join("manifest.jsonl"));
    println!("{total} slides, class histogram {:?}", manifest.class_histogram());
    out.finish(cfg)
}

fn tile(g: &GlobalArgs, cfg: &mut RunConfig, a: &TileArgs) -> Result<(), CliError> {
    apply_geometry(&mut cfg.geometry, &a.geometry);
    cfg.validate()?;
    let mut out = Outputs::new(g.out.as_deref(), g.overwrite, "tile")?;
    out.check(&out.dir.join(INDEX_FILE))?;
    let stack_dir = out.dir.join("stacks");
    if stack_dir.exists() {
        out.check(&stack_dir)?;
        std::fs::remove_dir_all(&stack_dir).map_err(|e| CoreError::Io { path: stack_dir.clone(), source: e })?;
    }
    let manifest = load_manifest(&a.manifest)?;
    let slides = mshvit_core::pipeline::tile_manifest(&manifest, &cfg.geometry, &cfg.stain)?;
    for p in write_tile_index(&out.dir, &slides, &cfg.geometry)? {
        out.record(p);
    }
    let n: usize = slides.iter().map(|s| s.stacks.len()).sum();
    println!("{} slides, {n} patch stacks", slides.len());
    out.finish(cfg)
}

/// Tile index whose geometry becomes the run geometry.
fn tiles_for(cfg: &mut RunConfig, path: &Path) -> Result<Vec<TiledSlide>, CliError> {
    let (geom, slides) = read_tile_index(path)?;
    cfg.geometry = geom;
    cfg.validate()?;
    Ok(slides)
}

fn log_csv(rows: &[LogRow]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_log_csv(rows, &mut buf)?;
    Ok(buf)
}

#[derive(Serialize, Deserialize)]
struct RoiMeta {
    geometry: GeometryConfig,
    roi: RoiConfig,
}

fn train_roi_cmd(g: &GlobalArgs, cfg: &mut RunConfig, a: &TrainRoiArgs) -> Result<(), CliError> {
    apply_train(&mut cfg.stage1, &a.train);
    let slides = tiles_for(cfg, &a.tiles)?;
    let mut out = Outputs::new(g.out.as_deref(), g.overwrite, "train-roi")?;
    let ckpt_path = out.claim("roi.ckpt")?;
    out.check(&out.dir.join("stage1_log.csv"))?;
    let train = stacks_of(&by_split(&slides, Split::Train));
    let val = stacks_of(&by_split(&slides, Split::Val));
    let outcome = train_roi(&train, &val, &cfg.roi, &cfg.geometry, &cfg.stage1, cfg.seed)?;
    let meta = RoiMeta {
        geometry: cfg.geometry.clone(),
        roi: cfg.roi.clone(),
    };
    let metadata = json!({
        "kind": "roi",
        "model": serde_json::to_value(&meta).map_err(|e| CoreError::Format(e.to_string()))?,
        "training": outcome.metadata("stage1", to_value(&cfg.stage1)?),
    });
    Checkpoint::new(outcome.params.clone(), metadata).save(&ckpt_path)?;
    out.record(ckpt_path);
    out.write("stage1_log.csv", &log_csv(&outcome.log)?)?;
    println!("stage 1: best epoch {} val masked patch accuracy {:.4}", outcome.best_epoch, outcome.best_metric);
    out.finish(cfg)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::to_value(v).map_err(|e| CoreError::Format(e.to_string()))?)
}

fn load_roi(path: &Path) -> Result<RoiModel, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.metadata.get("kind").and_then(|k| k.as_str()) != Some("roi") {
        return Err(CoreError::Format(format!("{}: not a stage-1 checkpoint (train-roi writes one)", path.display())).into());
    }
    let meta: RoiMeta = serde_json::from_value(ckpt.metadata["model"].clone()).map_err(|e| CoreError::Format(format!("{}: model metadata: {e}", path.display())))?;
    Ok(RoiModel::new(meta.roi, meta.geometry, ckpt.tensors)?)
}

fn require_same_geometry(a: &GeometryConfig, b: &GeometryConfig) -> Result<(), CliError> {
    if a != b {
        return Err(CoreError::Config(format!("tile index geometry {b:?} differs from checkpoint geometry {a:?}")).into());
    }
    Ok(())
}

fn train_slide_cmd(g: &GlobalArgs, cfg: &mut RunConfig, a: &TrainSlideArgs) -> Result<(), CliError> {
    apply_train(&mut cfg.stage2, &a.train);
    let slides = tiles_for(cfg, &a.tiles)?;
    let roi = load_roi(&a.roi_checkpoint)?;
    require_same_geometry(&roi.geom, &cfg.geometry)?;
    cfg.roi = roi.cfg.clone();
    cfg.validate()?;
    let mut out = Outputs::new(g.out.as_deref(), g.overwrite, "train-slide")?;
    let ckpt_path = out.claim("pipeline.ckpt")?;
    out.check(&out.dir.join("stage2_log.csv"))?;
    let train = slide_samples(&roi, &by_split(&slides, Split::Train))?;
    let val = slide_samples(&roi, &by_split(&slides, Split::Val))?;
    let outcome = train_slide(&train, &val, &cfg.slide, &cfg.geometry, &cfg.stage2, cfg.seed.wrapping_add(1))?;
    let model = PipelineModel::new(roi, cfg.slide.clone(), outcome.params.clone())?;
    model
        .to_checkpoint(outcome.metadata("stage2", to_value(&cfg.stage2)?))?
        .save(&ckpt_path)?;
    out.record(ckpt_path);
    out.write("stage2_log.csv", &log_csv(&outcome.log)?)?;
    println!("stage 2: best epoch {} val macro sensitivity {:.4}", outcome.best_epoch, outcome.best_metric);
    out.finish(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MapFile {
    pub slide_id: String,
    /// Slide extent in patches, `(rows, cols)`.
    pub extent_patches: (usize, usize),
    pub maps: Vec<PatchProbabilityMap>,
}

fn infer(g: &GlobalArgs, cfg: &RunConfig, a: &InferArgs) -> Result<(), CliError> {
    let mut out = match &g.out {
        Some(d) => Some(Outputs::new(Some(d), g.overwrite, "infer")?),
        None => None,
    };
    let slide_id = a
        .slide
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (diag_name, map_name) = (format!("{slide_id}_diagnosis.json"), format!("{slide_id}_maps.json"));
    if let Some(o) = &out {
        o.check(&o.dir.join(&diag_name))?;
        o.check(&o.dir.join(&map_name))?;
    }
    let model = PipelineModel::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let image = load_rgb(&a.slide)?;
    let result = model.diagnose_image(&image, &cfg.stain)?;
    let export = result.diagnosis.export(&slide_id);
    println!("{}", serde_json::to_string(&export).map_err(|e| CoreError::Format(e.to_string()))?);
    if let Some(o) = out.as_mut() {
        let p = model.roi.geom.patch_px();
        let maps = MapFile {
            slide_id,
            extent_patches: (image.height() as usize / p, image.width() as usize / p),
            maps: result.maps,
        };
        o.write_json(&diag_name, &export)?;
        o.write_json(&map_name, &maps)?;
    }
    match out {
        Some(o) => o.finish(cfg),
        None => Ok(()),
    }
}

fn predictions_csv(records: &[SlidePredictionRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["slide_id".to_string(), "true_class".into(), "predicted_class".into()];
    header.extend(CLASS_NAMES.iter().map(|n| format!("score_{n}")));
    let csv_err = |e: csv::Error| CoreError::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.slide_id.clone(), CLASS_NAMES[r.true_class].into(), CLASS_NAMES[r.predicted_class].into()];
        row.extend(r.scores.iter().map(|s| s.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CoreError::Format(e.to_string()).into())
}

fn eval(g: &GlobalArgs, cfg: &mut RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    if let Some(k) = a.top_k {
        cfg.eval.top_k = k;
    }
    let slides = tiles_for(cfg, &a.tiles)?;
    let model = PipelineModel::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    require_same_geometry(&model.roi.geom, &cfg.geometry)?;
    cfg.roi = model.roi.cfg.clone();
    cfg.slide = model.slide_cfg.clone();
    cfg.validate()?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mut out = Outputs::new(g.out.as_deref(), g.overwrite, "eval")?;
    let roc_names: Vec<String> = CLASS_NAMES.iter().map(|n| format!("roc_{}.csv", n.to_lowercase())).collect();
    for name in ["metrics.json", "metrics.csv", "topk_metrics.json", "topk_metrics.csv", "predictions.csv", "topk_predictions.csv"]
        .iter()
        .map(|s| s.to_string())
        .chain(roc_names.iter().cloned())
    {
        out.check(&out.dir.join(name))?;
    }
    let selected = by_split(&slides, split);
    if selected.is_empty() {
        return Err(CoreError::Config(format!("tile index has no {split} slides")).into());
    }
    let ev = evaluate(&model, &selected, &cfg.eval)?;
    out.write("metrics.json", ev.report.to_json()?.as_bytes())?;
    out.write("topk_metrics.json", ev.topk_report.to_json()?.as_bytes())?;
    for (name, report) in [("metrics.csv", &ev.report), ("topk_metrics.csv", &ev.topk_report)] {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        out.write(name, &buf)?;
    }
    out.write("predictions.csv", &predictions_csv(&ev.slides)?)?;
    out.write("topk_predictions.csv", &predictions_csv(&ev.topk)?)?;
    for (c, name) in ev.report.classes.iter().zip(&roc_names) {
        let mut buf = Vec::new();
        write_roc_csv(&c.roc, &mut buf)?;
        out.write(name, &buf)?;
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} {split} slides: macro sensitivity {} | masked patch accuracy {} | top-{} mean macro sensitivity {}",
        selected.len(),
        fmt(ev.report.macro_sensitivity()),
        fmt(ev.report.macro_patch_accuracy()),
        cfg.eval.top_k,
        fmt(ev.topk_report.macro_sensitivity()),
    );
    out.finish(cfg)
}

fn render(g: &GlobalArgs, cfg: &RunConfig, a: &RenderArgs) -> Result<(), CliError> {
    if a.cell_px == 0 {
        return Err(CliError::Usage("--cell-px must be at least 1".into()));
    }
    let bytes = std::fs::read(&a.maps).map_err(|e| CoreError::Io { path: a.maps.clone(), source: e })?;
    let file: MapFile = serde_json::from_slice(&bytes).map_err(|e| CoreError::Parse {
        path: a.maps.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out = Outputs::new(g.out.as_deref(), g.overwrite, "render-map")?;
    let path = out.claim(&format!("{}_map.png", file.slide_id))?;
    let img = render_probability_map(&file.maps, file.extent_patches, a.cell_px, &DEFAULT_PALETTE);
    img.save_with_format(&path, image::ImageFormat::Png).map_err(|e| CoreError::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    out.record(path);
    out.finish(cfg)
}

/// Numeric cells of column `name`; blank cells are skipped.
fn column(path: &Path, name: &str) -> Result<Vec<f64>, CliError> {
    let parse_err = |line: usize, message: String| CoreError::Parse { path: path.to_path_buf(), line, message };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
    let headers = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| parse_err(1, format!("no column {name:?} (have {:?})", headers.iter().collect::<Vec<_>>())))?;
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let cell = rec.get(idx).unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        let v: f64 = cell.parse().map_err(|_| parse_err(line, format!("{name}: {cell:?} is not a number")))?;
        values.push(v);
    }
    Ok(values)
}

fn stats(g: &GlobalArgs, cfg: &RunConfig, a: &StatsArgs) -> Result<(), CliError> {
    let mut out = match &g.out {
        Some(d) => Some(Outputs::new(Some(d), g.overwrite, "stats")?),
        None => None,
    };
    if let Some(o) = &out {
        o.check(&o.dir.join("stats.json"))?;
    }
    if a.b.is_none() && !matches!(a.test, StatsTest::Ks) {
        return Err(CliError::Usage("the rank-sum test needs --b <COLUMN>".into()));
    }
    let xa = column(&a.csv, &a.a)?;
    let xb = match &a.b {
        Some(b) => Some(column(&a.csv, b)?),
        None => None,
    };
    let mut report = serde_json::Map::new();
    if matches!(a.test, StatsTest::Ks | StatsTest::Both) {
        report.insert(format!("ks_{}", a.a), to_value(&ks_normality(&xa)?)?);
        if let (Some(b), Some(xb)) = (&a.b, &xb) {
            report.insert(format!("ks_{b}"), to_value(&ks_normality(xb)?)?);
        }
    }
    if matches!(a.test, StatsTest::Wilcoxon | StatsTest::Both) {
        let xb = xb.as_ref().expect("checked above");
        let mode = match a.mode {
            ModeArg::Auto => WilcoxonMode::Auto,
            ModeArg::Exact => WilcoxonMode::Exact,
            ModeArg::Normal => WilcoxonMode::Normal,
        };
        let w = wilcoxon_rank_sum(&xa, xb, mode)?;
        let mut v = to_value(&w)?;
        v["significance"] = json!(mshvit_metrics::stats::significance_marker(w.p_value));
        report.insert("wilcoxon".into(), v);
    }
    let report = serde_json::Value::Object(report);
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CoreError::Format(e.to_string()))?);
    if let Some(o) = out.as_mut() {
        o.write_json("stats.json", &report)?;
    }
    match out {
        Some(o) => o.finish(cfg),
        None => Ok(()),
    }
}
