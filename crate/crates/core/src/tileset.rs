//! On-disk tile index: stack PNGs plus a `tiles.json` describing labels and placement.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::geometry::GeometryConfig;
use crate::ingest::{PatchStack, Split};
use crate::pipeline::{load_rgb, TiledSlide};
use crate::synth::save_png;
use crate::train::write_atomic;

pub const INDEX_FILE: &str = "tiles.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackEntry {
    file: String,
    origin: (usize, usize),
    labels: Vec<u8>,
    patch_foreground: Vec<f32>,
    foreground_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SlideEntry {
    slide_id: String,
    slide_label: usize,
    split: Split,
    extent_patches: (usize, usize),
    stacks: Vec<StackEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TileIndex {
    geometry: GeometryConfig,
    slides: Vec<SlideEntry>,
}

/// Writes stacks under `dir/stacks/` and the index to `dir/tiles.json`; returns every file written.
pub fn write_tile_index(dir: &Path, slides: &[TiledSlide], geom: &GeometryConfig) -> Result<Vec<PathBuf>> {
    let stack_dir = dir.join("stacks");
    std::fs::create_dir_all(&stack_dir).map_err(io_err(&stack_dir))?;
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(slides.len());
    for s in slides {
        let mut stacks = Vec::with_capacity(s.stacks.len());
        for st in &s.stacks {
            let file = format!("stacks/{}_r{:03}_c{:03}.png", s.slide_id, st.origin.0, st.origin.1);
            let path = dir.join(&file);
            save_png(&st.pixels, &path)?;
            written.push(path);
            stacks.push(StackEntry {
                file,
                origin: st.origin,
                labels: st.labels.clone(),
                patch_foreground: st.patch_foreground.clone(),
                foreground_fraction: st.foreground_fraction,
            });
        }
        entries.push(SlideEntry {
            slide_id: s.slide_id.clone(),
            slide_label: s.slide_label,
            split: s.split,
            extent_patches: s.extent_patches,
            stacks,
        });
    }
    let index = TileIndex {
        geometry: geom.clone(),
        slides: entries,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_vec_pretty(&index).map_err(|e| CoreError::Format(e.to_string()))?;
    write_atomic(&path, &text)?;
    written.push(path);
    Ok(written)
}

/// Reads an index written by [`write_tile_index`]; `path` is the index file or its directory.
pub fn read_tile_index(path: &Path) -> Result<(GeometryConfig, Vec<TiledSlide>)> {
    let file = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let bytes = std::fs::read(&file).map_err(io_err(&file))?;
    let index: TileIndex = serde_json::from_slice(&bytes).map_err(|e| CoreError::Parse {
        path: file.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    index.geometry.validate()?;
    let mut slides = Vec::with_capacity(index.slides.len());
    for s in index.slides {
        let mut stacks = Vec::with_capacity(s.stacks.len());
        for e in s.stacks {
            let pixels = load_rgb(&dir.join(&e.file))?;
            stacks.push(PatchStack {
                pixels,
                origin: e.origin,
                labels: e.labels,
                patch_foreground: e.patch_foreground,
                foreground_fraction: e.foreground_fraction,
            });
        }
        slides.push(TiledSlide {
            slide_id: s.slide_id,
            slide_label: s.slide_label,
            split: s.split,
            extent_patches: s.extent_patches,
            stacks,
        });
    }
    Ok((index.geometry, slides))
}
