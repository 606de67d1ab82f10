//! JSON-lines dataset manifest.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub slide_path: PathBuf,
    pub annotation_path: PathBuf,
    pub slide_label: usize,
    pub split: Split,
    pub mpp: f64,
}

impl ManifestRecord {
    /// File stem of the slide image, used as the slide id in reports.
    pub fn slide_id(&self) -> String {
        self.slide_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for r in &self.records {
            h[r.slide_label] += 1;
        }
        h
    }
}

/// Writes one JSON object per line, atomically. Paths are written as given.
pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CoreError::Argument(e.to_string()))?);
        text.push('\n');
    }
    crate::train::write_atomic(path, text.as_bytes())
}

/// Parses and validates a manifest. Relative paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parse_err = |line: usize, message: String| CoreError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if r.slide_label >= NUM_CLASSES {
            return Err(parse_err(line_no, format!("unknown class index {}", r.slide_label)));
        }
        if !(r.mpp.is_finite() && r.mpp > 0.0) {
            return Err(parse_err(line_no, format!("mpp must be positive, got {}", r.mpp)));
        }
        for p in [&mut r.slide_path, &mut r.annotation_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(parse_err(line_no, format!("{} does not exist", p.display())));
            }
        }
        records.push(r);
    }
    Ok(DatasetManifest { records })
}
