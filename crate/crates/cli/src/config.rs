//! Layered run configuration: preset, then TOML file, then `--set`, then typed flags.

use std::path::Path;

use mshvit_core::config::RunConfig;
use mshvit_core::geometry::GeometryConfig;
use mshvit_core::train::{OptimizerKind, TrainConfig};
use mshvit_core::CoreError;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::args::{GeometryArgs, GlobalArgs, OptimizerArg, TrainArgs};
use crate::CliError;

pub fn load(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let base = RunConfig::preset(&global.preset)?;
    let mut table = Table::try_from(&base).map_err(|e| config_err(format!("serializing preset: {e}")))?;
    if let Some(path) = &global.config {
        merge(&mut table, read_table(path)?);
    }
    for kv in &global.overrides {
        apply_override(&mut table, kv)?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| config_err(format!("invalid configuration: {e}")))?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn config_err(msg: String) -> CliError {
    CliError::Core(CoreError::Config(msg))
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(CoreError::Io { path: path.to_path_buf(), source: e }))?;
    text.parse::<Table>()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn merge(dst: &mut Table, src: Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut Table, kv: &str) -> Result<(), CliError> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("--set {key}: {p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn apply_geometry(g: &mut GeometryConfig, a: &GeometryArgs) {
    macro_rules! set {
        ($($f:ident => $t:ident),*) => { $(if let Some(v) = a.$f { g.$t = v; })* };
    }
    set!(stack_px => stack_px, grid => grid, mpp => mpp, slide_grid => slide_grid, max_stacks => max_stacks,
        min_foreground => min_foreground_fraction, overlap_px => overlap_px);
}

pub fn apply_train(t: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.lr_floor {
        t.lr_floor = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(o) = a.optimizer {
        t.optimizer = match o {
            OptimizerArg::Adamw => OptimizerKind::AdamW,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        };
    }
}

/// Hex SHA-256 of the canonical JSON form of `cfg`.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}
