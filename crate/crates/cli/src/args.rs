use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mshvit", version, about = "Two-stage patch-stack and slide transformer pipeline for gastric slide diagnosis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; unspecified keys take the preset's values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base preset the config file and flags are layered onto.
    #[arg(long, global = true, default_value = "toy")]
    pub preset: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing artifacts instead of refusing.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override any config key, e.g. `--set stage1.epochs=3` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated slide set and its manifest.
    Synth(SynthArgs),
    /// Stain-normalize and cut every manifest slide into patch stacks.
    Tile(TileArgs),
    /// Train the stage-1 patch-stack network.
    TrainRoi(TrainRoiArgs),
    /// Train the stage-2 slide network on frozen stage-1 features.
    TrainSlide(TrainSlideArgs),
    /// Diagnose one slide image.
    Infer(InferArgs),
    /// Evaluate a pipeline checkpoint on one split of a tile index.
    Eval(EvalArgs),
    /// Render a probability-map JSON as an RGBA overlay.
    RenderMap(RenderArgs),
    /// Rank-sum and normality tests over CSV columns.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Slides per class, comma separated in class order.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    /// Slide side in pixels.
    #[arg(long)]
    pub extent: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct GeometryArgs {
    #[arg(long)]
    pub stack_px: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub mpp: Option<f64>,
    #[arg(long)]
    pub slide_grid: Option<usize>,
    #[arg(long)]
    pub max_stacks: Option<usize>,
    #[arg(long)]
    pub min_foreground: Option<f64>,
    #[arg(long)]
    pub overlap_px: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_floor: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainRoiArgs {
    /// Tile index file or the directory holding it.
    #[arg(long)]
    pub tiles: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct TrainSlideArgs {
    #[arg(long)]
    pub tiles: PathBuf,
    /// Stage-1 checkpoint written by train-roi.
    #[arg(long)]
    pub roi_checkpoint: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Pipeline checkpoint written by train-slide.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub slide: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tiles: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Probability-map JSON written by infer.
    #[arg(long)]
    pub maps: PathBuf,
    /// Output pixels per patch cell.
    #[arg(long, default_value_t = 8)]
    pub cell_px: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatsTest {
    Wilcoxon,
    Ks,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub csv: PathBuf,
    /// First column (header name).
    #[arg(long)]
    pub a: String,
    /// Second column; required for the rank-sum test.
    #[arg(long)]
    pub b: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub test: StatsTest,
    #[arg(long, value_enum, default_value = "auto")]
    pub mode: ModeArg,
}
