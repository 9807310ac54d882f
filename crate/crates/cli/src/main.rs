mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Sparse-view mesh reconstruction: poses, synthetic scenes, two-stage
/// fitting, extraction, rendering, evaluation and manifest filtering.
#[derive(Debug, Parser)]
#[command(name = "recon3d", version)]
pub struct Cli {
    /// Worker threads (rendering is single-threaded; recorded in run.json).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print or write a camera pose set as JSON.
    Poses(PosesArgs),
    /// Render ground-truth buffers of an analytic scene.
    Synth(SynthArgs),
    /// Fit a field to a views directory.
    Fit(FitArgs),
    /// Extract a mesh from a checkpoint.
    Extract(ExtractArgs),
    /// Rasterize a mesh at a set of poses.
    Render(RenderArgs),
    /// Compare a predicted mesh against ground truth.
    Eval(EvalArgs),
    /// Apply the curation rules to a manifest.
    Filter(FilterArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Six multi-view diffusion target views around a query azimuth.
    Zero123pp,
    /// Uniform-azimuth evaluation orbit with cycling elevations.
    Orbit,
    /// Random azimuth and elevation.
    Random,
}

#[derive(Debug, Args)]
pub struct RigArgs {
    /// Camera distance from the origin.
    #[arg(long, default_value_t = 2.5)]
    pub radius: f64,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 50.0)]
    pub fov: f64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
}

#[derive(Debug, Args)]
pub struct PosesArgs {
    #[arg(long, value_enum, default_value = "zero123pp")]
    pub protocol: Protocol,
    /// Query azimuth for zero123pp, in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub query_azimuth: f64,
    /// Number of views for orbit and random.
    #[arg(long, default_value_t = 21)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub rig: RigArgs,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Inline scene (`sphere:0.5#ff0000+box:0.25@0.5,0,0#0000ff`) or a JSON file.
    #[arg(long)]
    pub scene: String,
    /// Pose JSON; six zero123pp views at the default rig when omitted.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid resolution of the ground-truth mesh written as gt.obj.
    #[arg(long, default_value_t = 128)]
    pub gt_grid: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Base,
    Large,
    Desk,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Views directory written by `synth`.
    #[arg(long)]
    pub scene: PathBuf,
    /// JSON fit configuration; unset fields take the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Checkpoint to write; the mesh and loss trace go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: Stage,
    /// Starting checkpoint (required for `--stage 2`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_steps: Option<usize>,
    #[arg(long)]
    pub stage2_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Rebuild the SDF from density at this level first (stage-1 checkpoints).
    #[arg(long, allow_negative_numbers = true)]
    pub from_density: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Poses at which both meshes are rasterized for PSNR and SSIM.
    #[arg(long)]
    pub views: Option<PathBuf>,
    #[arg(long, default_value_t = 16384)]
    pub n_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// F-Score distance threshold.
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    /// Search the yaw that best aligns the prediction.
    #[arg(long)]
    pub align: bool,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Kept entries as JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected entries with reason codes; defaults to `<out stem>_rejected.json`.
    #[arg(long)]
    pub rejected: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
