//! `ikfit` — file-based front end for the inverse-kinematics toolkit.
//!
//! Every subcommand reads the formats documented in `docs/FORMATS.md`,
//! writes its outputs into one directory per run, and drops a
//! `manifest.json` beside them recording inputs, effective configuration,
//! seed, and tool version. Outputs are deterministic: rerunning a command
//! with the same inputs and seed produces byte-identical primary files
//! (only the manifest timestamp may differ).

mod commands;
mod manifest;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ikfit", version, about = "Articulated-skeleton inverse kinematics toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the skeleton to 3D marker targets, one independent solve per frame.
    SolveMono(SolveMonoArgs),
    /// Fit the skeleton to multi-camera 2D detections, one solve per frame.
    SolveMultiview(SolveMultiviewArgs),
    /// Robust consensus triangulation of 2D detections to 3D points.
    Triangulate(TriangulateArgs),
    /// Compare predicted poses against a reference: metrics CSV and charts.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic scene: skeleton, ground truth, markers, detections.
    Synth(SynthArgs),
    /// Refine marker-site placements against external captures (EM rounds).
    MapRefine(MapRefineArgs),
}

#[derive(Args)]
pub struct SolveMonoArgs {
    /// Skeleton JSON.
    #[arg(long)]
    pub skeleton: PathBuf,
    /// Marker CSV (frame,site,x,y,z,confidence).
    #[arg(long)]
    pub markers: PathBuf,
    /// Solve configuration JSON; defaults to the staged monocular schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for frame-parallel solving (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Keep solving remaining frames when one fails (exit stays nonzero).
    #[arg(long)]
    pub continue_on_error: bool,
}

#[derive(Args)]
pub struct SolveMultiviewArgs {
    /// Skeleton JSON.
    #[arg(long)]
    pub skeleton: PathBuf,
    /// Detection CSV (frame,camera,site,u,v,confidence).
    #[arg(long)]
    pub detections: PathBuf,
    /// Camera rig JSON.
    #[arg(long)]
    pub rig: PathBuf,
    /// Solve configuration JSON; defaults to the staged multiview schedule.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian kernel width (pixels) for consensus down-weighting.
    #[arg(long, default_value_t = 10.0)]
    pub sigma_px: f64,
    /// Worker threads for frame-parallel solving (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Keep solving remaining frames when one fails (exit stays nonzero).
    #[arg(long)]
    pub continue_on_error: bool,
}

#[derive(Args)]
pub struct TriangulateArgs {
    /// Camera rig JSON.
    #[arg(long)]
    pub rig: PathBuf,
    /// Detection CSV (frame,camera,site,u,v,confidence).
    #[arg(long)]
    pub detections: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian kernel width (pixels) for consensus down-weighting.
    #[arg(long, default_value_t = 10.0)]
    pub sigma_px: f64,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Skeleton JSON (for forward kinematics of both pose sets).
    #[arg(long)]
    pub skeleton: PathBuf,
    /// Predicted poses JSON.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference poses JSON.
    #[arg(long)]
    pub reference: PathBuf,
    /// Alignment regions JSON (list of named site sets).
    #[arg(long)]
    pub regions: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Fixture: 'chain' (random serial chain) or 'hands' (two-hand rig).
    #[arg(long, default_value = "chain")]
    pub fixture: String,
    /// Rotational coordinates of the chain fixture (ignored for 'hands').
    #[arg(long, default_value_t = 6)]
    pub chain_dofs: usize,
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Isotropic 3D marker noise, meters.
    #[arg(long, default_value_t = 0.0)]
    pub marker_sigma: f64,
    /// Isotropic 2D detection noise, pixels.
    #[arg(long, default_value_t = 0.0)]
    pub pixel_sigma: f64,
    /// Per (camera, site) dropout probability.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Fraction of each limited joint range used by the pose sampler.
    #[arg(long, default_value_t = 0.9)]
    pub limit_fraction: f64,
    /// Half-range (radians) for unlimited rotational coordinates.
    #[arg(long, default_value_t = 0.5)]
    pub rotation_range: f64,
    /// Half-range (meters) for unlimited translational coordinates.
    #[arg(long, default_value_t = 0.1)]
    pub translation_range: f64,
    /// Ring cameras to generate; 0 produces a marker-only scene.
    #[arg(long, default_value_t = 8)]
    pub cameras: usize,
    /// Displace this camera's detections to fake a miscalibrated view.
    #[arg(long)]
    pub outlier_camera: Option<String>,
    /// Pixel shift applied by --outlier-camera.
    #[arg(long, default_value_t = 80.0)]
    pub outlier_shift_px: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct MapRefineArgs {
    /// Skeleton JSON.
    #[arg(long)]
    pub skeleton: PathBuf,
    /// Marker CSV keyed by external ids (frame,site,x,y,z,confidence).
    #[arg(long)]
    pub markers: PathBuf,
    /// Correspondence CSV (external_id,kind,site,weight).
    #[arg(long)]
    pub table: PathBuf,
    /// EM rounds to run.
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    /// Gaussian kernel width (meters) for confidence weights.
    #[arg(long, default_value_t = ikfit::mapping::DEFAULT_KERNEL_TAU)]
    pub tau: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SolveMono(args) => commands::solve_mono(args),
        Command::SolveMultiview(args) => commands::solve_multiview(args),
        Command::Triangulate(args) => commands::triangulate(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Synth(args) => commands::synth(args),
        Command::MapRefine(args) => commands::map_refine(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ikfit: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
