//! Command-line driver: synthetic dataset generation, reconstruction runs,
//! evaluation against ground truth, and rendering from saved checkpoints.
//!
//! Exit codes: 0 success, 2 bad arguments or configuration, 3 I/O failure,
//! 4 finished but at least one frame's tracking diverged.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hdrslam_core::config::{AblateMode, Config, ConfigError, MapBackend};
use hdrslam_core::dataset::Dataset;
use hdrslam_core::geometry::{read_trajectory, CameraIntrinsics};
use hdrslam_core::img::{write_ldr_png, write_pfm, LdrImage};
use hdrslam_core::imaging::{ToneMapper, CRF_SIZE};
use hdrslam_core::map::read_checkpoint;
use hdrslam_core::metrics::{ate_rmse, write_metrics, Alignment};
use hdrslam_core::slam::{evaluate, run_slam, write_outputs, SlamOptions};
use hdrslam_core::synthgen::{generate, SequenceSpec, SynthError};

#[derive(Parser)]
#[command(
    name = "hdrslam",
    version,
    about = "Sharp HDR mapping and tracking from motion-blurred RGB-D video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blurred RGB-D sequence with ground truth.
    Gen(GenArgs),
    /// Reconstruct a radiance map and trajectory from a sequence.
    Run(RunArgs),
    /// Score a finished run against its dataset's ground truth.
    Eval(EvalArgs),
    /// Render views from a saved checkpoint along a trajectory.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene name (`room` or `edge`).
    #[arg(long)]
    scene: String,
    /// Number of frames.
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Frame rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 96)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 72)]
    height: usize,
    /// Skip exposure-window motion blur (sharp captures).
    #[arg(long)]
    no_blur: bool,
    /// Fixed mid-range shutter instead of the auto-exposure schedule.
    #[arg(long)]
    no_autoexposure: bool,
    /// Average tone-mapped frames instead of radiance (wrong-order blur, for
    /// comparison experiments).
    #[arg(long)]
    blur_ldr: bool,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory (as produced by `gen`).
    #[arg(long)]
    dataset: PathBuf,
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    /// Drop one model component.
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's map backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Override the number of virtual cameras per exposure window.
    #[arg(long)]
    ncam: Option<NonZeroUsize>,
}

#[derive(Copy, Clone, ValueEnum)]
enum AblateArg {
    Traj,
    Tonemap,
    Blur,
}

#[derive(Copy, Clone, ValueEnum)]
enum BackendArg {
    Voxel,
    Gaussian,
}

#[derive(Args)]
struct EvalArgs {
    /// Results directory (as produced by `run`).
    #[arg(long)]
    result: PathBuf,
    /// Dataset directory the run was fitted to.
    #[arg(long)]
    dataset: PathBuf,
    /// Output metrics file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Align the trajectory without a scale correction.
    #[arg(long)]
    rigid: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Map checkpoint (as produced by `run`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectory file with the poses to render.
    #[arg(long)]
    trajectory: PathBuf,
    /// Output image directory.
    #[arg(long)]
    out: PathBuf,
    /// Write radiance as PFM instead of tone-mapped PNG.
    #[arg(long)]
    hdr: bool,
    /// Exposure duration multiplying radiance before tone mapping.
    #[arg(long, default_value_t = 1.0)]
    exposure: f64,
    /// Tone-map through the checkpoint's response curve with this frame's
    /// white balance and duration.
    #[arg(long)]
    apply_tonemap: Option<usize>,
}

/// Argument problems that clap cannot catch (cross-argument validation).
#[derive(Debug)]
struct BadArgs(String);

impl std::fmt::Display for BadArgs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for BadArgs {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Maps an error chain onto the documented exit codes: invalid values are 2,
/// anything touching the filesystem is 3.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<BadArgs>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Io { .. } => 3,
                ConfigError::Parse { .. } | ConfigError::Invalid(_) => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::UnknownScene(_) | SynthError::BadSpec(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let mut spec = SequenceSpec::new(&a.scene);
    spec.n_frames = a.frames;
    spec.fps = a.fps;
    spec.seed = a.seed;
    spec.width = a.width;
    spec.height = a.height;
    spec.blur = !a.no_blur;
    spec.autoexposure = !a.no_autoexposure;
    spec.blur_ldr = a.blur_ldr;

    let seq = generate(&spec, &a.out)
        .with_context(|| format!("generating `{}` into {}", a.scene, a.out.display()))?;
    println!(
        "wrote {} frames ({}x{}) to {}",
        seq.meta.n_frames(),
        a.width,
        a.height,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(backend) = a.backend {
        cfg.map.backend = match backend {
            BackendArg::Voxel => MapBackend::Voxel,
            BackendArg::Gaussian => MapBackend::Gaussian,
        };
    }
    if let Some(ncam) = a.ncam {
        cfg.geometry.n_cam = ncam.get();
    }
    if let Some(ablate) = a.ablate {
        cfg.slam.ablate = Some(match ablate {
            AblateArg::Traj => AblateMode::Traj,
            AblateArg::Tonemap => AblateMode::Tonemap,
            AblateArg::Blur => AblateMode::Blur,
        });
    }
    cfg.validate()?;

    let ds = Dataset::load(&a.dataset)
        .with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let opts = SlamOptions::from_config(&cfg);
    let result = run_slam(&ds, &cfg, &opts)?;

    write_outputs(&a.out, &result)?;
    // Archive the effective configuration (flag overrides folded in); running
    // again from this file alone reproduces the result byte for byte.
    cfg.save(&a.out.join("config.json"))?;

    println!(
        "tracked {} frames ({} keyframes) -> {}",
        result.model.n_frames(),
        result.keyframes.len(),
        a.out.display()
    );
    if !result.diverged.is_empty() {
        eprintln!(
            "warning: tracking diverged and was reverted on frames {:?}",
            result.diverged
        );
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let ds = Dataset::load(&a.dataset)
        .with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let mut report = evaluate(&a.result, &ds)?;

    if a.rigid {
        let est = read_trajectory(&a.result.join("trajectory.txt"))?;
        let gt = ds
            .gt_trajectory
            .as_ref()
            .ok_or_else(|| BadArgs("dataset has no ground-truth trajectory".into()))?;
        report.ate_rmse_m = ate_rmse(&est, gt, Alignment::Rigid)?;
    }

    if report.mean_psnr_db.is_none() {
        eprintln!("warning: dataset has no sharp reference frames; trajectory metrics only");
    }
    write_metrics(&a.out, &report)?;

    println!("ATE RMSE: {:.4} m", report.ate_rmse_m);
    if let (Some(p), Some(s), Some(d)) =
        (report.mean_psnr_db, report.mean_ssim, report.mean_depth_l1_cm)
    {
        println!("PSNR: {p:.2} dB  SSIM: {s:.4}  depth L1: {d:.2} cm");
    }
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(a: RenderArgs) -> Result<ExitCode> {
    let (map, extras) = read_checkpoint(&a.checkpoint)
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let intr = intrinsics_from_extras(&extras)?;
    let points = read_trajectory(&a.trajectory)
        .with_context(|| format!("reading trajectory {}", a.trajectory.display()))?;
    if !(a.exposure.is_finite() && a.exposure > 0.0) {
        return Err(BadArgs(format!("--exposure must be positive, got {}", a.exposure)).into());
    }

    // Either the checkpoint's recovered tone stage for one frame, or an
    // identity stage (unit white balance and duration, linear response with
    // leaky clipping).
    let (tone, tone_frame) = match a.apply_tonemap {
        Some(frame) => {
            let tone = tone_from_extras(&extras)?;
            if frame >= tone.n_frames() {
                return Err(BadArgs(format!(
                    "--apply-tonemap frame {frame} out of range (checkpoint has {})",
                    tone.n_frames()
                ))
                .into());
            }
            (tone, frame)
        }
        None => (ToneMapper::new(vec![0.0]), 0),
    };

    std::fs::create_dir_all(&a.out)?;
    for (i, point) in points.iter().enumerate() {
        let (mut hdr, _, _) = map.render_frame(&point.pose, &intr);
        for px in hdr.data.iter_mut() {
            for c in px.iter_mut() {
                *c *= a.exposure;
            }
        }
        if a.hdr {
            write_pfm(&a.out.join(format!("{i:06}.pfm")), &hdr)?;
        } else {
            let mut ldr = LdrImage::new(intr.width, intr.height);
            for (o, px) in ldr.data.iter_mut().zip(&hdr.data) {
                *o = tone.apply(tone_frame, *px);
            }
            write_ldr_png(&a.out.join(format!("{i:06}.png")), &ldr)?;
        }
    }
    println!("rendered {} views to {}", points.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn intrinsics_from_extras(
    extras: &hdrslam_core::map::ExtraArrays,
) -> Result<CameraIntrinsics> {
    let v = extras
        .get("meta/intrinsics")
        .filter(|v| v.len() == 6)
        .context("checkpoint is missing camera intrinsics")?;
    Ok(CameraIntrinsics {
        width: v[0] as usize,
        height: v[1] as usize,
        fx: v[2],
        fy: v[3],
        cx: v[4],
        cy: v[5],
    })
}

fn tone_from_extras(extras: &hdrslam_core::map::ExtraArrays) -> Result<ToneMapper> {
    let log_dt = extras
        .get("tone/log_dt")
        .context("checkpoint is missing exposure durations")?
        .clone();
    let n = log_dt.len();
    let wb_flat = extras
        .get("tone/log_wb")
        .filter(|v| v.len() == 3 * n)
        .context("checkpoint is missing white balance")?;
    let crf_raw = extras
        .get("tone/crf_raw")
        .filter(|v| v.len() == CRF_SIZE)
        .context("checkpoint is missing the response curve")?;

    let mut tone = ToneMapper::new(log_dt);
    for i in 0..n {
        tone.log_wb[i] = [wb_flat[3 * i], wb_flat[3 * i + 1], wb_flat[3 * i + 2]];
    }
    tone.crf_raw = crf_raw.clone();
    tone.reproject();
    Ok(tone)
}
