//! Command-line interface: generate synthetic pairs, fit them, check
//! gradients, evaluate depth maps, and render saved density volumes.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use depthvol::difftape::{grad_check, EvalConfig, ParamSet};
use depthvol::geometry::Twist;
use depthvol::grid::Field3;
use depthvol::harness::config::apply_overrides;
use depthvol::harness::io;
use depthvol::harness::{
    parse_experiment_config, resolve_pair, run_experiment, ExperimentConfig, PairSource,
};
use depthvol::metrics::{depth_metrics, DepthMetrics, EvalClamp};
use depthvol::regularization::BrightnessParams;
use depthvol::rendering::{compute_weights, render_depth_with};

#[derive(Parser)]
#[command(
    name = "depthvol",
    about = "Differentiable density-volume depth fitting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines; omit for built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master random seed (shorthand for `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (shorthand for `--set out_dir=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair and export it (PNG + PFM + sidecars).
    Gen(ConfigArgs),
    /// Fit a pair (generated or ingested) and write all artifacts.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Exit nonzero unless the configured abs_rel threshold holds.
        #[arg(long)]
        assert: bool,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Finite-difference step on the raw parameters.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates sampled per parameter block.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Score a predicted depth map against ground truth.
    Eval {
        /// Predicted depth (PFM).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth depth (PFM).
        #[arg(long)]
        gt: PathBuf,
        /// Rescale the prediction by the ratio of medians first.
        #[arg(long)]
        median_scale: bool,
        #[arg(long, default_value_t = 0.1)]
        min_depth: f64,
        #[arg(long, default_value_t = 80.0)]
        max_depth: f64,
    },
    /// Render the depth map of a saved density volume.
    Render {
        /// Density volume file (.dvol).
        #[arg(long)]
        volume: PathBuf,
        /// Output depth map (PFM).
        #[arg(long)]
        out: PathBuf,
        /// Optional grayscale preview PNG.
        #[arg(long)]
        png: Option<PathBuf>,
        /// Divide by the accumulated weight.
        #[arg(long)]
        normalize: bool,
    },
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = io::read_text(path)?;
            parse_experiment_config(path, &text)?
        }
        None => ExperimentConfig::default(),
    };
    let mut overrides = Vec::new();
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out_dir".into(), out.display().to_string()));
    }
    apply_overrides(&mut cfg, &overrides)?;
    Ok(cfg)
}

fn cmd_gen(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let PairSource::Synthetic(_) = &cfg.source else {
        bail!("`gen` needs a synthetic scene configuration, not ingest paths");
    };
    let pair = resolve_pair(&cfg)?;
    let dir = cfg
        .fit
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("pair"));
    io::export_pair(&dir, &pair)?;
    println!("wrote pair to {}", dir.display());
    Ok(())
}

fn cmd_fit(args: &ConfigArgs, assert: bool) -> anyhow::Result<ExitCode> {
    let cfg = load_config(args)?;
    let (report, passed) = run_experiment(&cfg)?;
    if let Some(m) = report.final_metrics_t() {
        println!(
            "final target metrics: abs_rel {:.4}  sq_rel {:.4}  rmse {:.4}  d1 {:.3}",
            m.abs_rel, m.sq_rel, m.rmse, m.delta1
        );
    }
    if let Some(p) = report.final_pose_error() {
        println!(
            "pose error: translation {:.5}  rotation {:.4} deg",
            p.translation, p.rotation_deg
        );
    }
    if let Some(step) = report.diverged_at {
        eprintln!("diverged at step {step}; partial report written");
    }
    println!(
        "ran {} steps in {:.1} s (loss {:.6} -> {:.6})",
        report.trace.len(),
        report.wall_clock_sec,
        report.trace.first().map(|l| l.total).unwrap_or(f64::NAN),
        report.trace.last().map(|l| l.total).unwrap_or(f64::NAN),
    );
    if let Some(dir) = &report.config.out_dir {
        println!("artifacts in {}", dir.display());
    }
    if assert && !passed {
        eprintln!("acceptance threshold not met");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(
    args: &ConfigArgs,
    step: f64,
    tol: f64,
    samples: usize,
) -> anyhow::Result<ExitCode> {
    let cfg = load_config(args)?;
    let pair = resolve_pair(&cfg)?;
    let fit = &cfg.fit;
    let mut eval_cfg = EvalConfig::new(fit.k_planes, fit.z_min, fit.z_max);
    eval_cfg.plane_mode = fit.plane_mode;
    eval_cfg.loss_weights = fit.loss_weights;
    eval_cfg.gamma = fit.resolved_gamma();
    eval_cfg.smoothness_target = fit.smoothness_target;
    eval_cfg.normalize_depth = fit.normalize_depth;

    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let (w, h) = (pair.width(), pair.height());
    let mut raw_t = Field3::zeros(fit.k_planes, w, h);
    let mut raw_s = Field3::zeros(fit.k_planes, w, h);
    for v in raw_t.data_mut() {
        *v = rng.random_range(-2.0..0.5);
    }
    for v in raw_s.data_mut() {
        *v = rng.random_range(-2.0..0.5);
    }
    let params = ParamSet {
        raw_density_t: raw_t,
        raw_density_s: raw_s,
        twist_ts: Twist::from_array([
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ]),
        brightness: BrightnessParams {
            a: 1.0 + rng.random_range(-0.1..0.1),
            b: rng.random_range(-0.05..0.05),
        },
    };
    let report = grad_check(&params, &pair, &eval_cfg, step, tol, samples, &mut rng)?;
    println!("{report}");
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_eval(
    pred: &PathBuf,
    gt: &PathBuf,
    median_scale: bool,
    min_depth: f64,
    max_depth: f64,
) -> anyhow::Result<()> {
    let pred = io::read_pfm(pred)?;
    let gt = io::read_pfm(gt)?;
    let m = depth_metrics(
        &pred,
        &gt,
        EvalClamp {
            min_depth,
            max_depth,
        },
        median_scale,
    )?;
    println!("{}", DepthMetrics::CSV_HEADER);
    println!("{}", m.csv_row());
    Ok(())
}

fn cmd_render(
    volume: &PathBuf,
    out: &PathBuf,
    png: Option<&PathBuf>,
    normalize: bool,
) -> anyhow::Result<()> {
    let vol = io::read_volume(volume)?;
    let depth = render_depth_with(
        &compute_weights(&vol.activated(), &vol.planes),
        &vol.planes,
        normalize,
    );
    io::write_pfm(out, &depth)?;
    if let Some(p) = png {
        io::write_png_rgb(p, &io::depth_preview(&depth))?;
    }
    println!(
        "rendered {} planes to {}",
        vol.planes.count(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args).map(|_| ExitCode::SUCCESS),
        Command::Fit { cfg, assert } => cmd_fit(cfg, *assert),
        Command::GradCheck {
            cfg,
            step,
            tol,
            samples,
        } => cmd_grad_check(cfg, *step, *tol, *samples),
        Command::Eval {
            pred,
            gt,
            median_scale,
            min_depth,
            max_depth,
        } => cmd_eval(pred, gt, *median_scale, *min_depth, *max_depth)
            .map(|_| ExitCode::SUCCESS),
        Command::Render {
            volume,
            out,
            png,
            normalize,
        } => cmd_render(volume, out, png.as_ref(), *normalize).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
