use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fringe_slam::pipeline::{
    run_evaluate, run_reconstruct, run_slam, write_dataset, write_slam_outputs, PipelineConfig,
    Preset,
};
use fringe_slam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fringe-slam",
    version,
    about = "Fringe-projection mapping and sensor localization"
)]
struct Cli {
    /// JSON configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for simulation noise and RANSAC.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Turntable,
    Corridor,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    Simulate {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Views per turntable revolution.
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        turns: Option<usize>,
        /// Corridor frame count.
        #[arg(long)]
        frames: Option<usize>,
        /// Corridor overlap fraction between neighbors.
        #[arg(long)]
        overlap: Option<f64>,
        /// Intensity noise sigma, full-scale units.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Decode every frame into a colored point cloud.
    Reconstruct {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Reconstruct, stitch, localize and evaluate a dataset.
    Slam {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Skip loop-closure drift redistribution.
        #[arg(long)]
        no_loop_closure: bool,
    },
    /// Compare an estimated trajectory CSV with ground truth.
    Evaluate {
        #[arg(long)]
        estimated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FRINGE_SLAM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Config(format!(
                "FRINGE_SLAM_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Simulate {
            preset,
            views,
            turns,
            frames,
            overlap,
            noise,
        } => {
            let s = &mut cfg.simulate;
            if let Some(p) = preset {
                s.preset = match p {
                    PresetArg::Turntable => Preset::Turntable,
                    PresetArg::Corridor => Preset::Corridor,
                };
            }
            if let Some(v) = views {
                s.turntable.views_per_turn = v;
            }
            if let Some(t) = turns {
                s.turntable.turns = t;
            }
            if let Some(f) = frames {
                s.corridor.frames = f;
            }
            if let Some(o) = overlap {
                s.corridor.overlap = o;
            }
            if let Some(n) = noise {
                s.noise_sigma = n;
            }
            let spec = cfg.simulation()?;
            write_dataset(&spec, &cfg.output)?;
            println!("wrote {} frames to {}", spec.len(), cfg.output.display());
        }
        Command::Reconstruct {
            dataset,
            calibration,
        } => {
            override_paths(&mut cfg, dataset, calibration);
            cfg.validate()?;
            let ds = cfg.open_dataset()?;
            let report = run_reconstruct(&cfg, &ds, &cfg.output)?;
            for w in report.warnings() {
                eprintln!("warning: {w}");
            }
            println!(
                "reconstructed {} of {} frames into {}",
                report.frames.len() - report.failures(),
                report.frames.len(),
                cfg.output.display()
            );
        }
        Command::Slam {
            dataset,
            calibration,
            no_loop_closure,
        } => {
            override_paths(&mut cfg, dataset, calibration);
            if no_loop_closure {
                cfg.loop_closure = false;
            }
            cfg.validate()?;
            let ds = cfg.open_dataset()?;
            let out = run_slam(&cfg, &ds)?;
            write_slam_outputs(&out, &cfg.output)?;
            let r = &out.report;
            println!(
                "frames {}, map points {}",
                out.trajectory.len(),
                r.map_points
            );
            println!("median pair rms {:.4} mm", r.pair_rms_median_mm);
            for l in &r.loop_closures {
                println!(
                    "loop at frame {}: {:.3e} rad, {:.4} mm before correction",
                    l.anchor, l.rotation_rad, l.translation_mm
                );
            }
            if let Some(e) = &r.evaluation {
                println!("ATE {:.4} mm", e.ate_rms_mm);
                if let Some(m) = e.map_rms_mm {
                    println!("map rms {m:.4} mm");
                }
            }
        }
        Command::Evaluate { estimated, truth } => {
            let report = run_evaluate(&estimated, &truth, &cfg.output)?;
            println!(
                "ATE {:.6} mm over {} frames",
                report.ate_rms_mm, report.frames
            );
            if let Some(l) = report.loop_residual() {
                println!(
                    "loop residual {:.3e} rad, {:.6} mm",
                    l.rotation_rad, l.translation_mm
                );
            }
        }
    }
    Ok(())
}

fn override_paths(
    cfg: &mut PipelineConfig,
    dataset: Option<PathBuf>,
    calibration: Option<PathBuf>,
) {
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    if calibration.is_some() {
        cfg.calibration = calibration;
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
