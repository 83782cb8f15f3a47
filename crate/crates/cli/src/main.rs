use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use splade_core::bench::{run_bench, BenchConfig};
use splade_core::calibrate::Kernel;
use splade_core::io::{self, Channel, FrameSet, PatchDoc};
use splade_core::metrics::{records_to_csv, BenchRecord};
use splade_core::simulate::{FieldKind, Scenario, SimulationSpec};
use splade_core::splade::{splade_detect, CalibrationConfig, Connectivity, ParamSource, SpladeConfig};
use splade_core::Stage1Params;

#[derive(Parser)]
#[command(name = "splade", version, about = "Find anomalous rectangular patches in lattice data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a noise field with injected patches.
    Simulate {
        /// JSON simulation spec (dims, field, baseline, patches).
        #[arg(long)]
        spec: PathBuf,
        /// Output grid file.
        #[arg(long)]
        out: PathBuf,
        /// Where to write the true patches; defaults to OUT with a .json extension.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Detect patches in a grid file.
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output JSON; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Score an estimate against the truth as one CSV row.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label for the scenario column.
        #[arg(long, default_value = "custom")]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Value for the time_s column.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
    },
    /// Replicate loop over a canonical scenario.
    Bench {
        #[arg(long, default_value = "config1")]
        scenario: Scenario,
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// iid, sar:RHO, mdep:M or maxstable:TAIL[:BASE].
        #[arg(long, default_value = "sar:0.04")]
        noise: FieldKind,
        #[arg(long, default_value_t = 1.0)]
        jump: f64,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write 0 in the time_s column so repeated runs are byte-identical.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Detect patches in each frame of a PPM/PGM sequence, one JSON line per frame.
    Frames {
        #[arg(long)]
        dir: PathBuf,
        /// Half-open range of frame indices averaged into the baseline image.
        #[arg(long)]
        baseline: String,
        /// r, g, b or mean.
        #[arg(long, default_value = "mean")]
        channel: Channel,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectArgs,
    },
}

#[derive(Args, Clone)]
struct DetectArgs {
    /// Block side exponent of the screening stage.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Subsampling exponent of the refinement stage.
    #[arg(long, default_value_t = 0.5)]
    alpha2: f64,
    /// Window growth exponent of the refinement stage.
    #[arg(long, default_value_t = 0.01)]
    kappa2: f64,
    /// Window constant of the refinement stage.
    #[arg(long, default_value_t = 1.0)]
    window_const: f64,
    /// Family-wise level of the block threshold.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Baseline mean: auto or a number.
    #[arg(long, default_value = "auto")]
    mu0: ParamSource,
    /// Long-run standard deviation: auto or a number.
    #[arg(long, default_value = "auto")]
    sigma: ParamSource,
    #[arg(long, default_value_t = 2)]
    margin_blocks: usize,
    #[arg(long, default_value_t = 1.0)]
    min_size_factor: f64,
    /// faces or faces+corners.
    #[arg(long, default_value = "faces")]
    connectivity: Connectivity,
    /// Boundary-layer thickness exponent.
    #[arg(long, default_value_t = splade_core::calibrate::DEFAULT_BETA)]
    beta: f64,
    /// bartlett or parzen.
    #[arg(long, default_value = "bartlett")]
    kernel: Kernel,
}

impl DetectArgs {
    fn config(&self) -> Result<SpladeConfig> {
        let cfg = SpladeConfig {
            alpha: self.alpha,
            kappa_level: self.level,
            stage2: Stage1Params {
                alpha: self.alpha2,
                kappa: self.kappa2,
                window_const: self.window_const,
            },
            envelope_margin_blocks: self.margin_blocks,
            min_size_factor: self.min_size_factor,
            mu0: self.mu0,
            sigma: self.sigma,
            connectivity: self.connectivity,
            calibration: CalibrationConfig {
                beta: self.beta,
                kernel: self.kernel,
                bandwidths: None,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn pretty(doc: &PatchDoc) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, out, truth } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SimulationSpec = serde_json::from_str(&text).context("parsing simulation spec")?;
            let grid = spec.run()?;
            io::save_grid(&out, &grid)?;
            let truth_path = truth.unwrap_or_else(|| out.with_extension("json"));
            PatchDoc::from_truth(&spec.dims, &spec.truth).save(&truth_path)?;
        }
        Command::Detect { input, out, detect } => {
            let cfg = detect.config()?;
            let grid = io::load_grid(&input).with_context(|| format!("reading {}", input.display()))?;
            let det = splade_detect(&grid, &cfg)?;
            emit(out.as_deref(), &pretty(&det.into())?)?;
        }
        Command::Eval {
            truth,
            est,
            out,
            scenario,
            seed,
            time,
        } => {
            let t = PatchDoc::load(&truth).with_context(|| format!("reading {}", truth.display()))?;
            let e = PatchDoc::load(&est).with_context(|| format!("reading {}", est.display()))?;
            if t.dims != e.dims {
                bail!("truth dims {:?} differ from estimate dims {:?}", t.dims, e.dims);
            }
            let rec = BenchRecord::evaluate(&scenario, seed, &t.rects(), &e.rects(), &t.dims, time)?;
            emit(out.as_deref(), &records_to_csv(&[rec]))?;
        }
        Command::Bench {
            scenario,
            grid,
            noise,
            jump,
            reps,
            seed,
            no_timing,
            out,
            detect,
        } => {
            let cfg = BenchConfig {
                scenario,
                grid,
                noise,
                jump,
                reps,
                seed,
                detect: detect.config()?,
                timing: !no_timing,
            };
            let records = run_bench(&cfg)?;
            emit(out.as_deref(), &records_to_csv(&records))?;
        }
        Command::Frames {
            dir,
            baseline,
            channel,
            out,
            detect,
        } => {
            let cfg = detect.config()?;
            let frames = FrameSet::open(&dir)?;
            let base = frames.baseline(io::parse_range(&baseline)?, channel)?;
            log::info!("{} frames of {:?}", frames.len(), frames.dims());
            let docs: Vec<String> = (0..frames.len())
                .into_par_iter()
                .map(|i| -> Result<String> {
                    let g = frames.centred(i, channel, &base)?;
                    let det = splade_detect(&g, &cfg)
                        .with_context(|| format!("frame {}", frames.paths()[i].display()))?;
                    Ok(PatchDoc::from(det).to_json()?)
                })
                .collect::<Result<_>>()?;
            let mut text = docs.join("\n");
            text.push('\n');
            emit(out.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("SPLADE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: SPLADE_THREADS must be a positive integer, got {v:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
