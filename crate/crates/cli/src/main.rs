use clap::{Args, Parser, Subcommand, ValueEnum};
use rangeloc::pipeline::EstimatorMode;
use rangeloc_cli::commands::{self, EvaluateArgs, Inputs, RotationReference};
use rangeloc_cli::{CliError, Overrides, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rangeloc",
    version,
    about = "Sliding-window range-based localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    RangeOnly,
    #[value(alias = "range-orientation")]
    Fused,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied beneath the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Sliding window size N.
    #[arg(long)]
    window: Option<usize>,
    /// LM iterations per window M.
    #[arg(long)]
    iters: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let overrides = Overrides {
            preset: self.preset.clone(),
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                Mode::RangeOnly => EstimatorMode::RangeOnly,
                Mode::Fused => EstimatorMode::RangeOrientation,
            }),
            window: self.window,
            iters: self.iters,
        };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Truth,
    Orientation,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate anchors, ranges, orientations and truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the trajectory from measurement files.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Directory holding the input files.
        #[arg(long, default_value = ".")]
        input: PathBuf,
    },
    /// Compare estimates with ground truth.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Rotation reference for the orientation error.
        #[arg(long, value_enum, default_value = "truth")]
        reference: Reference,
        #[arg(long)]
        orientations: Option<PathBuf>,
        /// Run summary written by localize, for rejection counts and timing.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Per-step stability diagnostics of a range-only run.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        input: PathBuf,
    },
    /// Time window solves on a simulated stream.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = common.load()?;
            let s = commands::simulate(&cfg, &common.out)?;
            println!(
                "wrote {} ranges, {} orientations, {} truth samples",
                s.ranges, s.orientations, s.truth
            );
        }
        Command::Localize { common, input } => {
            let cfg = common.load()?;
            let s = commands::localize(&cfg, &Inputs::resolve(&cfg, &input), &common.out)?;
            println!(
                "{} estimates, {} rejected, {} restarts",
                s.estimates, s.stats.rejected, s.stats.restarts
            );
        }
        Command::Evaluate {
            estimates,
            truth,
            reference,
            orientations,
            run,
            out,
        } => {
            let args = EvaluateArgs {
                estimates: &estimates,
                truth: &truth,
                orientations: orientations.as_deref(),
                run: run.as_deref(),
                reference: match reference {
                    Reference::Truth => RotationReference::Truth,
                    Reference::Orientation => RotationReference::Orientation,
                },
            };
            let m = commands::evaluate(&args, &out)?;
            println!("E_T {:.4} m  E_RMSE {:.4} m", m.e_t, m.e_rmse);
            if let Some(e_o) = m.e_o {
                println!("E_O {e_o:.4}");
            }
            println!(
                "axis mean |e| x {:.4} y {:.4} z {:.4} m",
                m.axis_mean[0], m.axis_mean[1], m.axis_mean[2]
            );
            print!("{}", commands::cdf_table(&m));
        }
        Command::Diagnose { common, input } => {
            let cfg = common.load()?;
            let (reports, s) =
                commands::diagnose(&cfg, &Inputs::resolve(&cfg, &input), &common.out)?;
            for r in reports.iter().filter(|r| !r.compliant()) {
                println!(
                    "FAIL step {} t={:.3}: alpha {:.4} >= 1",
                    r.step, r.t, r.alpha
                );
            }
            println!(
                "{} {} steps diagnosed, max alpha {:.4}",
                if s.compliant() { "PASS" } else { "FAIL" },
                s.steps,
                s.max_alpha
            );
        }
        Command::Bench { common } => {
            let cfg = common.load()?;
            let b = commands::bench(&cfg, &common.out)?;
            println!(
                "N={} M={}: mean step {:.3} ms, mean solve {:.3} ms over {} steps; budget {:.1} ms {}",
                b.window,
                b.iterations,
                b.mean_step_time * 1e3,
                b.mean_solve_time * 1e3,
                b.steps,
                b.budget * 1e3,
                if b.within_budget { "met" } else { "missed" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rangeloc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
