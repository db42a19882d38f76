use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpcam::config::{parse_fractions, parse_tau, resolve, ConfigFile, Overrides};
use dpcam::error::exit;
use dpcam::pipeline::{run_flux_sweep, run_pipeline, run_steering, steering_pair, RunManifest};
use dpcam::presets::PRESETS;
use dpcam::{CliError, ExperimentConfig};
use dpcam_core::measure::log_spaced;
use dpcam_core::recon::Tau;

#[derive(Parser)]
#[command(name = "dpcam", version, about = "Compressive double-pixel correlation imaging simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, reconstruct and analyze every configured basis.
    Run(Common),
    /// Reconstruction error against photon flux.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50.0)]
        flux_min: f64,
        #[arg(long, default_value_t = 5e4)]
        flux_max: f64,
        #[arg(long, default_value_t = 8)]
        points: usize,
    },
    /// Position and momentum runs judged against the entropic steering bound.
    Steer(Common),
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; its fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Detected photons per pattern.
    #[arg(long)]
    flux: Option<f64>,
    /// Number of mask pairs.
    #[arg(long)]
    m: Option<usize>,
    /// Regularization weight, or `auto`.
    #[arg(long, value_parser = parse_tau)]
    tau: Option<Tau>,
    /// Comma-separated threshold fractions to sweep.
    #[arg(long, value_parser = parse_fractions)]
    threshold: Option<Vec<f64>>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let file = self.config.as_deref().map(ConfigFile::load).transpose()?;
        let o = Overrides {
            seed: self.seed,
            flux: self.flux,
            m: self.m,
            tau: self.tau,
            thresholds: self.threshold.clone(),
            replicas: self.replicas,
            out: self.out.clone(),
        };
        resolve(self.preset.as_deref(), file, &o)
    }
}

fn status(manifest: &RunManifest) -> i32 {
    for f in &manifest.failures {
        eprintln!("stage {} failed (replica {}, {:?}): {}", f.stage, f.replica, f.basis, f.error);
    }
    for s in &manifest.not_converged {
        eprintln!("solver did not converge (replica {}, {})", s.replica, s.basis);
    }
    if manifest.is_clean() {
        exit::OK
    } else {
        exit::NOT_CONVERGED
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run(c) => {
            let config = c.resolve()?;
            let (report, manifest) = run_pipeline(&config)?;
            print_json(&report.summary);
            Ok(status(&manifest))
        }
        Command::Sweep {
            common,
            flux_min,
            flux_max,
            points,
        } => {
            if !(flux_min > 0.0 && flux_max >= flux_min && points >= 1) {
                return Err(CliError::Config("need 0 < flux-min ≤ flux-max and points ≥ 1".into()));
            }
            let config = common.resolve()?;
            let (result, manifest) = run_flux_sweep(&config, &log_spaced(flux_min, flux_max, points))?;
            println!("flux,mse,beta_margin");
            for ((f, e), b) in result.flux_grid.iter().zip(&result.mse).zip(&result.beta_margin) {
                println!("{f:e},{e:e},{b:e}");
            }
            Ok(status(&manifest))
        }
        Command::Steer(c) => {
            let config = c.resolve()?;
            let (x, k) = steering_pair(&config)?;
            let (report, manifest) = run_steering(&x, &k)?;
            print_json(&(report.bound, &report.thresholded, &report.fitted));
            Ok(status(&manifest))
        }
        Command::Presets => {
            for name in PRESETS {
                println!("{name}");
            }
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
