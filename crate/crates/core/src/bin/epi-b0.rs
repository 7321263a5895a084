use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epi_b0::cli::{cmd_correct, cmd_evaluate, cmd_simulate, init_threads, RunConfig};
use epi_b0::recon::Method;
use epi_b0::{Error, Result};

/// Dual-echo EPI distortion correction.
#[derive(Parser)]
#[command(name = "epi-b0", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dual-echo phantom dataset with ground truth.
    Simulate {
        /// Parameters file (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Target SNR in dB; replaces the configured noise level.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        coils: Option<usize>,
    },
    /// Correct a dataset with one method.
    Correct {
        /// Dataset directory holding header.json and the echo files.
        #[arg(long)]
        input: PathBuf,
        /// uncorrected, smoothness, lowrank, direct or iterative.
        #[arg(long)]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Filter width along k_x.
        #[arg(long)]
        fx: Option<usize>,
        /// Filter height along k_y.
        #[arg(long)]
        fy: Option<usize>,
        /// Relative tolerance of the image solve.
        #[arg(long)]
        tol: Option<f64>,
        /// Outer iterations of the iterative method.
        #[arg(long)]
        outer_iters: Option<usize>,
    },
    /// Score result directories against the dataset's ground truth.
    Evaluate {
        /// Dataset directory with ground truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Result directories written by `correct`.
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

fn load(config: &Option<PathBuf>) -> Result<RunConfig> {
    config.as_deref().map(RunConfig::load).unwrap_or_else(|| Ok(RunConfig::default()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate { config, out, seed, snr_db, coils } => {
            let mut cfg = load(&config)?;
            if snr_db.is_some() {
                cfg.phantom.snr_db = snr_db;
            }
            if let Some(c) = coils {
                cfg.phantom.coils = c;
            }
            let h = cmd_simulate(&cfg, &out, seed)?;
            println!("wrote {} ({}x{}, {} coil(s))", out.display(), h.n, h.n, h.coils);
        }
        Command::Correct { input, method, config, out, fx, fy, tol, outer_iters } => {
            let mut cfg = load(&config)?;
            let method: Method = method.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
            if let Some(v) = fx {
                cfg.correct.fx = v;
            }
            if fy.is_some() {
                cfg.correct.fy = fy;
            }
            if let Some(v) = tol {
                cfg.correct.solve.tol = v;
                cfg.direct.solve.tol = v;
                cfg.iterative.solve.tol = v;
            }
            if let Some(v) = outer_iters {
                cfg.iterative.outer_iters = v;
            }
            let h = cmd_correct(&input, method, &cfg, &out)?;
            println!("{}: {:.3} s, {} solver iterations", h.method, h.timings.get("total").copied().unwrap_or(0.0), h.cg_iterations);
        }
        Command::Evaluate { truth, out, results } => {
            let report = cmd_evaluate(&results, &truth, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epi-b0: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
