use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use umcmc_cli::commands::{self, parse_metrics};
use umcmc_cli::oracle::{self, Hooks, Suite};
use umcmc_cli::{exit_code, init_threads, EXIT_ORACLE, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "umcmc",
    version,
    about = "Train, run and verify unfolded MCMC posterior samplers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run independent chains on one observation.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long, default_value_t = 8)]
        chains: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the images of a dataset manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset of psnr, ssim, sw, latent_w2, mmd, pca, residual_corr.
        #[arg(long)]
        metrics: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        chains: usize,
    },
    /// Run an oracle suite: autodiff, conditional, quadrature or metrics.
    Oracle {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write an observation drawn from the configured problem.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(e: umcmc::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    match cli.command {
        Command::Train { config, resume } => match commands::train(&config, resume.as_deref()) {
            Ok(out) => {
                println!("trained to step {}", out.steps);
                println!("log: {}", out.log.display());
                for c in &out.checkpoints {
                    println!("checkpoint: {}", c.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Sample {
            ckpt,
            obs,
            chains,
            seed,
            out,
        } => match commands::sample(&ckpt, &obs, chains, seed, &out) {
            Ok(path) => {
                println!("samples: {}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Eval {
            ckpt,
            manifest,
            metrics,
            seed,
            chains,
        } => match parse_metrics(&metrics)
            .and_then(|m| commands::eval(&ckpt, &manifest, &m, seed, chains))
        {
            Ok(report) => {
                print!("{}", report.to_table());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Oracle {
            suite,
            seed,
            corrupt_gradient,
        } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match oracle::run(suite, seed, Hooks { corrupt_gradient }) {
                Ok(checks) => {
                    for c in &checks {
                        println!("{c}");
                    }
                    let failed = checks.iter().filter(|c| !c.passed).count();
                    println!("{} checks, {failed} failed", checks.len());
                    if failed == 0 {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_ORACLE as u8)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Simulate { config, seed, out } => match commands::simulate(&config, seed, &out) {
            Ok(()) => {
                println!("observation: {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
