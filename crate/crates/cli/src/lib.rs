//! Command-line driver: configuration, problem and model setup, the
//! `train`/`sample`/`eval`/`oracle` commands and process exit codes.

pub mod commands;
pub mod config;
pub mod obsfile;
pub mod oracle;
pub mod setup;

use umcmc::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ChainDivergence { .. }
        | Error::TrainingDivergence { .. }
        | Error::CgNonConvergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

/// Sizes the global thread pool from `UMCMC_THREADS` when set.
pub fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("UMCMC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("UMCMC_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("UMCMC_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
