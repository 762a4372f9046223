//! Command implementations behind the `mno` binary.
//!
//! Every command is a plain function so that tests can drive it without a
//! subprocess. Exit statuses: 0 success, 1 verification failure, 2
//! configuration or usage error, 3 solver failure, 4 training divergence.

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

pub use commands::{cmd_eval, cmd_gen_data, cmd_spectrum, cmd_train, SplitSel};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use verify::{run_suite, VerifyOptions, VerifyReport};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MNO_THREADS";

/// Size the worker pool from `--threads`, else `MNO_THREADS`, else the
/// number of logical cores. Returns the thread count in effect.
pub fn init_threads(threads: Option<usize>) -> CliResult<usize> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| CliError::config(format!("{THREADS_ENV}: not a count: {v:?}")))?),
        Err(_) => None,
    };
    let requested = threads.or(from_env);
    if requested == Some(0) {
        return Err(CliError::config("threads: must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = requested {
        mno_core::exec::parallel::init_pool(n);
    }
    Ok(mno_core::exec::worker_count())
}

/// `cmd_verify`: run the suite; a failing property maps to exit status 1.
pub fn cmd_verify(opts: VerifyOptions) -> (VerifyReport, CliResult<()>) {
    let report = run_suite(opts);
    let res = if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed: {}", report.failures().join(", "))))
    };
    (report, res)
}
