//! Configuration, persistence formats and the command implementations behind
//! the `chorus` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use checkpoint::Checkpoint;
pub use commands::Ctx;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Sizes the global worker pool from `CHORUS_THREADS` (unset or empty keeps the default).
pub fn init_threads(value: Option<&str>) -> CliResult<Option<usize>> {
    let Some(v) = value.map(str::trim).filter(|v| !v.is_empty()) else {
        return Ok(None);
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config("CHORUS_THREADS", format!("expected a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("worker pool already initialized: {e}");
    }
    Ok(Some(n))
}
