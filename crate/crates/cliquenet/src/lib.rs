//! Std companion of `cliquenet-core`: JSON configs, the CIFAR-10 loader,
//! binary checkpoints, CSV/PGM export and the command-line front end.

pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;

pub use cliquenet_core;
pub use error::{CliError, Result};

/// Sizes the global worker pool from `CLIQUENET_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CLIQUENET_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("CLIQUENET_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}
