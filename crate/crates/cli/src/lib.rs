//! Operator-facing surface for the spiking detector: on-disk formats,
//! run configuration, and the CLI commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod event_io;
pub mod stacks;

pub use error::{CliError, Result};

/// Cap worker parallelism from the SFPN_THREADS environment variable.
/// Returns the effective thread count.
pub fn init_threads() -> usize {
    let requested = std::env::var("SFPN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0);
    if let Some(n) = requested {
        // Ignore failure: the pool may already be initialized (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        n
    } else {
        rayon::current_num_threads()
    }
}
