//! Desk-scale experiment harness: configuration, the reproducible benchmark
//! grid, the λ-sweep, the pairwise HSIC protocol, and report/plot emission.

pub mod bench;
pub mod config;
pub mod error;
pub mod pairwise;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod world;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};

use std::path::Path;

/// Builds the worker pool, honouring `DD_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("DD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))
}
