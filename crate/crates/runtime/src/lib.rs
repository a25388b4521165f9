//! Runtime for hybrid-resolution video-language pre-training: run
//! configuration, synthetic captioned clips, the two-stage training loop,
//! checkpoints, retrieval evaluation and the `hdvila` command line.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frames;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use hdvila_core::optim::{lr_schedule, AdamW, AdamWConfig};
pub use synth::{generate_synthetic, SyntheticSample, SyntheticVideo};
pub use train::{train, StepMetrics, TrainSummary};

/// Sizes the global thread pool from `HDVILA_THREADS` (unset or 0: one
/// thread per core).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("HDVILA_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("HDVILA_THREADS must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    // A pool that is already configured (e.g. by an embedding program) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
