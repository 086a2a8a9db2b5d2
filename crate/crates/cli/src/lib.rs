//! Command-line harness around the training core: run configuration,
//! dataset loading, compression-level policy, the training loop itself,
//! and the reporting commands built on top of it.

pub mod config;
pub mod dataset;
pub mod levels;
pub mod report;
pub mod train;

/// Stream-RNG domains, so that parameter init, data synthesis and epoch
/// shuffling never share a random sequence even under the same seed.
pub(crate) mod domains {
    pub const INIT: u64 = 0x10;
    pub const DATA: u64 = 0x20;
    pub const SHUFFLE: u64 = 0x30;
    pub const RESAMPLE: u64 = 0x40;
}
