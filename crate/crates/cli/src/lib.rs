//! Training, evaluation, and benchmarking for the modeforge toolkit.
//!
//! The library half of the CLI: [`train`] runs the Adam +
//! reduce-on-plateau protocol with best-on-validation checkpointing,
//! [`eval`] produces closed- and open-set reports, and [`bench`] times
//! the two decomposers against each other. The binary in `main.rs` is a
//! thin argument layer over these.

pub mod bench;
pub mod eval;
pub mod metrics;
pub mod train;
