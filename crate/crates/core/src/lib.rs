//! Open-set multi-view classification with an ADMM-unfolded sparse coding
//! network.

pub mod admm;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod pseudo;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod unfold;

pub use error::{OvError, Result};

/// Crate version plus the checkpoint/config schema it reads and writes.
pub fn version_info() -> String {
    format!(
        "openviewer {} (config schema {})",
        env!("CARGO_PKG_VERSION"),
        trainer::CHECKPOINT_SCHEMA
    )
}
