//! Analytic cost model for three concurrent GEMM cores (PoT-4 on LUTs,
//! Fixed-4 and Fixed-8 on DSPs) sharing one FPGA fabric.
//!
//! Layers run back to back; within a layer every core works on its own
//! rows at the same time, so a layer takes as long as its slowest core.
//! Memory bandwidth is not modeled.

mod cost;
pub mod fit;
mod profile;
pub mod shapes;

pub use cost::{allocate_cores, estimate_layer, report, CoreAllocation, CostReport, LayerCost};
pub use profile::DeviceProfile;
pub use shapes::{LayerShape, ModelShape};

use thiserror::Error;

pub type Result<T, E = HwError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HwError {
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("empty model shape")]
    EmptyModel,

    #[error("invalid profile: {0}")]
    Profile(String),

    #[error("profile line {line}: {msg}")]
    ProfileSyntax { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
