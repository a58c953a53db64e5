//! Row-wise mixed-scheme, multi-precision quantization.
//!
//! Each output row (or convolution filter) of every weighted layer is
//! assigned one of three candidates: PoT-W4A4, Fixed-W4A4 or Fixed-W8A4.
//! The split is the same in every layer; which rows get which candidate is
//! decided by Hessian sensitivity (the 8-bit share) and weight variance
//! (PoT vs Fixed). Training runs through a straight-through estimator and
//! the resulting model can be executed on integer kernels where PoT rows
//! use shifts only.

pub mod assign;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
