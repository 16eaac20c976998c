//! Closed-form, calibration-aware low-rank compression of transformer
//! attention (QK and OV) and MLP weights.

pub mod calibration;
pub mod cur;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod model;
pub mod montecarlo;
pub mod rng;
pub mod solver_mlp;
pub mod solver_ov;
pub mod solver_qk;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
