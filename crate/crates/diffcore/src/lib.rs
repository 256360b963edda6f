//! A small reverse-mode differentiation kernel.
//!
//! It provides exactly what a compact CTR network needs: dense affine maps,
//! activations, embedding gathers, concatenation, (masked) batch statistics,
//! a gradient-reversal node, a pairwise Pearson decorrelation penalty,
//! cross-entropy, and a bias-corrected Adam updater over a named
//! [`ParameterStore`]. All arithmetic is `f64`.

mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{check_gradients, finite_difference_check, GradCheckOptions, GradCheckReport, NumericEval};
pub use params::{AdamConfig, AdamState, Param, ParameterStore};
pub use tape::{sigmoid, Reduction, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;
