pub mod augment;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
