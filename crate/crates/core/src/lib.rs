pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod cohort;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod sacnet;
pub mod sequence;
pub mod train;

pub use error::{Error, Result};
