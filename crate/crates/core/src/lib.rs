pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod multires;
pub mod numerics;
pub mod rollout;
pub mod seed;
pub mod train;
pub mod videoio;

pub use error::{Error, Result};
