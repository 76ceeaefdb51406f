//! Multi-sensor learning for hybrid CT/MRI imaging: imaging physics, the
//! fusion network, training, spatial lambda-map optimization and metrics.

pub mod error;
pub mod imageio;
pub mod lambda_opt;
pub mod metrics;
pub mod model;
pub mod physics;
pub mod training;

pub use error::{MslError, Result};
