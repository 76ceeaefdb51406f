//! The multi-sensor learning network: physics-informed encoders, patch
//! tokenization, transformer cross-domain interaction, enhanced-feature
//! composition and the lambda-conditioned decoder.

pub mod checkpoint;
mod config;
mod lambda;
pub mod layers;
mod net;

pub use config::ModelConfig;
pub use lambda::{area_downsample, LambdaField};
pub use net::{Encoded, Modality, MslModel, SensorImages, Sensory, TokenGroups, SLOT_NAMES};
