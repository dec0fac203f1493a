pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod params;
pub mod postprocess;
pub mod train;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use network::{Model, Model32, Model64, ModelConfig};
