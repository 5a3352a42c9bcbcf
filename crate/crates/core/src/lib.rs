//! Dense multi-scale encoder-decoder segmentation networks for 2D slices and
//! 3D volumes, their losses, metrics, data handling and training pipeline.

pub mod autograd;
pub mod backend;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use network::{build, build_variant, Model, NetworkConfig, Variant};
pub use tensor::{Dims, FeatureMap, Tensor};
