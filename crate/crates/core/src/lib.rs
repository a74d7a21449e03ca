//! Desk-scale TransResU-Net.
//!
//! A from-scratch, CPU-only implementation of the TransResU-Net
//! encoder/decoder segmentation architecture: dense tensors with
//! reverse-mode autodiff, the ResNet-style encoder with transformer and
//! dilated-convolution bottleneck branches, the BCE+dice training recipe
//! with Adam and early stopping, segmentation metrics, and NetPBM /
//! checkpoint IO. Everything is deterministic under a fixed seed and
//! verifiable through naive oracles and finite-difference gradient checks.

pub mod adam;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod oracles;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use blocks::{Forward, ModelPlan, Taps};
pub use config::ModelConfig;
pub use data::Sample;
pub use error::{Error, Result};
pub use kernels::{ConvSpec, PoolSpec};
pub use metrics::MetricsReport;
pub use params::ParameterStore;
pub use tape::{Activation, BnStats, Gradients, Mode, NodeId, Tape, BN_EPS, BN_MOMENTUM};
pub use tensor::{Precision, Scalar, Tensor};
pub use train::TrainConfig;
