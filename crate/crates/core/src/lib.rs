//! Lightweight UNet segmentation networks (a plain UNet and UNets with
//! MobileNetV2 / MobileNetV3-small encoders) together with the tooling to
//! measure them: an analytical profiler (parameters, MACs, CIO), confusion
//! matrix metrics, a small AdamW trainer with finite-difference gradient
//! checks, Netpbm dataset ingestion and a latency/energy benchmark harness.

pub mod bench;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod models;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
