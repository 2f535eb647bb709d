//! Data-free quantization lab for selective state-space (Mamba-style) vision
//! models.
//!
//! The pipeline runs in three stages over a small seeded toy model:
//!
//! 1. [`datagen`] optimizes Gaussian noise into synthetic calibration images
//!    with a patch-level contrastive loss on the model's enhanced implicit
//!    attention ([`attn`]) plus an output loss.
//! 2. [`quant`] calibrates per-time-step inlier scales and an outlier
//!    threshold, then runs mixed-precision fake-quant inference with a
//!    dynamic outlier detector.
//! 3. [`gemm`] is the integer back end: packed int4 inliers and a compact
//!    int8 outlier buffer with a fused dequantize-and-sum.

pub mod attn;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gemm;
pub mod io;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::MetricsRecord;
pub use rng::SeededRng;
pub use tape::{GradTape, Var};
pub use tensor::Tensor;
