//! Sequence-parallel Transformer inference where devices exchange only
//! vector-quantized token indices.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense kernels and a reverse-mode tape.
//! - [`vq`]: codebooks, grouped quantization, EMA updates, residual noise.
//! - [`attention`]: mixed-precision attention and its mask.
//! - [`model`]: a small pre-norm Transformer with distributed class tokens.
//! - [`cluster`]: a lockstep multi-device simulator with a bit ledger.
//! - [`comms`]: analytical communication and latency model.
//! - [`theorem`]: numerical checks of the noise and class-token results.
//! - [`train`]: toy fine-tuning loop and ablation harness.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod autodiff;
pub mod vq;
pub mod attention;
pub mod model;
pub mod cluster;
pub mod comms;
pub mod theorem;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BoolMatrix, Precision, Tensor};
