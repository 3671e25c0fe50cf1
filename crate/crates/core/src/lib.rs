//! Frequency-domain multimodal precipitation nowcasting.
//!
//! The crate provides the spectral operators used by the model (AFNO
//! mixing, meteorology-guided frequency modulation, frequency memory,
//! inverted frequency attention), a small reverse-mode engine to train
//! them, the end-to-end network, verification metrics, and the synthetic
//! data, tensor file and checkpoint plumbing around it.

pub mod afno;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod ifa;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod pfm;
pub mod sequence;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
