//! Multimodal sentiment detection with semantics completion and
//! decomposition.
//!
//! Image patches, text tokens and the OCR text found inside the image are
//! encoded by small trainable encoders. OCR semantics are injected into the
//! image and text representations by attention ("completion"), each completed
//! representation is split into a modality-shared and a modality-private part
//! ("decomposition"), and the classifier sees both the fused consistent
//! sentiment and the private-part difference between text and image.
//!
//! Everything runs on a small deterministic reverse-mode autodiff core in
//! 64-bit floats.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decomposition;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schema;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
