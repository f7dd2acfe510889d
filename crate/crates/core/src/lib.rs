//! Adapter-based fine-tuning of a frozen vision transformer for multi-class
//! cloud segmentation, built on a self-contained reverse-mode autodiff
//! tensor engine. The frozen backbone is modulated by a trainable spatial
//! perception ConvNet and cross-attention adapting modules; training touches
//! adapter, SPM, and decode-head weights only.

pub mod error;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Elem, Graph, Tensor};
pub mod adapter;
pub mod backbone;
pub mod spm;
pub mod model;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod train;
