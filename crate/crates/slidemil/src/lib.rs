//! Whole-slide multiple-instance-learning pipeline for nodal-metastasis
//! prediction: slide tiling with entropy filtering, bag construction with
//! clinical-feature fusion, an attention-MIL network trained with
//! hand-written gradients, and a clinical-metrics evaluation suite.

pub mod augment;
pub mod bags;
pub mod clinical;
pub mod config;
pub mod error;
pub mod eval;
pub mod imagery;
pub mod milnet;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use imagery::{AnnotationMask, Patch, RgbImage};
pub use milnet::{BagForward, BagInput, MilConfig, MilModel};
pub use tensor::Tensor;
