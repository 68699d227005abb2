//! Attentive multi-stage transfer learning at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, residual backbones
//! with optional self-attention blocks, a five-lobe region generator for lung
//! images, the contrastive and region-aware self-supervised objectives with a
//! momentum key encoder, LEEP transferability estimation, classification
//! metrics, a deterministic synthetic lung-phantom dataset and the stage
//! pipeline that ties them together.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod leep;
pub mod metrics;
pub mod param;
pub mod phantom;
pub mod pipeline;
pub mod regions;
pub mod ssl;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter, Sgd};
pub use tensor::Tensor;
