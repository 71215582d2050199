//! Test-time transformation ensembling (TTE) workbench.
//!
//! Differentiable, deterministic image transforms are wrapped around a
//! classifier whose outputs are averaged, then probed with white-box and
//! black-box attacks and certified with randomized smoothing.

pub mod attacks;
pub mod autodiff;
pub mod certify;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use autodiff::{Elementwise, Gradients, Tape, Var};
pub use ensemble::{EnsembleModel, Transformed};
pub use error::{Error, Result};
pub use model::{Architecture, Classifier, Model};
pub use tensor::Tensor;
pub use transforms::TransformSpec;
