//! Spectral-spatial hyperspectral image classification with self-distillation.

pub mod error;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod preprocess;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor, Var};
