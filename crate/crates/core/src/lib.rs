//! Shuffle-instances vision transformer training at desk scale.

pub mod backbone;
pub mod bagging;
pub mod color;
pub mod datasynth;
pub mod error;
pub mod evalviz;
pub mod gradsuite;
pub mod heads;
pub mod image;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
