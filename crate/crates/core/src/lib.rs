//! Decoupled video instance tracking at desk scale: a frame-by-frame query
//! tracker aligned by optimal assignment, a temporal refiner over whole
//! videos, set-prediction losses, a synthetic data generator with an analytic
//! segmenter stub, staged training, and evaluation across online, semi-online
//! and offline modes.

pub mod assign;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub(crate) mod format;
pub mod loss;
pub mod refiner;
pub mod synth;
pub mod tracker;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use error::{DvtError, Result};
pub use graph::{Gradients, Graph, NodeId, ParamId, ParamStore};
pub use tensor::Tensor;
