//! Dense per-pixel feature descriptors, end to end: a small reverse-mode
//! tensor engine, a fully convolutional encoder-decoder backbone, similarity
//! heatmap matching with a cycle-consistency filter, training losses,
//! a deterministic synthetic data generator, and train/eval drivers.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image_io;
pub mod loss;
pub mod matching;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
