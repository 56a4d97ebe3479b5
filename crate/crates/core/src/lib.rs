//! Convolutional classifiers with single-timestep recurrent heads, stacked
//! multi-model ensembles, softmax pruning and staged Adam training, all on a
//! small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rnn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// The random stream used everywhere randomness enters (init, shuffling,
/// noise, dropout, augmentation). Seeded explicitly so runs are reproducible.
pub type SeededRng = rand_chacha::ChaCha8Rng;
