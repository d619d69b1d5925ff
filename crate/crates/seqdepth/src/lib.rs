//! Video depth estimation from monocular RGB sequences.
//!
//! The pipeline couples a per-frame encoder/decoder backbone with a
//! convolutional LSTM that carries state across frames, trains against a
//! three-term spatial loss plus an adversarial temporal loss produced by a
//! 3D-convolutional discriminator, and evaluates with the usual spatial
//! depth metrics alongside two temporal-consistency scores (TCC/TMC).
//!
//! Everything runs on the CPU over `ndarray` buffers; `graph` holds the
//! reverse-mode tape the training path differentiates through, while the
//! inference paths call the raw kernels directly.

pub mod adversary;
pub mod backbone;
pub mod clstm;
pub mod elem;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod kernels;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
