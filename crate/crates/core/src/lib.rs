//! CPU engine for lightweight RGB-D salient object detection.
//!
//! The crate provides a small fp32 tensor library with reverse-mode
//! differentiation, the encoder/gate/decoder blocks of the detection
//! network, a training loop, saliency evaluation metrics, a depth-quality
//! auditor, an efficiency benchmark harness, and the DFMW weight format.

pub mod backbone;
pub mod bench;
pub mod decoder;
pub mod dfmw;
pub mod dqfm;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quality;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Ctx, Tensor};

/// Seeded RNG used across initialization, training and tests.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
pub(crate) fn testrng(seed: u64) -> rand_chacha::ChaCha8Rng {
    seeded_rng(seed)
}
