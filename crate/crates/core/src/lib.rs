//! Temporal convolutional encoder for scene-text recognition.
//!
//! A small dense-tensor library with tape-based reverse-mode autodiff backs an
//! attention-augmented convolutional feature extractor, a dilated causal
//! convolution stack and a CTC head. Training data is synthesized
//! procedurally.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

/// Mixes two words into a well-spread 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(31);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
