//! Continual-learning ingredients: a small autodiff core, attention-refined
//! image encodings, batch-wise Laplace noise for synthetic boundary samples,
//! importance-scored replay memories, blurry task streams, and the blended
//! dual-model training loop.

pub mod binio;
pub mod error;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod optim;
pub mod nets;
pub mod sbd;
pub mod memory;
pub mod stream;
pub mod checkpoint;
pub mod trainer;
pub mod eval;
pub mod oracles;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Derives an independent sub-seed from an experiment seed and a stream
/// salt (splitmix64 finalizer), so the data generator, splitter, weight
/// init, batch draws, and noise each get their own generator.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
