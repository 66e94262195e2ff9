//! Minimal tensor engine: the handful of differentiable operations a ViT
//! segmenter needs, each with a hand-written backward pass.

mod adam;
mod attention;
pub mod gradcheck;
pub mod ops;
mod rng;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{Attention, AttentionCache};
pub use gradcheck::finite_difference_check;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("embedding width {embed} is not divisible by {heads} heads")]
    BadHeadCount { embed: usize, heads: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}
