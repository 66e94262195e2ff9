//! Volumetric neuron segmentation with Vision Transformers whose 3D block
//! embedding is initialized from a pre-trained 2D patch embedding.
//!
//! The crate covers the whole pipeline: SWC morphology parsing, label
//! rasterization and synthetic data, blockification, a small tensor engine
//! with hand-written gradients, 2D/3D ViT segmenters, weight transfer and
//! archives, training, and Dice/Hd95 evaluation.

pub mod archive;
pub mod experiment;
pub mod groundtruth;
pub mod io;
pub mod metrics;
pub mod numerics;
mod parallel;
pub mod swc;
pub mod train;
pub mod transfer;
pub mod vit;
pub mod volume;
