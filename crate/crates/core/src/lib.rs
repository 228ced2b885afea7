//! Adaptive graph U-Net for lifting 2D hand-object keypoints to 3D.
//!
//! The crate is self-contained: a small reverse-mode tape over dense `f64`
//! matrices ([`tape`]), graph layers with trainable adjacency kernels and
//! node pooling ([`layers`]), the encoder/decoder network ([`unet`]), the
//! full 2D-refinement plus lifting cascade ([`pipeline`]), a synthetic
//! hand-object data generator ([`synth`]), evaluation metrics
//! ([`metrics`]) and the ablation harness ([`ablation`]).

pub mod ablation;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod keypoints;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use error::{Error, ErrorKind, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
