//! Prefix multi-modal modeling at desk scale.
//!
//! One encoder-decoder network learns two completion tasks from image-caption
//! pairs: finishing a caption given the image and the caption's beginning, and
//! finishing an image's token grid given the caption and the image's leading
//! cells. The crate covers the whole path: a tape-based autodiff engine, a
//! subword tokenizer, a vector-quantized image tokenizer, the training loop
//! and the `pmm` command-line tool (behind the default `cli` feature).

pub mod autodiff;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod text;
pub mod vq;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
