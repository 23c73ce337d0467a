//! A desk-scale vision-language model built on a small reverse-mode
//! autodiff tape.
//!
//! Images go through a ViT, a conv + SwiGLU adapter that quarters the token
//! count, and into a decoder whose attention and FFN weights can be split
//! between text and vision tokens ("visual expert"). Video is a sequence of
//! sampled frames, each preceded by a textual timestamp.

pub mod adapter;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod tqa;
pub mod trainer;
pub mod video;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
