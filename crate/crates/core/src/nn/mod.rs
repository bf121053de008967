//! A small reverse-mode autodiff engine over dense `f64` matrices and the
//! tiny models built on it.

pub mod checkpoint;
pub mod decoder;
pub mod embedder;
pub mod graph;
pub mod matrix;
pub mod params;
pub mod seq2seq;
pub mod transformer;
pub mod vocab;

pub use decoder::TinyDecoder;
pub use embedder::{LinearEmbedder, LinearEmbedderConfig};
pub use graph::{Bound, Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{Adam, AdamConfig, ParamSet};
pub use seq2seq::TinyEncoderDecoder;
pub use transformer::TransformerConfig;
pub use vocab::Vocab;
