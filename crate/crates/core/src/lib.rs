//! Shape-adaptive graph vision transformer: a convolutional backbone whose
//! feature map is cut into patches, linked into a grid graph, refined by
//! graph attention and classified by a Transformer encoder.
//!
//! Everything runs in `f64` on a small reverse-mode autodiff tape, which
//! keeps finite-difference gradient checks meaningful.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod gat;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod patching;
pub mod sgt;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
