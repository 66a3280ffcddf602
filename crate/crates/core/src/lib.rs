pub mod checkpoint;
pub mod data_io;
pub mod dense_codec;
pub mod error;
pub mod infer;
pub mod model;
pub mod nn;
pub mod par;
pub mod prep;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod sparse_codec;
pub mod taskgen;
pub mod text_tok;
pub mod toy;
pub mod trainer;
pub mod vocab;
pub mod vq;

pub use error::{Error, ParseError, Result};
