//! Retrieval-augmented ("analogical") 3D part segmentation.

pub mod autograd;
mod binio;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod geom;
pub mod losses;
pub mod modulator;
pub mod nn;
pub mod params;
pub mod retriever;
pub mod train;

pub use error::{Error, Result};
