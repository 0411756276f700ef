//! Image manipulation localization with a shared ViT encoder, a
//! segmentation branch, and a masked-autoencoder reconstruction branch
//! supervised by an edge-masked perceptual loss.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grid;
pub mod masks;
pub mod model;
pub mod nn;
pub mod pmae;
pub mod report;
pub mod seeds;
pub mod seg;
pub mod train;

pub use error::{Error, ErrorKind, Result};
