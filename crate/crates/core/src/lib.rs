//! UNETR++-style volumetric segmentation: layers, efficient paired
//! attention, the encoder/decoder model, training and evaluation.

pub mod bench;
pub mod data;
pub mod epa;
pub mod error;
pub mod gradcheck_suite;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
