pub mod audio_encoder;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mfcc;
pub mod model;
pub mod nn;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
