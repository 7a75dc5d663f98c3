pub mod checkpoint;
pub mod datamodel;
pub mod deconfound;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod nn;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
