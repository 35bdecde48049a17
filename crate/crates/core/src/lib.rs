pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod evaluation;
pub mod error;
pub mod image;
pub mod losses;
pub mod plot;
pub mod retrieval;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
