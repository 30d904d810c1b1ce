pub mod adaptation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod filtration;
pub mod fusion;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod tracker;
pub mod training;
pub mod types;

pub use error::{Error, Result};
