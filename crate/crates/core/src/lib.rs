pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
