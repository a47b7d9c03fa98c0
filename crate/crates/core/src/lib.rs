pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod prepare;
pub mod run;
pub mod sketch_data;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
