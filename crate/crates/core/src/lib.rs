pub mod autograd;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod params;
pub mod probe;
pub mod rng;
pub mod signal;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
