pub mod cli;
pub mod data_io;
pub mod density;
pub mod detector_sim;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
