pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod motion;
pub mod parallel;
pub mod raster;
pub mod schedule;
pub mod synthgen;

pub use error::{MocError, Result};
