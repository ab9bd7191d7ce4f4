//! Detection, clustering and few-shot metrics.

pub mod cluster;
pub mod detection;
pub mod probe;
pub mod report;
