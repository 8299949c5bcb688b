//! Multipath-based SLAM with belief-propagation data association and a
//! PHD-filter-driven repository of global map features.

pub mod geometry;
pub mod measurement;
pub mod association;
pub mod gmf;
pub mod slam;
pub mod special;
pub mod synthetic;
pub mod metrics;
pub mod experiment;
pub mod output;
