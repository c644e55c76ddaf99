//! Geographic-information adaptive metric learning for UAV self-positioning.
//!
//! The crate covers the whole pipeline: geodesy and neighbourhood indexing,
//! dataset manifests and pair sampling, a trainable image encoder, the
//! contrastive and geographic losses, training, retrieval evaluation and a
//! synthetic data generator for end-to-end checks.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geo;
pub mod loss;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use geo::{build_neighbor_index, haversine, GeoPoint, NeighborIndex};
