//! Manifest ingestion and validation, image augmentation, and GPS-based
//! pair sampling.

mod augment;
mod manifest;
mod pairs;

pub use augment::{augment, AugmentParams};
pub use manifest::{
    load_manifest, parse_manifest, ImageRecord, LocationGroup, Manifest, Platform, SatScale,
};
pub use pairs::{make_pairs, sample_batches, PairSample};
