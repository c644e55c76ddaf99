use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Manifest;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::seed::derive_seed;

/// A (satellite, UAV) training pair sharing one sampling point. Record
/// fields are indices into the owning manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub sat: usize,
    pub uav: usize,
    pub location_id: String,
    pub geo: GeoPoint,
}

/// Every satellite × UAV combination within each location, ordered by
/// location id, then satellite id, then UAV id.
pub fn make_pairs(manifest: &Manifest) -> Result<Vec<PairSample>> {
    let mut pairs = Vec::new();
    for (loc, group) in manifest.correspondence() {
        if group.uav.is_empty() {
            continue;
        }
        if group.satellite.is_empty() {
            return Err(Error::NoSatellite(loc.clone()));
        }
        for s in &group.satellite {
            let si = manifest.index_of(s).expect("indexed");
            for u in &group.uav {
                let ui = manifest.index_of(u).expect("indexed");
                pairs.push(PairSample {
                    sat: si,
                    uav: ui,
                    location_id: loc.clone(),
                    geo: manifest.records()[si].geo,
                });
            }
        }
    }
    Ok(pairs)
}

/// Location-aware shuffled batching.
///
/// Each location's pairs are shuffled and cut into groups of
/// `pairs_per_location` (a trailing singleton joins the previous group);
/// the groups are shuffled and laid end to end, then cut into batches of
/// `batch_size`. Every pair appears exactly once per epoch. Returned
/// batches hold indices into `pairs`.
pub fn sample_batches(
    pairs: &[PairSample],
    batch_size: usize,
    pairs_per_location: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be >= 2 for in-batch mining, got {batch_size}"
        )));
    }
    if pairs_per_location < 2 {
        return Err(Error::Config("pairs_per_location must be >= 2".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let mut by_loc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_loc.entry(p.location_id.as_str()).or_default().push(i);
    }
    if by_loc.len() == 1 {
        log::warn!("all training pairs share one location; geographic negatives will be empty");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5A3F, epoch]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for members in by_loc.values_mut() {
        members.shuffle(&mut rng);
        let start = groups.len();
        for chunk in members.chunks(pairs_per_location) {
            if chunk.len() == 1 && groups.len() > start {
                groups.last_mut().expect("non-empty").push(chunk[0]);
            } else {
                groups.push(chunk.to_vec());
            }
        }
    }
    groups.shuffle(&mut rng);
    let order: Vec<usize> = groups.into_iter().flatten().collect();
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
