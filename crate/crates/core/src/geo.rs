//! Geographic primitives: great-circle distance on a spherical Earth and the
//! per-location nearest-neighbour sets used by the adaptive loss weight.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A WGS-84 latitude/longitude pair in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::InvalidCoordinate(format!(
                "latitude {lat_deg} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon_deg) {
            return Err(Error::InvalidCoordinate(format!(
                "longitude {lon_deg} outside [-180, 180]"
            )));
        }
        Ok(Self { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    /// Unit vector of this point in Earth-centred Cartesian coordinates.
    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (lat, lon) = (self.lat_deg.to_radians(), self.lon_deg.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat_deg: f64,
            lon_deg: f64,
        }
        let raw = Raw::deserialize(d)?;
        GeoPoint::new(raw.lat_deg, raw.lon_deg).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.7}, {:.7})", self.lat_deg, self.lon_deg)
    }
}

/// Haversine distance in meters using [`EARTH_RADIUS_M`].
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    haversine_with_radius(a, b, EARTH_RADIUS_M)
}

pub fn haversine_with_radius(a: GeoPoint, b: GeoPoint, radius_m: f64) -> f64 {
    let (lat1, lat2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // h can drift a hair above 1 for antipodal points
    2.0 * radius_m * h.sqrt().min(1.0).asin()
}

/// Per-location sorted lists of the `k` geographically nearest distinct
/// locations, with their haversine distances in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub version: u32,
    pub k: usize,
    pub radius_m: f64,
    pub entries: BTreeMap<String, Vec<(String, f64)>>,
}

pub const NEIGHBOR_INDEX_VERSION: u32 = 1;

/// Builds the neighbour index over distinct locations.
///
/// Locations with the same coordinates as the anchor are never neighbours.
/// Lists are sorted by distance, ties broken by ascending location id.
pub fn build_neighbor_index(
    locations: &[(String, GeoPoint)],
    k: usize,
    radius_m: f64,
) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::Config("neighbour count k must be >= 1".into()));
    }
    if !(radius_m > 0.0) {
        return Err(Error::Config(format!("earth radius must be positive, got {radius_m}")));
    }
    let mut seen = BTreeSet::new();
    for (id, _) in locations {
        if !seen.insert(id.as_str()) {
            return Err(Error::Config(format!("duplicate location id `{id}`")));
        }
    }
    let distinct: BTreeSet<(u64, u64)> = locations
        .iter()
        .map(|(_, p)| (p.lat_deg.to_bits(), p.lon_deg.to_bits()))
        .collect();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "neighbour index needs at least 2 distinct GPS locations".into(),
        ));
    }

    let mut entries = BTreeMap::new();
    for (id, anchor) in locations {
        let mut cands: Vec<(&str, f64)> = locations
            .iter()
            .filter(|(other, _)| other != id)
            .map(|(other, p)| (other.as_str(), haversine_with_radius(*anchor, *p, radius_m)))
            .filter(|&(_, d)| d > 0.0)
            .collect();
        cands.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        cands.truncate(k);
        entries.insert(
            id.clone(),
            cands.into_iter().map(|(n, d)| (n.to_string(), d)).collect(),
        );
    }
    Ok(NeighborIndex {
        version: NEIGHBOR_INDEX_VERSION,
        k,
        radius_m,
        entries,
    })
}

impl NeighborIndex {
    pub fn contains_location(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn neighbors(&self, id: &str) -> Result<&[(String, f64)]> {
        self.entries
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLocation(id.to_string()))
    }

    /// Distance from `anchor` to `other` if `other` is in the anchor's neighbour set.
    pub fn neighbor_distance(&self, anchor: &str, other: &str) -> Result<Option<f64>> {
        Ok(self
            .neighbors(anchor)?
            .iter()
            .find(|(n, _)| n == other)
            .map(|&(_, d)| d))
    }

    /// Ratio of the hard negative's distance to the anchor's nearest
    /// neighbour distance. Always >= 1.
    pub fn neighbor_norm(&self, anchor: &str, hard_negative: &str) -> Result<f64> {
        let list = self.neighbors(anchor)?;
        let d = list
            .iter()
            .find(|(n, _)| n == hard_negative)
            .map(|&(_, d)| d)
            .ok_or_else(|| Error::NotANeighbor {
                anchor: anchor.to_string(),
                neighbor: hard_negative.to_string(),
            })?;
        let nearest = list
            .iter()
            .map(|&(_, d)| d)
            .fold(f64::INFINITY, f64::min);
        Ok(d / nearest)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let index: NeighborIndex = serde_json::from_str(text)?;
        if index.version != NEIGHBOR_INDEX_VERSION {
            return Err(Error::Config(format!(
                "unsupported neighbour index version {}",
                index.version
            )));
        }
        Ok(index)
    }
}

/// Local east/north offsets in meters relative to `origin` under an
/// equirectangular approximation.
pub fn offset_to_geo(origin: GeoPoint, east_m: f64, north_m: f64, radius_m: f64) -> Result<GeoPoint> {
    let lat = origin.lat_deg + (north_m / radius_m).to_degrees();
    let lon = origin.lon_deg + (east_m / (radius_m * origin.lat_deg.to_radians().cos())).to_degrees();
    GeoPoint::new(lat, lon)
}
