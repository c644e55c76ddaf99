use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Satellite,
    Uav,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Satellite => "satellite",
            Platform::Uav => "uav",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SatScale {
    Small,
    Middle,
    Big,
}

impl SatScale {
    pub const ALL: [SatScale; 3] = [SatScale::Small, SatScale::Middle, SatScale::Big];

    pub fn as_str(&self) -> &'static str {
        match self {
            SatScale::Small => "small",
            SatScale::Middle => "middle",
            SatScale::Big => "big",
        }
    }
}

impl std::str::FromStr for SatScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SatScale::Small),
            "middle" => Ok(SatScale::Middle),
            "big" => Ok(SatScale::Big),
            other => Err(Error::Config(format!("unknown satellite scale `{other}`"))),
        }
    }
}

/// One platform-tagged, GPS-tagged image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub platform: Platform,
    pub location_id: String,
    pub geo: GeoPoint,
    pub altitude_m: Option<f64>,
    pub scale: Option<SatScale>,
    pub capture_time: Option<String>,
    /// Image path; absolute once loaded through [`load_manifest`].
    pub uri: PathBuf,
}

/// Wire form of one manifest line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    platform: Platform,
    location_id: String,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alt_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<SatScale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<String>,
    uri: String,
}

fn valid_time(s: &str) -> bool {
    let year_ok = |y: &str| y.len() == 4 && y.bytes().all(|b| b.is_ascii_digit());
    match s.len() {
        4 => year_ok(s),
        7 => year_ok(&s[..4]) && chrono::NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").is_ok(),
        _ => chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok(),
    }
}

impl ImageRecord {
    fn validate(&self) -> Result<()> {
        let bad = |message: &str| Error::InvalidRecord {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.location_id.is_empty() {
            return Err(bad("empty location_id"));
        }
        match self.platform {
            Platform::Uav if self.scale.is_some() => return Err(bad("uav record carries a scale")),
            Platform::Satellite if self.altitude_m.is_some() => {
                return Err(bad("satellite record carries an altitude"))
            }
            _ => {}
        }
        if let Some(alt) = self.altitude_m {
            if !(alt >= 0.0 && alt.is_finite()) {
                return Err(bad("altitude must be non-negative"));
            }
        }
        if let Some(t) = &self.capture_time {
            if !valid_time(t) {
                return Err(bad("time is not an ISO-8601 date"));
            }
        }
        Ok(())
    }

    /// Year component of the capture time, if any.
    pub fn year(&self) -> Option<&str> {
        self.capture_time.as_deref().map(|t| &t[..4.min(t.len())])
    }
}

/// Satellite and UAV record ids at one sampling point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocationGroup {
    pub satellite: Vec<String>,
    pub uav: Vec<String>,
}

/// A validated collection of image records grouped by location.
#[derive(Debug, Clone)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    correspondence: BTreeMap<String, LocationGroup>,
    by_id: HashMap<String, usize>,
}

impl Manifest {
    /// Validates records and builds the location correspondence. Does not
    /// touch the filesystem.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut by_id = HashMap::with_capacity(records.len());
        let mut location_geo: BTreeMap<&str, GeoPoint> = BTreeMap::new();
        let mut correspondence: BTreeMap<String, LocationGroup> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            match location_geo.get(r.location_id.as_str()) {
                Some(g) if *g != r.geo => {
                    return Err(Error::InconsistentLocation(r.location_id.clone()))
                }
                Some(_) => {}
                None => {
                    location_geo.insert(&r.location_id, r.geo);
                }
            }
            let group = correspondence.entry(r.location_id.clone()).or_default();
            match r.platform {
                Platform::Satellite => group.satellite.push(r.id.clone()),
                Platform::Uav => group.uav.push(r.id.clone()),
            }
        }
        for g in correspondence.values_mut() {
            g.satellite.sort();
            g.uav.sort();
        }
        Ok(Self {
            records,
            correspondence,
            by_id,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn correspondence(&self) -> &BTreeMap<String, LocationGroup> {
        &self.correspondence
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.index_of(id).map(|i| &self.records[i])
    }

    /// Distinct locations with their coordinates, ordered by location id.
    pub fn locations(&self) -> Vec<(String, GeoPoint)> {
        self.correspondence
            .iter()
            .map(|(loc, g)| {
                let any = g.satellite.first().or_else(|| g.uav.first()).expect("non-empty group");
                (loc.clone(), self.record(any).expect("indexed").geo)
            })
            .collect()
    }

    /// Checks the training-only invariant that every UAV location has a
    /// satellite view.
    pub fn validate_training(&self) -> Result<()> {
        for (loc, g) in &self.correspondence {
            if !g.uav.is_empty() && g.satellite.is_empty() {
                return Err(Error::NoSatellite(loc.clone()));
            }
        }
        Ok(())
    }

    /// Keeps the records matching `keep`.
    pub fn filter(&self, keep: impl Fn(&ImageRecord) -> bool) -> Result<Manifest> {
        Manifest::from_records(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// Writes the manifest as JSON Lines, with uris made relative to the
    /// manifest's directory when possible.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = Vec::new();
        for r in &self.records {
            let uri = r.uri.strip_prefix(base).unwrap_or(&r.uri);
            let raw = RawRecord {
                id: r.id.clone(),
                platform: r.platform,
                location_id: r.location_id.clone(),
                lat: r.geo.lat_deg(),
                lon: r.geo.lon_deg(),
                alt_m: r.altitude_m,
                scale: r.scale,
                time: r.capture_time.clone(),
                uri: uri.to_string_lossy().replace('\\', "/"),
            };
            serde_json::to_writer(&mut out, &raw)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a JSON Lines manifest. Image uris are resolved
/// against the manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let manifest = parse_manifest(path)?;
    for r in manifest.records() {
        if !r.uri.is_file() {
            return Err(Error::MissingImage {
                id: r.id.clone(),
                path: r.uri.clone(),
            });
        }
    }
    Ok(manifest)
}

/// Like [`load_manifest`] but skips the image-existence check.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        let geo = GeoPoint::new(raw.lat, raw.lon).map_err(|e| schema(e.to_string()))?;
        records.push(ImageRecord {
            id: raw.id,
            platform: raw.platform,
            location_id: raw.location_id,
            geo,
            altitude_m: raw.alt_m,
            scale: raw.scale,
            capture_time: raw.time,
            uri: base.join(raw.uri),
        });
    }
    Manifest::from_records(records)
}
