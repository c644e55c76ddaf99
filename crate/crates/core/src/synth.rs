//! Procedural dense-sampling benchmark.
//!
//! Locations sit on a regular grid. The world has a smooth colour field
//! keyed to metric coordinates, so views of neighbouring cells look alike,
//! plus a handful of blobs keyed to each location id that only views of
//! that cell (and the overlapping edges of its neighbours) contain. UAV
//! views are per-altitude crops with positional, brightness and pixel
//! jitter; satellite views are per-scale crops restyled per capture time.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Manifest, Platform, SatScale};
use crate::error::{Error, Result};
use crate::eval::{FeatureStore, RowMeta};
use crate::geo::{offset_to_geo, GeoPoint, EARTH_RADIUS_M};
use crate::raster::Raster;
use crate::seed::{derive_seed, hash_str, splitmix64, unit_from_hash};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const QUERY_FILE: &str = "queries.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub spacing_m: f64,
    pub origin: GeoPoint,
    /// Pseudo-altitudes in meters; higher means a wider view.
    pub uav_altitudes: Vec<f64>,
    pub sat_scales: Vec<SatScale>,
    pub sat_times: Vec<String>,
    /// Square image side in pixels.
    pub image_size: usize,
    pub seed: u64,
    /// Extra UAV renderings per altitude written to the query manifest.
    pub query_variants: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_rows: 10,
            grid_cols: 10,
            spacing_m: 20.0,
            origin: GeoPoint::new(30.0, 120.0).expect("valid"),
            uav_altitudes: vec![80.0, 90.0, 100.0],
            sat_scales: SatScale::ALL.to_vec(),
            sat_times: vec!["2020".into(), "2022".into()],
            image_size: 32,
            seed: 0,
            query_variants: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows * self.grid_cols < 4 {
            return Err(Error::Config("synthetic grid needs at least 4 locations".into()));
        }
        if !(self.spacing_m > 0.0 && self.spacing_m.is_finite()) {
            return Err(Error::Config("spacing_m must be > 0".into()));
        }
        if self.uav_altitudes.is_empty() || self.uav_altitudes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("uav_altitudes must be non-empty and positive".into()));
        }
        if self.sat_scales.is_empty() || self.sat_times.is_empty() {
            return Err(Error::Config("sat_scales and sat_times must be non-empty".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        Ok(())
    }
}

/// Half-width of a view in meters at the reference altitude and scale.
const BASE_HALF_WIDTH_M: f64 = 20.0;
const REFERENCE_ALTITUDE_M: f64 = 90.0;
const BLOBS_PER_LOCATION: u64 = 4;
/// UAV position error as a fraction of the grid spacing.
const UAV_SHIFT: f64 = 0.2;
/// UAV heading error in radians.
const UAV_MAX_HEADING: f64 = 0.2;

struct Blob {
    east: f64,
    north: f64,
    radius: f64,
    color: [f64; 3],
}

struct World<'a> {
    config: &'a SynthConfig,
    /// (location id, east, north) of every cell.
    cells: Vec<(String, f64, f64)>,
}

fn lattice(seed: u64, octave: u64, channel: u64, ix: i64, iy: i64) -> f64 {
    unit_from_hash(derive_seed(seed, &[octave, channel, ix as u64, iy as u64]))
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: u64, channel: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let v00 = lattice(seed, octave, channel, ix, iy);
    let v10 = lattice(seed, octave, channel, ix + 1, iy);
    let v01 = lattice(seed, octave, channel, ix, iy + 1);
    let v11 = lattice(seed, octave, channel, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * tx;
    let b = v01 + (v11 - v01) * tx;
    a + (b - a) * ty
}

impl<'a> World<'a> {
    fn new(config: &'a SynthConfig) -> Self {
        let mut cells = Vec::new();
        for r in 0..config.grid_rows {
            for c in 0..config.grid_cols {
                let id = format!("L{:04}", r * config.grid_cols + c);
                cells.push((id, c as f64 * config.spacing_m, r as f64 * config.spacing_m));
            }
        }
        Self { config, cells }
    }

    fn blobs_near(&self, east: f64, north: f64, reach: f64) -> Vec<Blob> {
        let spacing = self.config.spacing_m;
        let mut out = Vec::new();
        for (id, ce, cn) in &self.cells {
            if (ce - east).abs() > reach + spacing || (cn - north).abs() > reach + spacing {
                continue;
            }
            let h = derive_seed(self.config.seed, &[0xB10B, hash_str(id)]);
            for b in 0..BLOBS_PER_LOCATION {
                let mut u = {
                    let mut state = derive_seed(h, &[b]);
                    move || {
                        state = splitmix64(state);
                        unit_from_hash(state)
                    }
                };
                let spread = 0.45 * spacing;
                out.push(Blob {
                    east: ce + (2.0 * u() - 1.0) * spread,
                    north: cn + (2.0 * u() - 1.0) * spread,
                    radius: spacing * (0.12 + 0.14 * u()),
                    color: [u(), u(), u()],
                });
            }
        }
        out
    }

    /// Colour of the world at a metric position.
    fn shade(&self, east: f64, north: f64, blobs: &[Blob]) -> [f64; 3] {
        let seed = self.config.seed;
        let s = self.config.spacing_m;
        let mut rgb = [0.0; 3];
        for (ch, v) in rgb.iter_mut().enumerate() {
            let coarse = value_noise(seed, 0, ch as u64, east / (1.4 * s), north / (1.4 * s));
            let fine = value_noise(seed, 1, ch as u64, east / (0.45 * s), north / (0.45 * s));
            *v = 0.15 + 0.55 * coarse + 0.3 * fine;
        }
        for b in blobs {
            let d2 = (east - b.east).powi(2) + (north - b.north).powi(2);
            let w = (-(d2 / (b.radius * b.radius)).powi(2)).exp();
            if w > 1e-4 {
                for ch in 0..3 {
                    rgb[ch] = rgb[ch] * (1.0 - w) + b.color[ch] * w;
                }
            }
        }
        rgb
    }

    /// Renders a north-up view rotated by `heading` radians about its
    /// centre.
    fn render(&self, east: f64, north: f64, half_width: f64, heading: f64) -> Raster {
        let n = self.config.image_size;
        let blobs = self.blobs_near(east, north, half_width * std::f64::consts::SQRT_2);
        let (sin, cos) = heading.sin_cos();
        let mut img = Raster::zeros(n, n);
        for py in 0..n {
            for px in 0..n {
                let u = (px as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let v = (py as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let (du, dv) = (u * cos - v * sin, u * sin + v * cos);
                let rgb = self.shade(east + du * half_width, north - dv * half_width, &blobs);
                for (ch, val) in rgb.iter().enumerate() {
                    img.set(ch, py, px, *val as f32);
                }
            }
        }
        img
    }
}

fn scale_factor(scale: SatScale) -> f64 {
    match scale {
        SatScale::Small => 0.8,
        SatScale::Middle => 1.0,
        SatScale::Big => 1.25,
    }
}

fn box_blur(img: &Raster) -> Raster {
    let (h, w) = (img.height(), img.width());
    let mut out = Raster::zeros(h, w);
    for c in 0..Raster::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += img.get(c, yy, xx);
                        n += 1.0;
                    }
                }
                out.set(c, y, x, sum / n);
            }
        }
    }
    out
}

/// Per-capture-time restyle: a global colour gain and offset, plus a blur
/// on every other time.
fn restyle(img: &Raster, seed: u64, time_index: usize, time: &str) -> Raster {
    let h = derive_seed(seed, &[0x7143, hash_str(time)]);
    let mut out = if time_index % 2 == 1 { box_blur(img) } else { img.clone() };
    for c in 0..Raster::CHANNELS {
        let gain = 0.9 + 0.2 * unit_from_hash(derive_seed(h, &[c as u64, 0])) as f32;
        let offset = 0.08 * (unit_from_hash(derive_seed(h, &[c as u64, 1])) as f32 - 0.5);
        let n = out.height() * out.width();
        for v in &mut out.data_mut()[c * n..(c + 1) * n] {
            *v = (*v * gain + offset).clamp(0.0, 1.0);
        }
    }
    out
}

fn jitter_uav(img: &Raster, rng: &mut ChaCha8Rng) -> Raster {
    let mut out = img.clone();
    let brightness = rng.random_range(-0.06f32..0.06);
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    for v in out.data_mut() {
        *v = (*v + brightness + noise.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

fn format_altitude(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{}", a as i64)
    } else {
        format!("{a}")
    }
}

/// Writes the benchmark under `out_dir`: images in `images/`, the training
/// manifest in [`MANIFEST_FILE`] and held-out UAV renderings in
/// [`QUERY_FILE`]. Returns the training manifest.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let world = World::new(config);
    let mut train = Vec::new();
    let mut queries = Vec::new();
    for (loc, east, north) in &world.cells {
        let geo = offset_to_geo(config.origin, *east, *north, EARTH_RADIUS_M)?;
        let emit = |id: String, img: &Raster, platform, alt, scale, time: Option<&String>| -> Result<ImageRecord> {
            let uri: PathBuf = images.join(format!("{id}.png"));
            img.save_png(&uri)?;
            Ok(ImageRecord {
                id,
                platform,
                location_id: loc.clone(),
                geo,
                altitude_m: alt,
                scale,
                capture_time: time.cloned(),
                uri,
            })
        };
        for (ti, time) in config.sat_times.iter().enumerate() {
            for &scale in &config.sat_scales {
                let base = world.render(*east, *north, BASE_HALF_WIDTH_M * scale_factor(scale), 0.0);
                let img = restyle(&base, config.seed, ti, time);
                let id = format!("{loc}_sat_{}_{time}", scale.as_str());
                train.push(emit(id, &img, Platform::Satellite, None, Some(scale), Some(time))?);
            }
        }
        for &alt in &config.uav_altitudes {
            for variant in 0..=config.query_variants {
                let id = if variant == 0 {
                    format!("{loc}_uav_{}", format_altitude(alt))
                } else {
                    format!("{loc}_uav_{}_q{variant}", format_altitude(alt))
                };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x0A71, hash_str(&id)]));
                let shift = UAV_SHIFT * config.spacing_m;
                let de = rng.random_range(-shift..shift);
                let dn = rng.random_range(-shift..shift);
                let half = BASE_HALF_WIDTH_M * alt / REFERENCE_ALTITUDE_M;
                let heading = rng.random_range(-UAV_MAX_HEADING..UAV_MAX_HEADING);
                let img = jitter_uav(&world.render(east + de, north + dn, half, heading), &mut rng);
                let rec = emit(id, &img, Platform::Uav, Some(alt), None, None)?;
                if variant == 0 {
                    train.push(rec);
                } else {
                    queries.push(rec);
                }
            }
        }
    }
    let manifest = Manifest::from_records(train)?;
    manifest.write_jsonl(&out_dir.join(MANIFEST_FILE))?;
    if !queries.is_empty() {
        Manifest::from_records(queries)?.write_jsonl(&out_dir.join(QUERY_FILE))?;
    }
    let echo = out_dir.join("synth_config.json");
    std::fs::write(&echo, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&echo, e))?;
    Ok(manifest)
}

/// Embeddings computed from GPS alone: each record's position as a unit
/// vector in a frame whose pole is the centroid of the manifest's
/// locations, zero-padded to `dim`. Feature distance is the chord length,
/// so it increases strictly with geographic distance.
pub fn oracle_embeddings(manifest: &Manifest, dim: usize) -> Result<FeatureStore> {
    if dim < 3 {
        return Err(Error::Config("oracle embeddings need dim >= 3".into()));
    }
    let locs = manifest.locations();
    let mut c = [0.0f64; 3];
    for (_, p) in &locs {
        let v = p.to_unit_vector();
        for k in 0..3 {
            c[k] += v[k];
        }
    }
    let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    let c = c.map(|x| x / norm);
    // east = z × c, north = c × east
    let mut east = [-c[1], c[0], 0.0];
    let en = (east[0] * east[0] + east[1] * east[1]).sqrt();
    if en < 1e-12 {
        east = [1.0, 0.0, 0.0];
    } else {
        east = east.map(|x| x / en);
    }
    let north = [
        c[1] * east[2] - c[2] * east[1],
        c[2] * east[0] - c[0] * east[2],
        c[0] * east[1] - c[1] * east[0],
    ];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let records = manifest.records();
    let mut matrix = Array2::<f32>::zeros((records.len(), dim));
    for (i, r) in records.iter().enumerate() {
        let v = r.geo.to_unit_vector();
        matrix[[i, 0]] = dot(v, east) as f32;
        matrix[[i, 1]] = dot(v, north) as f32;
        matrix[[i, 2]] = dot(v, c) as f32;
    }
    FeatureStore::new(
        records.iter().map(|r| r.id.clone()).collect(),
        matrix,
        records.iter().map(RowMeta::from_record).collect(),
    )
}
