//! Feature extraction, query→gallery ranking and the Recall@K / SDM@K
//! metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Manifest, Platform, SatScale};
use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};
use crate::raster::Raster;

/// Per-row metadata of a [`FeatureStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub location_id: String,
    pub lat: f64,
    pub lon: f64,
    pub platform: Platform,
}

impl RowMeta {
    pub fn from_record(r: &ImageRecord) -> Self {
        Self {
            location_id: r.location_id.clone(),
            lat: r.geo.lat_deg(),
            lon: r.geo.lon_deg(),
            platform: r.platform,
        }
    }

    pub fn geo(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon).expect("validated on construction")
    }
}

/// Embeddings of a set of records, row `i` belonging to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    ids: Vec<String>,
    matrix: Array2<f32>,
    meta: Vec<RowMeta>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    ids: Vec<String>,
    dims: [usize; 2],
    meta: Vec<RowMeta>,
}

impl FeatureStore {
    pub const NORM_TOLERANCE: f32 = 1e-4;

    pub fn new(ids: Vec<String>, matrix: Array2<f32>, meta: Vec<RowMeta>) -> Result<Self> {
        if ids.len() != matrix.nrows() || meta.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows", ids.len()),
                actual: format!("matrix {:?}, {} meta rows", matrix.dim(), meta.len()),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for m in &meta {
            GeoPoint::new(m.lat, m.lon)?;
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(Error::InvalidRecord {
                    id: ids[i].clone(),
                    message: format!("embedding norm {n} is not 1"),
                });
            }
        }
        Ok(Self { ids, matrix, meta })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            matrix: Array2::zeros((0, dim)),
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    /// Rows whose metadata satisfies `keep`, in their original order.
    pub fn filter(&self, keep: impl Fn(&str, &RowMeta) -> bool) -> FeatureStore {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.ids[i], &self.meta[i])).collect();
        FeatureStore {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            matrix: self.matrix.select(ndarray::Axis(0), &rows),
            meta: rows.iter().map(|&i| self.meta[i].clone()).collect(),
        }
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the row-major little-endian `f32` matrix to `path` and the
    /// `{ids, dims, meta}` sidecar to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.matrix.len() * 4);
        for v in self.matrix.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
        let sidecar = Sidecar {
            ids: self.ids.clone(),
            dims: [self.len(), self.dim()],
            meta: self.meta.clone(),
        };
        let side = Self::sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&text)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let [n, d] = sidecar.dims;
        if bytes.len() != n * d * 4 {
            return Err(Error::DimensionMismatch {
                expected: format!("{} bytes", n * d * 4),
                actual: format!("{} bytes", bytes.len()),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let matrix = Array2::from_shape_vec((n, d), values).expect("length checked");
        Self::new(sidecar.ids, matrix, sidecar.meta)
    }
}

/// Loads a record's image at the encoder's input size.
pub fn load_image(record: &ImageRecord, size: [usize; 2]) -> Result<Raster> {
    let img = Raster::load(&record.uri).map_err(|message| Error::UnreadableImage {
        id: record.id.clone(),
        message,
    })?;
    Ok(img.resize(size[0], size[1]))
}

/// Encodes `records` in order with no augmentation beyond resizing.
pub fn extract_features(records: &[ImageRecord], encoder: &Encoder, batch_size: usize) -> Result<FeatureStore> {
    let dim = encoder.config().embedding_dim;
    if records.is_empty() {
        return Ok(FeatureStore::empty(dim));
    }
    let size = encoder.config().input_size;
    let mut matrix = Array2::zeros((records.len(), dim));
    for (c, chunk) in records.chunks(batch_size.max(1)).enumerate() {
        let images = chunk.iter().map(|r| load_image(r, size)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Raster> = images.iter().collect();
        let e = encoder.encode(&refs, Mode::Inference)?.embeddings;
        let start = c * batch_size.max(1);
        matrix.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&e);
    }
    FeatureStore::new(
        records.iter().map(|r| r.id.clone()).collect(),
        matrix,
        records.iter().map(RowMeta::from_record).collect(),
    )
}

/// One gallery entry in a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub gallery_id: String,
    pub location_id: String,
    pub feature_distance: f64,
    /// Haversine meters from the query's true position.
    pub geo_distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    pub ranked: Vec<Ranked>,
}

fn euclidean(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Orders the whole gallery by feature distance to query row `row`,
/// ties broken by gallery id.
pub fn rank(query: &FeatureStore, row: usize, gallery: &FeatureStore) -> Result<RankingResult> {
    if query.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("dimension {}", query.dim()),
            actual: format!("dimension {}", gallery.dim()),
        });
    }
    let q = query.matrix.row(row);
    let qgeo = query.meta[row].geo();
    let mut ranked: Vec<Ranked> = (0..gallery.len())
        .map(|j| Ranked {
            gallery_id: gallery.ids[j].clone(),
            location_id: gallery.meta[j].location_id.clone(),
            feature_distance: euclidean(q, gallery.matrix.row(j)),
            geo_distance_m: haversine(qgeo, gallery.meta[j].geo()),
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.feature_distance
            .total_cmp(&b.feature_distance)
            .then_with(|| a.gallery_id.cmp(&b.gallery_id))
    });
    Ok(RankingResult {
        query_id: query.ids[row].clone(),
        ranked,
    })
}

pub fn rank_all(query: &FeatureStore, gallery: &FeatureStore) -> Result<Vec<RankingResult>> {
    (0..query.len()).map(|i| rank(query, i, gallery)).collect()
}

/// Fraction of queries with a gallery item of the true location in the
/// top `k`.
pub fn recall_at_k(results: &[RankingResult], truth: &BTreeMap<String, String>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in results {
        let loc = truth
            .get(&r.query_id)
            .ok_or_else(|| Error::Config(format!("no ground truth for query {}", r.query_id)))?;
        if r.ranked.iter().take(k).any(|g| &g.location_id == loc) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Mean over queries of `Σ w_k exp(−d_k/σ) / Σ w_k` with rank weights
/// `w_k = K − k + 1` and `d_k` the geographic distance of the rank-k item.
pub fn sdm_at_k(results: &[RankingResult], k: usize, sigma: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let norm: f64 = (1..=k).map(|r| (k - r + 1) as f64).sum();
    let mut total = 0.0;
    for r in results {
        if r.ranked.len() < k {
            return Err(Error::Config(format!(
                "ranking for {} has {} items, fewer than K={k}",
                r.query_id,
                r.ranked.len()
            )));
        }
        let s: f64 = r.ranked[..k]
            .iter()
            .enumerate()
            .map(|(i, g)| (k - i) as f64 * (-g.geo_distance_m / sigma).exp())
            .sum();
        total += s / norm;
    }
    Ok(total / results.len() as f64)
}

/// Subset of the gallery to search, mirroring scale/time settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GalleryFilter {
    pub scale: Option<SatScale>,
    /// Year prefix of the capture time, e.g. `"2022"`.
    pub time: Option<String>,
}

impl GalleryFilter {
    pub fn keeps(&self, r: &ImageRecord) -> bool {
        self.scale.is_none_or(|s| r.scale == Some(s))
            && self.time.as_deref().is_none_or(|t| r.year() == Some(t))
    }

    pub fn apply(&self, gallery: &Manifest) -> Result<Manifest> {
        gallery.filter(|r| self.keeps(r)).map_err(|e| match e {
            Error::EmptyManifest => Error::Config("gallery filter leaves no images".into()),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub sigma_m: f64,
    pub query_platform: Platform,
    pub gallery_platform: Platform,
    pub filter: GalleryFilter,
    pub batch_size: usize,
    /// How many top entries of each ranking to keep in the report; 0 keeps
    /// none.
    pub per_query_head: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 5, 10],
            sigma_m: 20.0,
            query_platform: Platform::Uav,
            gallery_platform: Platform::Satellite,
            filter: GalleryFilter::default(),
            batch_size: 64,
            per_query_head: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: BTreeMap<usize, f64>,
    pub sdm: BTreeMap<usize, f64>,
    pub sigma_m: f64,
    pub ks: Vec<usize>,
    pub queries: usize,
    pub gallery: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<RankingResult>>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Flat `k,recall,sdm` table.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "recall", "sdm"])?;
        for k in &self.ks {
            w.write_record([k.to_string(), self.recall[k].to_string(), self.sdm[k].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ranks every query against the gallery and scores the result.
pub fn evaluate_stores(query: &FeatureStore, gallery: &FeatureStore, options: &EvalOptions) -> Result<EvalReport> {
    if options.ks.is_empty() || options.ks.contains(&0) {
        return Err(Error::Config("K list must be non-empty with every K >= 1".into()));
    }
    if let Some(&k) = options.ks.iter().max().filter(|&&k| k > gallery.len()) {
        return Err(Error::Config(format!("K={k} exceeds gallery size {}", gallery.len())));
    }
    let results = rank_all(query, gallery)?;
    let truth: BTreeMap<String, String> = query
        .ids
        .iter()
        .zip(&query.meta)
        .map(|(id, m)| (id.clone(), m.location_id.clone()))
        .collect();
    let mut recall = BTreeMap::new();
    let mut sdm = BTreeMap::new();
    for &k in &options.ks {
        recall.insert(k, recall_at_k(&results, &truth, k)?);
        sdm.insert(k, sdm_at_k(&results, k, options.sigma_m)?);
    }
    let per_query = (options.per_query_head > 0).then(|| {
        results
            .into_iter()
            .map(|mut r| {
                r.ranked.truncate(options.per_query_head);
                r
            })
            .collect()
    });
    Ok(EvalReport {
        recall,
        sdm,
        sigma_m: options.sigma_m,
        ks: options.ks.clone(),
        queries: query.len(),
        gallery: gallery.len(),
        per_query,
    })
}

/// Extracts query and gallery features with `encoder` and scores them.
pub fn evaluate(query: &Manifest, gallery: &Manifest, encoder: &Encoder, options: &EvalOptions) -> Result<EvalReport> {
    let queries: Vec<ImageRecord> = query
        .records()
        .iter()
        .filter(|r| r.platform == options.query_platform)
        .cloned()
        .collect();
    if queries.is_empty() {
        return Err(Error::Config(format!("no {} queries in the query manifest", options.query_platform)));
    }
    let gallery_records: Vec<ImageRecord> = options
        .filter
        .apply(gallery)?
        .records()
        .iter()
        .filter(|r| r.platform == options.gallery_platform)
        .cloned()
        .collect();
    if gallery_records.is_empty() {
        return Err(Error::Config("gallery is empty after filtering".into()));
    }
    let q = extract_features(&queries, encoder, options.batch_size)?;
    let g = extract_features(&gallery_records, encoder, options.batch_size)?;
    evaluate_stores(&q, &g, options)
}
