//! Multi-run experiments: the loss-part ablation, the α sweep and the
//! triplet-baseline comparison. Trained models are cached on disk under a
//! hash of their training inputs, so rows shared between experiments are
//! trained once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::loss::Objective;
use crate::train::{load_encoder, train, TrainConfig, FINAL_CHECKPOINT};

/// `(L_GS, L_GU, L_GC)` toggles of the eight ablation rows, in table order.
pub const ABLATION_SUBSETS: [[bool; 3]; 8] = [
    [false, false, false],
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [false, true, true],
    [true, false, true],
    [true, true, true],
];

const SUMMARY_FILE: &str = "summary.json";

/// Data and evaluation settings shared by every run of an experiment.
pub struct Bench<'a> {
    pub train: &'a Manifest,
    pub query: &'a Manifest,
    pub gallery: &'a Manifest,
    pub eval: EvalOptions,
    pub cache_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Summary {
    config: TrainConfig,
    epoch_losses: Vec<f64>,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: TrainConfig,
    pub run_dir: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub report: EvalReport,
    /// Whether the model came from the cache.
    pub cached: bool,
}

/// Hex SHA-256 over the training config and the training records.
pub fn run_key(config: &TrainConfig, manifest: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    for r in manifest.records() {
        h.update(r.id.as_bytes());
        h.update([0]);
        h.update(r.uri.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(r.geo.lat_deg().to_le_bytes());
        h.update(r.geo.lon_deg().to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// One lock per run directory, so threads asking for the same run train it once.
fn run_lock(dir: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<BTreeMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let mut map = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(dir.to_path_buf()).or_default().clone()
}

/// Trains `config` unless an identical run is cached, then evaluates.
pub fn run_cached(config: &TrainConfig, bench: &Bench) -> Result<RunResult> {
    let key = run_key(config, bench.train)?;
    let run_dir = bench.cache_dir.join(&key[..16]);
    let lock = run_lock(&run_dir);
    let guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let summary_path = run_dir.join(SUMMARY_FILE);
    let cached = summary_path.is_file() && run_dir.join(FINAL_CHECKPOINT).is_file();
    let summary = if cached {
        let text = std::fs::read(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        serde_json::from_slice::<Summary>(&text)?
    } else {
        let staging = bench.cache_dir.join(format!("{}.partial", &key[..16]));
        if staging.exists() {
            std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let out = train(config, bench.train, &staging)?;
        let summary = Summary {
            config: config.clone(),
            epoch_losses: out.epoch_losses,
            steps: out.steps,
        };
        let path = staging.join(SUMMARY_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
        if run_dir.exists() {
            std::fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        }
        std::fs::rename(&staging, &run_dir).map_err(|e| Error::io(&run_dir, e))?;
        summary
    };
    drop(guard);
    let (encoder, _) = load_encoder(&run_dir.join(FINAL_CHECKPOINT))?;
    let report = evaluate(bench.query, bench.gallery, &encoder, &bench.eval)?;
    Ok(RunResult {
        config: summary.config,
        run_dir,
        epoch_losses: summary.epoch_losses,
        report,
        cached,
    })
}

/// One trained-and-evaluated configuration in a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// Row label: ablation index, α value or objective name.
    pub label: String,
    pub seed: u64,
    pub recall: BTreeMap<usize, f64>,
    pub sdm: BTreeMap<usize, f64>,
    pub final_loss: f64,
    pub run_dir: PathBuf,
}

impl TableRow {
    fn from_run(label: String, run: &RunResult) -> Self {
        Self {
            label,
            seed: run.config.seed,
            recall: run.report.recall.clone(),
            sdm: run.report.sdm.clone(),
            final_loss: run.epoch_losses.last().copied().unwrap_or(f64::NAN),
            run_dir: run.run_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub ks: Vec<usize>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// `label,seed,recall@1,sdm@K...,final_loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string(), "seed".into(), "recall@1".into()];
        header.extend(self.ks.iter().map(|k| format!("sdm@{k}")));
        header.push("final_loss".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.seed.to_string()];
            rec.push(r.recall.get(&1).map(f64::to_string).unwrap_or_default());
            rec.extend(self.ks.iter().map(|k| r.sdm.get(k).map(f64::to_string).unwrap_or_default()));
            rec.push(r.final_loss.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Median of `metric` over the rows with `label`.
    pub fn median(&self, label: &str, metric: impl Fn(&TableRow) -> f64) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.label == label).map(metric).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

pub fn ablation_config(base: &TrainConfig, subset: [bool; 3], seed: u64) -> TrainConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.loss.objective = Objective::GeoAdaptive;
    [c.loss.enable_gs, c.loss.enable_gu, c.loss.enable_gc] = subset;
    c
}

/// Trains and evaluates the chosen ablation rows (1-based table indices)
/// for every seed. Seeds are shared across rows.
pub fn run_ablate_rows(base: &TrainConfig, bench: &Bench, rows: &[usize], seeds: &[u64]) -> Result<Table> {
    let mut out = Vec::new();
    for &index in rows {
        let subset = *ABLATION_SUBSETS
            .get(index.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("ablation row {index} is not in 1..=8")))?;
        for &seed in seeds {
            let run = run_cached(&ablation_config(base, subset, seed), bench)?;
            out.push(TableRow::from_run(index.to_string(), &run));
        }
    }
    Ok(Table {
        ks: bench.eval.ks.clone(),
        rows: out,
    })
}

/// All eight ablation rows.
pub fn run_ablate(base: &TrainConfig, bench: &Bench, seeds: &[u64]) -> Result<Table> {
    run_ablate_rows(base, bench, &[1, 2, 3, 4, 5, 6, 7, 8], seeds)
}

/// One run per α with everything else held fixed.
pub fn run_sweep_alpha(base: &TrainConfig, bench: &Bench, alphas: &[f64]) -> Result<Table> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut c = base.clone();
        c.loss.alpha = alpha;
        let run = run_cached(&c, bench)?;
        rows.push(TableRow::from_run(alpha.to_string(), &run));
    }
    Ok(Table {
        ks: bench.eval.ks.clone(),
        rows,
    })
}

/// The geographic objective against the random and batch-hard triplet
/// baselines under identical sampling.
pub fn run_compare_baselines(base: &TrainConfig, bench: &Bench) -> Result<Table> {
    let mut rows = Vec::new();
    for (label, objective) in [
        ("geo_adaptive", Objective::GeoAdaptive),
        ("triplet", Objective::Triplet),
        ("hard_triplet", Objective::HardTriplet),
    ] {
        let mut c = base.clone();
        c.loss.objective = objective;
        let run = run_cached(&c, bench)?;
        rows.push(TableRow::from_run(label.into(), &run));
    }
    Ok(Table {
        ks: bench.eval.ks.clone(),
        rows,
    })
}
