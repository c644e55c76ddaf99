//! The optimisation loop: sampling, augmentation, the shared encoder, the
//! objective, AdamW, checkpoints and the per-step CSV log.

mod optim;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, AdamW};

use crate::checkpoint::Checkpoint;
use crate::dataset::{augment, make_pairs, sample_batches, AugmentParams, Manifest};
use crate::encoder::{make_encoder_seeded, Encoder, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::geo::{build_neighbor_index, NeighborIndex, EARTH_RADIUS_M};
use crate::loss::{total_loss_graded, BatchFeatures, LossBreakdown, LossConfig};
use crate::raster::Raster;
use crate::seed::derive_seed;

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_COLUMNS: [&str; 8] = ["step", "l_p", "l_gs", "l_gu", "l_gc", "total", "skipped_anchors", "lr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentParams,
    pub neighbor_k: usize,
    /// Write `epoch_<n>.ckpt` every this many epochs; 0 writes only the
    /// final checkpoint.
    pub checkpoint_every: usize,
    /// Pairs of one location kept adjacent by the batch sampler.
    pub pairs_per_location: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            augment: AugmentParams::default(),
            neighbor_k: 8,
            checkpoint_every: 10,
            pairs_per_location: 2,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.neighbor_k < 1 {
            return bad("neighbor_k must be >= 1".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if self.augment.target_size != self.encoder.input_size {
            return bad(format!(
                "augment.target_size {:?} must equal encoder.input_size {:?}",
                self.augment.target_size, self.encoder.input_size
            ));
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        self.augment.validate()
    }

    /// Sets both the encoder input size and the augmentation target.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.encoder.input_size = [size, size];
        self.augment.target_size = [size, size];
        self
    }
}

/// Haversine k-nearest-location index over the manifest's distinct
/// locations, built once before training.
pub fn precompute_geo(manifest: &Manifest, k: usize) -> Result<NeighborIndex> {
    build_neighbor_index(&manifest.locations(), k, EARTH_RADIUS_M)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
}

impl StepRecord {
    fn fields(&self) -> [String; 8] {
        let b = &self.breakdown;
        [
            self.step.to_string(),
            b.l_p.to_string(),
            b.l_gs.to_string(),
            b.l_gu.to_string(),
            b.l_gc.to_string(),
            b.total.to_string(),
            b.skipped_anchors.to_string(),
            self.lr.to_string(),
        ]
    }
}

/// Reads a training log back into step records (`l_g` is re-derived).
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad number `{}`", path.display(), &row[i])))
        };
        let (l_gs, l_gu, l_gc) = (f(2)?, f(3)?, f(4)?);
        out.push(StepRecord {
            step: f(0)? as u64,
            breakdown: LossBreakdown {
                l_p: f(1)?,
                l_gs,
                l_gu,
                l_gc,
                l_g: l_gs + l_gu + l_gc,
                l_triplet: 0.0,
                total: f(5)?,
                skipped_anchors: f(6)? as usize,
            },
            lr: f(7)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Mean total loss of each epoch run in this invocation.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn load_rasters(manifest: &Manifest, indices: impl Iterator<Item = usize>) -> Result<HashMap<usize, Raster>> {
    let mut cache = HashMap::new();
    for i in indices {
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(i) {
            let r = &manifest.records()[i];
            let img = Raster::load(&r.uri).map_err(|message| Error::UnreadableImage {
                id: r.id.clone(),
                message,
            })?;
            e.insert(img);
        }
    }
    Ok(cache)
}

/// Rebuilds the trained encoder stored in a checkpoint.
pub fn load_encoder(path: &Path) -> Result<(Encoder, TrainConfig)> {
    let ckpt = Checkpoint::read(path)?;
    let config: TrainConfig = serde_json::from_value(ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("{}: config echo: {e}", path.display())))?;
    let mut enc_cfg = config.encoder.clone();
    enc_cfg.pretrained = false;
    let mut encoder = make_encoder_seeded(&enc_cfg, 0)?;
    encoder.load_params(ckpt.params)?;
    Ok((encoder, config))
}

/// Copy of `config` with the fields that may change on resume blanked.
fn resume_key(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: 0,
        checkpoint_every: 0,
        ..config.clone()
    }
}

pub fn train(config: &TrainConfig, manifest: &Manifest, out_dir: &Path) -> Result<TrainOutcome> {
    train_with(config, manifest, out_dir, &TrainOptions::default())
}

pub fn train_with(config: &TrainConfig, manifest: &Manifest, out_dir: &Path, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    manifest.validate_training()?;
    let pairs = make_pairs(manifest)?;
    let index = precompute_geo(manifest, config.neighbor_k)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cache = load_rasters(manifest, pairs.iter().flat_map(|p| [p.sat, p.uav]))?;

    let mut encoder = make_encoder_seeded(&config.encoder, derive_seed(config.seed, &[0xE7C0]))?;
    let mut opt = AdamW::new(encoder.params(), config.learning_rate, config.weight_decay);
    let config_echo = serde_json::to_value(config)?;

    let (mut epoch, mut step) = (0u64, 0u64);
    if let Some(path) = &options.resume {
        let ckpt = Checkpoint::read(path)?;
        let saved: TrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        if resume_key(&saved) != resume_key(config) {
            return Err(Error::Config(
                "resume checkpoint was written with a different configuration".into(),
            ));
        }
        encoder.load_params(ckpt.params)?;
        if let Some(state) = ckpt.optimizer {
            opt.load_state(state).map_err(Error::Checkpoint)?;
        }
        epoch = ckpt.epoch;
        step = ckpt.step;
        log::info!("resuming at epoch {epoch}, step {step}");
    }

    let log_path = out_dir.join(LOG_FILE);
    let mut kept_rows: Vec<csv::StringRecord> = Vec::new();
    if options.resume.is_some() && log_path.is_file() {
        let mut r = csv::Reader::from_path(&log_path)?;
        for row in r.records() {
            let row = row?;
            if row[0].parse::<u64>().is_ok_and(|s| s < step) {
                kept_rows.push(row);
            }
        }
    }
    let mut log = csv::Writer::from_path(&log_path)?;
    log.write_record(LOG_COLUMNS)?;
    for row in &kept_rows {
        log.write_record(row)?;
    }

    let mut epoch_losses = Vec::new();
    let save = |encoder: &Encoder, opt: &AdamW, epoch: u64, step: u64, path: &Path| {
        Checkpoint {
            config: config_echo.clone(),
            epoch,
            step,
            seed: config.seed,
            params: encoder.params().to_vec(),
            optimizer: Some(opt.state().clone()),
        }
        .write(path)
    };

    while (epoch as usize) < config.epochs {
        let batches = sample_batches(&pairs, config.batch_size, config.pairs_per_location, config.seed, epoch)?;
        let mut sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut images = Vec::with_capacity(2 * batch.len());
            for view in 0..2u64 {
                for (i, &pi) in batch.iter().enumerate() {
                    let p = &pairs[pi];
                    let src = &cache[&if view == 0 { p.sat } else { p.uav }];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &[0xA06, config.augment.seed, epoch, bi as u64, i as u64, view],
                    ));
                    images.push(augment(src, &config.augment, &mut rng));
                }
            }
            let refs: Vec<&Raster> = images.iter().collect();
            let encoded = encoder.encode(&refs, Mode::Train)?;
            let b = batch.len();
            let e = encoded.embeddings.mapv(f64::from);
            if !e.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr: config.learning_rate,
                    breakdown: "non-finite embeddings".into(),
                });
            }
            let features = BatchFeatures::new(
                e.slice(s![..b, ..]).to_owned(),
                e.slice(s![b.., ..]).to_owned(),
                batch.iter().map(|&i| pairs[i].location_id.clone()).collect(),
                batch.iter().map(|&i| pairs[i].geo).collect(),
            )?;
            let mut loss_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x7819, step]));
            let out = total_loss_graded(&features, &index, &config.loss, &mut loss_rng)?;
            if !out.breakdown.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr: config.learning_rate,
                    breakdown: format!("{:?}", out.breakdown),
                });
            }
            let mut grad = Array2::<f32>::zeros((2 * b, config.encoder.embedding_dim));
            grad.slice_mut(s![..b, ..]).assign(&out.grad_sat.mapv(|v| v as f32));
            grad.slice_mut(s![b.., ..]).assign(&out.grad_uav.mapv(|v| v as f32));
            let mut grads = encoder.backward(&encoded, &grad)?;
            if config.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, config.grad_clip);
            }
            opt.step(encoder.params_mut(), &grads);
            let record = StepRecord {
                step,
                breakdown: out.breakdown,
                lr: config.learning_rate,
            };
            log.write_record(record.fields())?;
            sum += out.breakdown.total;
            step += 1;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        epoch += 1;
        let mean = sum / batches.len() as f64;
        epoch_losses.push(mean);
        log::info!("epoch {epoch}/{}: mean loss {mean:.5}", config.epochs);
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every as u64 == 0 {
            save(&encoder, &opt, epoch, step, &out_dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
    }
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save(&encoder, &opt, epoch, step, &checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        epoch_losses,
        steps: step,
    })
}
