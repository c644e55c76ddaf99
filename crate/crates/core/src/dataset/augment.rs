use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Resize target plus the photometric/flip augmentation strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// `[height, width]` in pixels.
    pub target_size: [usize; 2],
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            target_size: [224, 224],
            flip_prob: 0.5,
            jitter_strength: 0.1,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.target_size[0] == 0 || self.target_size[1] == 0 {
            return Err(Error::Config("augment.target_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("augment.flip_prob must be in [0, 1]".into()));
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::Config("augment.jitter_strength must be >= 0".into()));
        }
        Ok(())
    }
}

/// Resizes, then randomly flips and colour-jitters (brightness, contrast,
/// saturation). Geometry other than a horizontal flip is never touched so
/// the image centre keeps its GPS meaning.
pub fn augment<R: Rng + ?Sized>(image: &Raster, params: &AugmentParams, rng: &mut R) -> Raster {
    let [h, w] = params.target_size;
    let mut out = image.resize(h, w);
    if params.flip_prob > 0.0 && rng.random_bool(params.flip_prob) {
        out = out.flip_horizontal();
    }
    let s = params.jitter_strength;
    if s > 0.0 {
        let brightness = 1.0 + rng.random_range(-s..=s) as f32;
        let contrast = 1.0 + rng.random_range(-s..=s) as f32;
        let saturation = 1.0 + rng.random_range(-s..=s) as f32;
        color_jitter(&mut out, brightness, contrast, saturation);
    }
    out
}

fn color_jitter(img: &mut Raster, brightness: f32, contrast: f32, saturation: f32) {
    let n = img.height() * img.width();
    let data = img.data_mut();
    for v in data.iter_mut() {
        *v *= brightness;
    }
    let mean = data.iter().sum::<f32>() / data.len() as f32;
    for v in data.iter_mut() {
        *v = mean + (*v - mean) * contrast;
    }
    for i in 0..n {
        let gray = 0.299 * data[i] + 0.587 * data[n + i] + 0.114 * data[2 * n + i];
        for c in 0..3 {
            let v = &mut data[c * n + i];
            *v = gray + (*v - gray) * saturation;
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}
