//! The shared-parameter feature extractor. Satellite and UAV images go
//! through the same callable with the same parameters; there is no second
//! branch to drift.

mod toy;

use std::any::Any;
use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use toy::{ImageBatch, Param, Real, Tape, ToyNet, CONV_CHANNELS};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: String,
    pub embedding_dim: usize,
    pub pretrained: bool,
    /// `[height, width]` in pixels.
    pub input_size: [usize; 2],
    /// Checkpoint to initialise from when `pretrained` is set.
    pub weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: "toy".into(),
            embedding_dim: 64,
            pretrained: false,
            input_size: [224, 224],
            weights: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "encoder.embedding_dim must be >= 2, got {}",
                self.embedding_dim
            )));
        }
        if self.input_size[0] == 0 || self.input_size[1] == 0 {
            return Err(Error::Config("encoder.input_size must be positive".into()));
        }
        Ok(())
    }
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub const NORM_TOLERANCE: f32 = 1e-5;

    /// Wraps a vector, rejecting it unless its norm is 1 within tolerance.
    pub fn new(v: Vec<f32>) -> Result<Self> {
        let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32;
        if (n - 1.0).abs() > Self::NORM_TOLERANCE {
            return Err(Error::DimensionMismatch {
                expected: "unit-norm vector".into(),
                actual: format!("norm {n}"),
            });
        }
        Ok(Self(v))
    }

    /// Scales `v` to unit norm.
    pub fn normalize(mut v: Vec<f32>) -> Self {
        let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x = (*x as f64 / n) as f32;
        }
        Self(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Opaque per-backbone intermediate state for the backward pass.
pub type BackboneTape = Box<dyn Any + Send>;

/// A trainable image-to-embedding network operating in `f32`.
pub trait Backbone: Send + Sync {
    fn params(&self) -> &[Param<f32>];
    fn params_mut(&mut self) -> &mut [Param<f32>];
    /// Returns unit-norm embeddings `[B, D]` and, when `keep_tape`, the
    /// state needed by [`Backbone::backward`].
    fn forward(&self, images: &[&Raster], keep_tape: bool) -> (Array2<f32>, Option<BackboneTape>);
    fn backward(&self, tape: &BackboneTape, grad_embeddings: &Array2<f32>) -> Vec<Vec<f32>>;
    fn box_clone(&self) -> Box<dyn Backbone>;
}

impl Backbone for ToyNet<f32> {
    fn params(&self) -> &[Param<f32>] {
        ToyNet::params(self)
    }

    fn params_mut(&mut self) -> &mut [Param<f32>] {
        ToyNet::params_mut(self)
    }

    fn forward(&self, images: &[&Raster], keep_tape: bool) -> (Array2<f32>, Option<BackboneTape>) {
        let batch = ImageBatch::from_rasters(images);
        let (e, tape) = ToyNet::forward(self, &batch);
        (e, keep_tape.then(|| Box::new(tape) as BackboneTape))
    }

    fn backward(&self, tape: &BackboneTape, grad_embeddings: &Array2<f32>) -> Vec<Vec<f32>> {
        let tape = tape.downcast_ref::<Tape<f32>>().expect("toy tape");
        ToyNet::backward(self, tape, grad_embeddings)
    }

    fn box_clone(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

pub type BackboneBuilder = fn(&EncoderConfig, u64) -> Result<Box<dyn Backbone>>;

/// Name → constructor table for backbones.
#[derive(Clone)]
pub struct BackboneRegistry {
    builders: BTreeMap<String, BackboneBuilder>,
}

fn build_toy(config: &EncoderConfig, seed: u64) -> Result<Box<dyn Backbone>> {
    Ok(Box::new(ToyNet::<f32>::new(config.embedding_dim, seed)))
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut builders = BTreeMap::new();
        builders.insert("toy".to_string(), build_toy as BackboneBuilder);
        Self { builders }
    }
}

impl BackboneRegistry {
    pub fn register(&mut self, name: &str, builder: BackboneBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(&self, config: &EncoderConfig, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let builder = self
            .builders
            .get(&config.backbone)
            .ok_or_else(|| Error::UnknownBackbone {
                name: config.backbone.clone(),
                known: self.names().join(", "),
            })?;
        let mut encoder = Encoder {
            config: config.clone(),
            backbone: builder(config, seed)?,
        };
        if config.pretrained {
            let path = config
                .weights
                .as_ref()
                .filter(|p| p.is_file())
                .ok_or_else(|| Error::WeightsUnavailable(config.backbone.clone()))?;
            encoder.load_params(crate::checkpoint::Checkpoint::read(path)?.params)?;
        }
        Ok(encoder)
    }
}

/// Builds an encoder from the default registry with initialization seed 0.
pub fn make_encoder(config: &EncoderConfig) -> Result<Encoder> {
    make_encoder_seeded(config, 0)
}

pub fn make_encoder_seeded(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    BackboneRegistry::default().build(config, seed)
}

/// Output of [`Encoder::encode`].
pub struct Encoded {
    pub embeddings: Array2<f32>,
    pub tape: Option<BackboneTape>,
}

impl Encoded {
    pub fn rows(&self) -> Vec<Embedding> {
        self.embeddings
            .rows()
            .into_iter()
            .map(|r| Embedding(r.to_vec()))
            .collect()
    }
}

pub struct Encoder {
    config: EncoderConfig,
    backbone: Box<dyn Backbone>,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.box_clone(),
        }
    }
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<f32>] {
        self.backbone.params()
    }

    pub fn params_mut(&mut self) -> &mut [Param<f32>] {
        self.backbone.params_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every parameter array; names and shapes must match.
    pub fn load_params(&mut self, params: Vec<Param<f32>>) -> Result<()> {
        let own = self.backbone.params_mut();
        if params.len() != own.len() {
            return Err(Error::Checkpoint(format!(
                "got {} parameter arrays, backbone expects {}",
                params.len(),
                own.len()
            )));
        }
        for (dst, src) in own.iter().zip(&params) {
            if dst.name != src.name || dst.shape != src.shape || src.value.len() != dst.value.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
        }
        for (dst, src) in own.iter_mut().zip(params) {
            *dst = src;
        }
        Ok(())
    }

    /// Encodes a batch. Train mode keeps what [`Encoder::backward`] needs.
    pub fn encode(&self, images: &[&Raster], mode: Mode) -> Result<Encoded> {
        let [h, w] = self.config.input_size;
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(Error::DimensionMismatch {
                    expected: format!("{h}x{w} image"),
                    actual: format!("{}x{}", img.height(), img.width()),
                });
            }
        }
        if images.is_empty() {
            return Ok(Encoded {
                embeddings: Array2::zeros((0, self.config.embedding_dim)),
                tape: None,
            });
        }
        let (embeddings, tape) = self.backbone.forward(images, mode == Mode::Train);
        Ok(Encoded { embeddings, tape })
    }

    /// Parameter gradients for a train-mode encoding, given the objective's
    /// gradient with respect to its embeddings.
    pub fn backward(&self, encoded: &Encoded, grad_embeddings: &Array2<f32>) -> Result<Vec<Vec<f32>>> {
        let tape = encoded
            .tape
            .as_ref()
            .ok_or_else(|| Error::Config("backward requires a train-mode encoding".into()))?;
        if grad_embeddings.dim() != encoded.embeddings.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", encoded.embeddings.dim()),
                actual: format!("{:?}", grad_embeddings.dim()),
            });
        }
        Ok(self.backbone.backward(tape, grad_embeddings))
    }
}
