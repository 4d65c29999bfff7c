//! The generative interpreter: an encoder/decoder pair with a latent critic
//! and a linear subset probe, trained against a frozen classifier.
//!
//! Latent features are numbered from 1 in every user-facing place (rankings,
//! traversal requests, file exports). Features `1..=K` form the
//! classification subset. [`LatentVector::values`] is an ordinary 0-based
//! slice.

pub mod losses;
mod networks;
mod train;

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use losses::{LossReport, LossTerms, LossWeights, TERM_NAMES};
pub use networks::{Critic, Decoder, Encoder, Networks, Probe};
pub use train::{forward_terms, sidecar_for, train, EpochRecord, Forward, TrainOptions, Trainer, TrainingLog};

use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::image::ProcessedImage;
use crate::interpret::LatentStats;
use crate::nn::{images_to_tensor, rows_to_tensor, tensor_to_images, tensor_to_rows, ParamStore};

const BATCH_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoverConfig {
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    /// Number of leading latent features tied to the classifier score.
    #[serde(default = "defaults::subset_size")]
    pub subset_size: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::learning_rate")]
    pub critic_learning_rate: f64,
    #[serde(default = "defaults::base_channels")]
    pub base_channels: usize,
    #[serde(default = "defaults::max_channels")]
    pub max_channels: usize,
    #[serde(default = "defaults::critic_hidden")]
    pub critic_hidden: usize,
    /// Save an intermediate checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Training images used for the per-epoch correlation and reconstruction
    /// metrics.
    #[serde(default = "defaults::metric_sample")]
    pub metric_sample: usize,
}

mod defaults {
    pub fn latent_dim() -> usize {
        32
    }
    pub fn subset_size() -> usize {
        8
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn base_channels() -> usize {
        8
    }
    pub fn max_channels() -> usize {
        64
    }
    pub fn critic_hidden() -> usize {
        64
    }
    pub fn metric_sample() -> usize {
        256
    }
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl DiscoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.subset_size == 0 || self.subset_size > self.latent_dim {
            return Err(Error::config(format!(
                "subset_size must lie in 1..={} (latent_dim), got {}",
                self.latent_dim, self.subset_size
            )));
        }
        self.loss_weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for batch correlations"));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("critic_learning_rate", self.critic_learning_rate),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels || self.critic_hidden == 0 {
            return Err(Error::config("invalid network widths"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// One encoded image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f32>,
}

impl LatentVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("latent vector has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Value of feature `feature` (1-based).
    pub fn feature(&self, feature: usize) -> Option<f32> {
        feature.checked_sub(1).and_then(|i| self.values.get(i).copied())
    }
}

pub const ENCODER_FILE: &str = "encoder.safetensors";
pub const DECODER_FILE: &str = "decoder.safetensors";
pub const CRITIC_FILE: &str = "critic.safetensors";
pub const PROBES_FILE: &str = "probes.safetensors";
pub const SIDECAR_FILE: &str = "discover.json";
pub const FORMAT_VERSION: u32 = 1;

const WEIGHT_FILES: [(&str, &str); 4] = [
    (ENCODER_FILE, "encoder."),
    (DECODER_FILE, "decoder."),
    (CRITIC_FILE, "critic."),
    (PROBES_FILE, "probe_"),
];

/// Checkpoint sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverSidecar {
    pub format_version: u32,
    pub config: DiscoverConfig,
    pub config_hash: String,
    pub side: usize,
    pub classifier_hash: String,
    pub weights_hash: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_metrics: Option<EpochRecord>,
    pub latent_stats: Option<LatentStats>,
}

impl DiscoverSidecar {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "discover sidecar",
            msg: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// A trained interpreter. Immutable; safe to share between threads.
#[derive(Debug)]
pub struct DiscoverModel {
    params: ParamStore,
    nets: Networks,
    config: DiscoverConfig,
    side: usize,
    classifier_hash: String,
}

impl DiscoverModel {
    /// Freezes a copy of `params` and binds it to the classifier identified
    /// by `classifier_hash`.
    pub fn from_params(config: DiscoverConfig, side: usize, params: &ParamStore, classifier_hash: &str) -> Result<Self> {
        config.validate()?;
        let mut params = params.frozen_copy()?;
        let nets = Networks::build(&mut params, side, &config)?;
        Ok(Self {
            params,
            nets,
            config,
            side,
            classifier_hash: classifier_hash.to_string(),
        })
    }

    pub fn config(&self) -> &DiscoverConfig {
        &self.config
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn subset_size(&self) -> usize {
        self.config.subset_size
    }

    pub fn classifier_hash(&self) -> &str {
        &self.classifier_hash
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn weights_hash(&self) -> Result<String> {
        self.params.hash()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Fails unless `hash` identifies the classifier this model was trained
    /// against.
    pub fn check_classifier(&self, hash: &str) -> Result<()> {
        if hash != self.classifier_hash {
            return Err(Error::contract(format!(
                "model was trained against classifier {}, not {}",
                short(&self.classifier_hash),
                short(hash)
            )));
        }
        Ok(())
    }

    fn check_image(&self, img: &ProcessedImage) -> Result<()> {
        if img.side() != self.side {
            return Err(Error::contract(format!(
                "model expects {0}x{0} input, got {1}x{1}",
                self.side,
                img.side()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &LatentVector) -> Result<()> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::contract(format!(
                "latent vector has dimension {}, model uses {}",
                z.dim(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// `(b, 1, s, s) -> (b, d)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.nets.encoder.forward(&x.to_dtype(self.dtype())?)
    }

    /// `(b, d) -> (b, 1, s, s)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.nets.decoder.forward(&z.to_dtype(self.dtype())?)
    }

    pub fn encode(&self, img: &ProcessedImage) -> Result<LatentVector> {
        Ok(self.encode_batch(&[img])?.remove(0))
    }

    pub fn encode_batch(&self, images: &[&ProcessedImage]) -> Result<Vec<LatentVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(BATCH_CHUNK) {
            for img in chunk {
                self.check_image(img)?;
            }
            let z = self.encode_tensor(&images_to_tensor(chunk, self.dtype())?)?;
            for row in tensor_to_rows(&z)? {
                out.push(LatentVector::new(row)?);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentVector) -> Result<ProcessedImage> {
        Ok(self.decode_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[LatentVector]) -> Result<Vec<ProcessedImage>> {
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(BATCH_CHUNK) {
            for z in chunk {
                self.check_latent(z)?;
            }
            let rows: Vec<Vec<f32>> = chunk.iter().map(|z| z.values.clone()).collect();
            let x = self.decode_tensor(&rows_to_tensor(&rows, self.dtype())?)?;
            out.extend(tensor_to_images(&x)?);
        }
        Ok(out)
    }

    /// `decode(encode(img))`.
    pub fn reconstruct(&self, img: &ProcessedImage) -> Result<ProcessedImage> {
        self.decode(&self.encode(img)?)
    }

    pub fn save(&self, dir: &Path, sidecar: &DiscoverSidecar) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, prefix) in WEIGHT_FILES {
            self.params.save_filtered(&dir.join(file), |name| name.starts_with(prefix))?;
        }
        sidecar.write(dir)
    }

    /// Loads weights and sidecar, verifying the recorded weights hash.
    pub fn load(dir: &Path) -> Result<(Self, DiscoverSidecar)> {
        let sidecar = DiscoverSidecar::read(dir)?;
        if sidecar.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "discover sidecar",
                msg: format!("unsupported format version {}", sidecar.format_version),
            });
        }
        let paths: Vec<PathBuf> = WEIGHT_FILES.iter().map(|(f, _)| dir.join(f)).collect();
        let params = ParamStore::load_merged(&paths, DType::F32, true)?;
        let model = Self::from_params(sidecar.config.clone(), sidecar.side, &params, &sidecar.classifier_hash)?;
        if model.weights_hash()? != sidecar.weights_hash {
            return Err(Error::contract(format!(
                "weights in {} do not match the hash in their sidecar",
                dir.display()
            )));
        }
        Ok((model, sidecar))
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
