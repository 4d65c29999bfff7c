//! The frozen binary classifier being interpreted: fine-tuning, scoring, ROC
//! evaluation, GradCAM and checkpoints.

mod gradcam;
mod network;
mod roc;

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcam::{gradcam, GradcamMap, LayeredNet};
pub(crate) use network::downsampling_stages;
pub use network::{Backbone, ClassifierNet};
pub use roc::RocCurve;

use crate::dataset::{AugmentationPolicy, Augmenter, Label, LabeledImages};
use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::image::ProcessedImage;
use crate::nn::{images_to_tensor, scalar, sigmoid, softplus, ParamStore};

const SCORE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    /// Share of each class held out from training to drive early stopping.
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
    /// Stop after this many epochs without a better validation AUC.
    #[serde(default = "defaults::patience")]
    pub early_stop_patience: Option<usize>,
    /// Safetensors file with torchvision-named VGG-19 trunk weights.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
}

mod defaults {
    pub fn epochs() -> usize {
        10
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn validation_fraction() -> f64 {
        0.1
    }
    pub fn patience() -> Option<usize> {
        Some(3)
    }
}

impl ClassifierConfig {
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone,
            epochs: defaults::epochs(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            augmentation: AugmentationPolicy::none(),
            validation_fraction: defaults::validation_fraction(),
            early_stop_patience: defaults::patience(),
            pretrained_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("classifier epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("classifier learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("classifier batch_size must be positive"));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 0.5)"));
        }
        self.augmentation.validate()
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub validation_auc: Option<f64>,
    /// Mean binary cross-entropy on the hold-out set.
    #[serde(default)]
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    pub epochs: Vec<ClassifierEpoch>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// A classifier with immutable weights. Scores are `sigmoid(logit)` for class 1.
#[derive(Debug)]
pub struct TrainedClassifier {
    net: ClassifierNet,
    params: ParamStore,
    config: ClassifierConfig,
    weights_hash: String,
}

impl TrainedClassifier {
    /// Wraps trained parameters; they are copied and frozen.
    pub fn from_params(config: ClassifierConfig, side: usize, params: &ParamStore) -> Result<Self> {
        let mut params = params.frozen_copy()?;
        let net = ClassifierNet::build(config.backbone, side, &mut params)?;
        let weights_hash = params.hash()?;
        Ok(Self {
            net,
            params,
            config,
            weights_hash,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn side(&self) -> usize {
        self.net.side()
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Identity of the weights; recomputed from the tensors on every call.
    pub fn weights_hash(&self) -> Result<String> {
        self.params.hash()
    }

    /// Hash recorded when the classifier was constructed.
    pub fn recorded_hash(&self) -> &str {
        &self.weights_hash
    }

    /// Differentiable scores for a `(b, 1, s, s)` batch; gradients flow to the
    /// input only.
    pub fn score_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.to_dtype(self.params.dtype())?;
        sigmoid(&self.net.logits(&x)?)
    }

    pub fn check_image(&self, img: &ProcessedImage) -> Result<()> {
        if img.side() != self.side() {
            return Err(Error::contract(format!(
                "classifier expects {0}x{0} grayscale input, got {1}x{1}",
                self.side(),
                img.side()
            )));
        }
        Ok(())
    }

    pub fn score(&self, img: &ProcessedImage) -> Result<f32> {
        Ok(self.score_batch(&[img])?[0])
    }

    pub fn score_batch(&self, images: &[&ProcessedImage]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(SCORE_CHUNK) {
            for img in chunk {
                self.check_image(img)?;
            }
            let x = images_to_tensor(chunk, self.params.dtype())?;
            let s = self.score_tensor(&x)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            out.extend(s.into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(out)
    }

    pub fn score_images(&self, images: &[ProcessedImage]) -> Result<Vec<f32>> {
        self.score_batch(&images.iter().collect::<Vec<_>>())
    }

    pub fn evaluate_roc(&self, test: &LabeledImages) -> Result<RocCurve> {
        let scores: Vec<f64> = self
            .score_images(&test.images)?
            .into_iter()
            .map(f64::from)
            .collect();
        RocCurve::from_scores(&scores, &test.labels)
    }

    /// GradCAM for class 1 at `layer` (default: the last convolution).
    pub fn gradcam(&self, img: &ProcessedImage, layer: Option<&str>) -> Result<GradcamMap> {
        self.check_image(img)?;
        let layer = layer.map_or_else(|| self.net.default_gradcam_layer(), str::to_string);
        gradcam(&self.net, img, &layer, Label::Class1)
    }

    pub fn save(&self, dir: &Path, sidecar: &ClassifierSidecar) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join(WEIGHTS_FILE))?;
        let path = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Sidecar describing this classifier; the input is one gray channel in
    /// `[0, 1]`.
    pub fn sidecar(
        &self,
        class_names: [String; 2],
        preprocess_hash: &str,
        training: ClassifierLog,
        test_auc: Option<f64>,
    ) -> ClassifierSidecar {
        ClassifierSidecar {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            weights_hash: self.weights_hash.clone(),
            class_names,
            input: InputContract {
                channels: 1,
                side: self.side(),
                value_range: [0.0, 1.0],
                preprocess_hash: preprocess_hash.to_string(),
            },
            training,
            test_auc,
        }
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassifierSidecar)> {
        let sidecar = ClassifierSidecar::read(dir)?;
        if sidecar.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "classifier sidecar",
                msg: format!("unsupported format version {}", sidecar.format_version),
            });
        }
        let params = ParamStore::load(&dir.join(WEIGHTS_FILE), DType::F32, true)?;
        let clf = Self::from_params(sidecar.config.clone(), sidecar.input.side, &params)?;
        if clf.recorded_hash() != sidecar.weights_hash {
            return Err(Error::contract(format!(
                "classifier weights in {} do not match the hash in their sidecar",
                dir.display()
            )));
        }
        Ok((clf, sidecar))
    }
}

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const FORMAT_VERSION: u32 = 1;
pub const SIDECAR_FILE: &str = "classifier.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputContract {
    pub channels: usize,
    pub side: usize,
    pub value_range: [f32; 2],
    pub preprocess_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub format_version: u32,
    pub config: ClassifierConfig,
    pub config_hash: String,
    pub weights_hash: String,
    pub class_names: [String; 2],
    pub input: InputContract,
    pub training: ClassifierLog,
    pub test_auc: Option<f64>,
}

impl ClassifierSidecar {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "classifier sidecar",
            msg: e.to_string(),
        })
    }
}

/// Stratified, seeded hold-out of `fraction` of each class.
fn hold_out(data: &LabeledImages, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in Label::BOTH {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == label).collect();
        idx.shuffle(rng);
        let n_val = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    (train, val)
}

/// Binary cross-entropy on logits, averaged over the batch.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (targets * logits)?)?.mean_all()?)
}

/// Hold-out AUC and mean binary cross-entropy.
fn validate(net: &ClassifierNet, data: &LabeledImages, idx: &[usize]) -> Result<(f64, f64)> {
    let mut scores = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(SCORE_CHUNK) {
        let imgs: Vec<&ProcessedImage> = chunk.iter().map(|&i| &data.images[i]).collect();
        let x = images_to_tensor(&imgs, DType::F32)?;
        scores.extend(
            net.logits(&x)?
                .detach()
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?,
        );
    }
    let labels: Vec<Label> = idx.iter().map(|&i| data.labels[i]).collect();
    // softplus(-l) for class 1 and softplus(l) for class 0, in a stable form.
    let bce: f64 = scores
        .iter()
        .zip(&labels)
        .map(|(&l, y)| {
            let m = if *y == Label::Class1 { -l } else { l };
            m.max(0.0) + (-m.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / scores.len() as f64;
    Ok((RocCurve::from_scores(&scores, &labels)?.auc, bce))
}

/// Higher AUC wins; equal AUCs are separated by lower loss, so a checkpoint
/// that ranks perfectly but barely separates the classes is not kept over a
/// confident one.
fn improves(auc: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((b_auc, b_loss)) => auc > b_auc || (auc == b_auc && loss < b_loss),
    }
}

/// Trains a classifier from scratch (or from pretrained trunk weights) with
/// Adam on binary cross-entropy.
pub fn fine_tune(
    data: &LabeledImages,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(TrainedClassifier, ClassifierLog)> {
    config.validate()?;
    let side = data
        .side()
        .ok_or_else(|| Error::contract("empty training set"))?;
    if data.count(Label::Class0) == 0 || data.count(Label::Class1) == 0 {
        return Err(Error::contract("training set must contain both classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_idx, val_idx) = if config.validation_fraction > 0.0 {
        hold_out(data, config.validation_fraction, &mut rng)
    } else {
        ((0..data.len()).collect(), Vec::new())
    };
    let has_val = val_idx.iter().any(|&i| data.labels[i] == Label::Class0)
        && val_idx.iter().any(|&i| data.labels[i] == Label::Class1);

    let mut params = ParamStore::new(seed, DType::F32);
    if let Some(path) = &config.pretrained_weights {
        let pre = ParamStore::load(path, DType::F32, false)?;
        let n = params.preload_from(&pre, |name| name.starts_with("features."))?;
        log::info!("loaded {n} pretrained tensors from {}", path.display());
    }
    let net = ClassifierNet::build(config.backbone, side, &mut params)?;
    let mut opt = AdamW::new(
        params.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut augmenter = Augmenter::new(config.augmentation, seed.wrapping_add(1))?;

    let mut log = ClassifierLog::default();
    let mut best: Option<((f64, f64), ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in train_idx.chunks(config.batch_size) {
            let imgs: Vec<ProcessedImage> = batch.iter().map(|&i| augmenter.apply(&data.images[i])).collect();
            let x = images_to_tensor(&imgs.iter().collect::<Vec<_>>(), DType::F32)?;
            let y: Vec<f32> = batch.iter().map(|&i| data.labels[i].as_target()).collect();
            let y = Tensor::new(y, x.device())?;
            let loss = bce_with_logits(&net.logits(&x)?, &y)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    term: format!("classifier loss (epoch {epoch})"),
                    value,
                });
            }
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let validation = if has_val {
            Some(validate(&net, data, &val_idx)?)
        } else {
            None
        };
        let validation_auc = validation.map(|v| v.0);
        log::info!("classifier epoch {epoch}: loss {:.4} val auc {validation_auc:?}", total / count as f64);
        log.epochs.push(ClassifierEpoch {
            epoch,
            loss: total / count as f64,
            validation_auc,
            validation_loss: validation.map(|v| v.1),
        });
        if let (Some((auc, loss)), Some(patience)) = (validation, config.early_stop_patience) {
            if improves(auc, loss, best.as_ref().map(|b| b.0)) {
                best = Some(((auc, loss), params.frozen_copy()?));
                log.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        } else {
            log.best_epoch = epoch;
        }
    }
    let kept = match best {
        Some((_, snapshot)) if config.early_stop_patience.is_some() => snapshot,
        _ => params.frozen_copy()?,
    };
    Ok((TrainedClassifier::from_params(config.clone(), side, &kept)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticSpec};

    fn synthetic(n: usize, side: usize, seed: u64) -> LabeledImages {
        let spec = SyntheticSpec {
            n_per_class: n,
            side,
            radius: crate::dataset::FactorRange::fixed(side as f64 / 5.0),
            offset: crate::dataset::FactorRange::new(-1.0, 1.0),
            ..Default::default()
        };
        let ds = generate_synthetic_dataset(&spec, seed).unwrap();
        LabeledImages::new(
            ds.records.iter().map(|r| r.id.clone()).collect(),
            ds.records.iter().map(|r| ds.images.get(&r.id).unwrap().clone()).collect(),
            ds.records.iter().map(|r| r.label).collect(),
        )
        .unwrap()
    }

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            epochs: 4,
            learning_rate: 3e-3,
            batch_size: 16,
            validation_fraction: 0.0,
            early_stop_patience: None,
            ..ClassifierConfig::new(Backbone::SmallCnn)
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_class_training_set_rejected() {
        let data = synthetic(4, 16, 0);
        let only0 = data.subset(&[0, 1, 2, 3]);
        assert!(matches!(fine_tune(&only0, &small_config(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_decreases_and_scores_are_valid() {
        let data = synthetic(40, 16, 1);
        let (clf, log) = fine_tune(&data, &small_config(), 3).unwrap();
        assert_eq!(log.epochs.len(), 4);
        assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss, "{log:?}");
        let scores = clf.score_images(&data.images).unwrap();
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));

        // Batched scoring agrees with one-at-a-time scoring.
        let batch = clf.score_batch(&data.images[..8].iter().collect::<Vec<_>>()).unwrap();
        for (img, b) in data.images[..8].iter().zip(&batch) {
            let single = clf.score(img).unwrap();
            assert!((single - b).abs() <= 1e-6);
            assert_eq!(single.to_bits(), clf.score(img).unwrap().to_bits());
        }
        let wrong = ProcessedImage::filled(8, 0.0).unwrap();
        assert!(matches!(clf.score(&wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_in_auc_are_broken_by_loss() {
        assert!(improves(0.9, 0.5, None));
        assert!(improves(1.0, 0.6, Some((0.99, 0.1))));
        assert!(improves(1.0, 0.1, Some((1.0, 0.6))));
        assert!(!improves(1.0, 0.6, Some((1.0, 0.1))));
        assert!(!improves(0.98, 0.01, Some((0.99, 0.5))));
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let data = synthetic(30, 16, 2);
        let cfg = ClassifierConfig {
            epochs: 6,
            validation_fraction: 0.2,
            early_stop_patience: Some(1),
            ..small_config()
        };
        let (_, log) = fine_tune(&data, &cfg, 5).unwrap();
        assert!(log.epochs.iter().all(|e| e.validation_auc.is_some()));
        assert!(log.best_epoch >= 1 && log.best_epoch <= log.epochs.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = synthetic(10, 16, 3);
        let cfg = ClassifierConfig {
            epochs: 1,
            ..small_config()
        };
        let (clf, log) = fine_tune(&data, &cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sidecar = clf.sidecar(["wide".into(), "tall".into()], "p", log, None);
        assert_eq!(sidecar.input.side, 16);
        assert_eq!(sidecar.config_hash, cfg.hash());
        clf.save(dir.path(), &sidecar).unwrap();
        let (loaded, side2) = TrainedClassifier::load(dir.path()).unwrap();
        assert_eq!(side2, sidecar);
        assert_eq!(loaded.weights_hash().unwrap(), clf.weights_hash().unwrap());
        assert_eq!(loaded.score(&data.images[0]).unwrap(), clf.score(&data.images[0]).unwrap());

        let mut tampered = sidecar.clone();
        tampered.weights_hash = "0".repeat(64);
        std::fs::write(dir.path().join(SIDECAR_FILE), serde_json::to_string(&tampered).unwrap()).unwrap();
        assert!(TrainedClassifier::load(dir.path()).is_err());
    }
}
