use serde::{Deserialize, Serialize};

use super::{ssim_alteration_labelled, AlterationMap, LatentStats, RankEntry};
use crate::classifier::TrainedClassifier;
use crate::error::{Error, Result};
use crate::image::ProcessedImage;
use crate::model::{DiscoverModel, LatentVector};

pub const DEFAULT_MAX_DELTA_STD: f64 = 4.0;
pub const DEFAULT_MAGNITUDE_STD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalResult {
    /// 1-based.
    pub feature: usize,
    pub delta_std: f64,
    pub latent: LatentVector,
    pub image: ProcessedImage,
    pub score: f32,
    /// Score of the plain reconstruction.
    pub base_score: f32,
}

/// The two counterfactuals of one image along one feature and the
/// alteration map between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    pub feature: usize,
    pub r: f64,
    pub toward_class0: TraversalResult,
    pub toward_class1: TraversalResult,
    pub alteration: AlterationMap,
}

/// A model, the classifier it was trained against and its latent statistics.
#[derive(Debug, Clone, Copy)]
pub struct Interpreter<'a> {
    pub model: &'a DiscoverModel,
    pub classifier: &'a TrainedClassifier,
    pub stats: &'a LatentStats,
    pub max_delta_std: f64,
}

impl<'a> Interpreter<'a> {
    pub fn new(model: &'a DiscoverModel, classifier: &'a TrainedClassifier, stats: &'a LatentStats) -> Result<Self> {
        model.check_classifier(classifier.recorded_hash())?;
        if stats.dim() != model.latent_dim() {
            return Err(Error::contract(format!(
                "latent statistics cover {} features, model has {}",
                stats.dim(),
                model.latent_dim()
            )));
        }
        Ok(Self {
            model,
            classifier,
            stats,
            max_delta_std: DEFAULT_MAX_DELTA_STD,
        })
    }

    /// `z` with feature `feature` moved by `delta_std` standard deviations.
    /// A zero delta returns `z` unchanged.
    pub fn shift(&self, z: &LatentVector, feature: usize, delta_std: f64) -> Result<LatentVector> {
        if !delta_std.is_finite() || delta_std.abs() > self.max_delta_std {
            return Err(Error::contract(format!(
                "delta_std {delta_std} outside [-{0}, {0}]",
                self.max_delta_std
            )));
        }
        let std = self.stats.usable_std(feature)?;
        let mut out = z.clone();
        if delta_std != 0.0 {
            let v = &mut out.values[feature - 1];
            *v = (f64::from(*v) + delta_std * std) as f32;
        }
        Ok(out)
    }

    /// Decodes `img` with one latent feature shifted.
    pub fn traverse(&self, img: &ProcessedImage, feature: usize, delta_std: f64) -> Result<TraversalResult> {
        let z = self.model.encode(img)?;
        let shifted = self.shift(&z, feature, delta_std)?;
        let reconstruction = self.model.decode(&z)?;
        let base_score = self.classifier.score(&reconstruction)?;
        let (image, score) = if delta_std == 0.0 {
            (reconstruction, base_score)
        } else {
            let image = self.model.decode(&shifted)?;
            let score = self.classifier.score(&image)?;
            (image, score)
        };
        Ok(TraversalResult {
            feature,
            delta_std,
            latent: shifted,
            image,
            score,
            base_score,
        })
    }

    /// Traverses `magnitude` standard deviations both ways, oriented by the
    /// sign of the feature's correlation so that `toward_class1` moves the
    /// score up.
    pub fn counterfactual(&self, img: &ProcessedImage, entry: &RankEntry, magnitude: f64) -> Result<Counterfactual> {
        let up = entry.sign() * magnitude;
        let toward_class1 = self.traverse(img, entry.feature, up)?;
        let toward_class0 = self.traverse(img, entry.feature, -up)?;
        let pair = format!("feature #{}: {:+} std vs {:+} std", entry.feature, -up, up);
        let alteration = ssim_alteration_labelled(&toward_class0.image, &toward_class1.image, &pair)?;
        Ok(Counterfactual {
            feature: entry.feature,
            r: entry.r,
            toward_class0,
            toward_class1,
            alteration,
        })
    }
}
