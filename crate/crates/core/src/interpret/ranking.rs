use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::TrainedClassifier;
use crate::error::{Error, Result};
use crate::image::ProcessedImage;
use crate::model::{DiscoverModel, LatentVector};

/// Per-feature location and spread of the latent codes of a reference set.
/// `std` is the sample standard deviation (divisor `n - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub reference: String,
    pub count: usize,
    /// 1-based indices of features with zero spread.
    pub degenerate: Vec<usize>,
}

impl LatentStats {
    pub fn from_latents(latents: &[LatentVector], reference: &str) -> Result<Self> {
        let n = latents.len();
        if n < 2 {
            return Err(Error::contract(format!(
                "latent statistics need at least 2 reference images, got {n}"
            )));
        }
        let d = latents[0].dim();
        if latents.iter().any(|z| z.dim() != d) {
            return Err(Error::contract("reference latents differ in dimension"));
        }
        let mut mean = vec![0.0; d];
        for z in latents {
            for (m, v) in mean.iter_mut().zip(&z.values) {
                *m += f64::from(*v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for z in latents {
            for ((s, v), m) in var.iter_mut().zip(&z.values).zip(&mean) {
                *s += (f64::from(*v) - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
        let degenerate = std
            .iter()
            .enumerate()
            .filter(|(_, s)| **s <= 0.0)
            .map(|(i, _)| i + 1)
            .collect();
        Ok(Self {
            mean,
            std,
            reference: reference.to_string(),
            count: n,
            degenerate,
        })
    }

    pub fn dim(&self) -> usize {
        self.std.len()
    }

    pub fn is_degenerate(&self, feature: usize) -> bool {
        self.degenerate.contains(&feature)
    }

    /// Standard deviation of a usable 1-based feature.
    pub fn usable_std(&self, feature: usize) -> Result<f64> {
        let s = feature
            .checked_sub(1)
            .and_then(|i| self.std.get(i))
            .ok_or_else(|| Error::contract(format!("feature #{feature} out of range 1..={}", self.dim())))?;
        if *s <= 0.0 {
            return Err(Error::contract(format!(
                "feature #{feature} is degenerate: it does not vary over {}",
                self.reference
            )));
        }
        Ok(*s)
    }
}

/// Encodes `images` and summarizes their latent codes.
pub fn compute_latent_stats(model: &DiscoverModel, images: &[ProcessedImage], reference: &str) -> Result<LatentStats> {
    if images.len() < 2 {
        return Err(Error::contract(format!(
            "latent statistics need at least 2 reference images, got {}",
            images.len()
        )));
    }
    let latents = model.encode_batch(&images.iter().collect::<Vec<_>>())?;
    LatentStats::from_latents(&latents, reference)
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson inputs differ in length");
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    /// 1-based.
    pub feature: usize,
    /// 0 when `degenerate`.
    pub r: f64,
    pub degenerate: bool,
}

impl RankEntry {
    /// +1 when increasing the feature raises the score, else -1.
    pub fn sign(&self) -> f64 {
        if self.r < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

/// Features sorted by `|r|` descending (ties by index); degenerate features
/// last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub entries: Vec<RankEntry>,
    pub evaluation_set: String,
}

impl FeatureRanking {
    fn sort(entries: &mut [RankEntry]) {
        entries.sort_by(|a, b| {
            a.degenerate
                .cmp(&b.degenerate)
                .then(b.r.abs().total_cmp(&a.r.abs()))
                .then(a.feature.cmp(&b.feature))
        });
    }

    /// The `n` strongest non-degenerate features.
    pub fn top(&self, n: usize) -> Vec<&RankEntry> {
        self.entries.iter().filter(|e| !e.degenerate).take(n).collect()
    }

    pub fn entry(&self, feature: usize) -> Option<&RankEntry> {
        self.entries.iter().find(|e| e.feature == feature)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature_index,pearson_r,degenerate\n");
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.feature, e.r, e.degenerate).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, evaluation_set: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format { what: "ranking csv", msg };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| row.get(i).ok_or_else(|| bad(format!("short row {row:?}")));
            entries.push(RankEntry {
                feature: field(0)?.parse().map_err(|e| bad(format!("feature index: {e}")))?,
                r: field(1)?.parse().map_err(|e| bad(format!("pearson r: {e}")))?,
                degenerate: field(2)?.parse().map_err(|e| bad(format!("degenerate flag: {e}")))?,
            });
        }
        Ok(Self {
            entries,
            evaluation_set: evaluation_set.to_string(),
        })
    }
}

/// Correlates each latent feature with the scores.
pub fn rank_from_latents(latents: &[LatentVector], scores: &[f64], evaluation_set: &str) -> Result<FeatureRanking> {
    if latents.len() != scores.len() {
        return Err(Error::contract("latents and scores differ in length"));
    }
    if latents.len() < 2 {
        return Err(Error::contract("ranking needs at least 2 images"));
    }
    let d = latents[0].dim();
    let mut entries: Vec<RankEntry> = (0..d)
        .map(|i| {
            let column: Vec<f64> = latents.iter().map(|z| f64::from(z.values[i])).collect();
            match pearson(&column, scores) {
                Some(r) => RankEntry {
                    feature: i + 1,
                    r,
                    degenerate: false,
                },
                None => RankEntry {
                    feature: i + 1,
                    r: 0.0,
                    degenerate: true,
                },
            }
        })
        .collect();
    FeatureRanking::sort(&mut entries);
    Ok(FeatureRanking {
        entries,
        evaluation_set: evaluation_set.to_string(),
    })
}

/// Ranks features by the correlation of their encoded values with the
/// classifier score over `images`.
pub fn rank_features(
    model: &DiscoverModel,
    classifier: &TrainedClassifier,
    images: &[ProcessedImage],
    evaluation_set: &str,
) -> Result<FeatureRanking> {
    let refs: Vec<&ProcessedImage> = images.iter().collect();
    let latents = model.encode_batch(&refs)?;
    let scores: Vec<f64> = classifier.score_batch(&refs)?.into_iter().map(f64::from).collect();
    rank_from_latents(&latents, &scores, evaluation_set)
}
