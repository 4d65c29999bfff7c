use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ProcessedImage;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub horizontal_flip_prob: f64,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn flip(prob: f64) -> Self {
        Self {
            horizontal_flip_prob: prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::config(format!(
                "horizontal_flip_prob {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        Ok(())
    }
}

/// Seeded stream of augmentation decisions.
#[derive(Debug, Clone)]
pub struct Augmenter {
    policy: AugmentationPolicy,
    rng: ChaCha8Rng,
}

impl Augmenter {
    pub fn new(policy: AugmentationPolicy, seed: u64) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn should_flip(&mut self) -> bool {
        let p = self.policy.horizontal_flip_prob;
        // A draw is consumed regardless of p so the stream stays aligned.
        let u: f64 = self.rng.gen();
        u < p
    }

    pub fn apply(&mut self, img: &ProcessedImage) -> ProcessedImage {
        if self.should_flip() {
            img.flipped_horizontally()
        } else {
            img.clone()
        }
    }
}

/// One-shot augmentation: the flip decision is a pure function of `seed`.
pub fn augment(img: &ProcessedImage, policy: AugmentationPolicy, seed: u64) -> Result<ProcessedImage> {
    Ok(Augmenter::new(policy, seed)?.apply(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asymmetric() -> ProcessedImage {
        ProcessedImage::new(3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        for seed in 0..50 {
            assert_eq!(augment(&asymmetric(), AugmentationPolicy::none(), seed).unwrap(), asymmetric());
        }
    }

    #[test]
    fn certain_flip_is_involution() {
        let p = AugmentationPolicy::flip(1.0);
        let once = augment(&asymmetric(), p, 7).unwrap();
        assert_eq!(once.pixels()[..3], [0.2, 0.1, 0.0]);
        assert_eq!(augment(&once, p, 8).unwrap(), asymmetric());
    }

    #[test]
    fn half_probability_flip_fraction() {
        let mut aug = Augmenter::new(AugmentationPolicy::flip(0.5), 2024).unwrap();
        let flips = (0..10_000).filter(|_| aug.should_flip()).count();
        let frac = flips as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "flip fraction {frac}");
    }

    #[test]
    fn reproducible_from_seed() {
        let p = AugmentationPolicy::flip(0.5);
        let a: Vec<_> = (0..64).map(|s| augment(&asymmetric(), p, s).unwrap()).collect();
        let b: Vec<_> = (0..64).map(|s| augment(&asymmetric(), p, s).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_probability() {
        assert!(Augmenter::new(AugmentationPolicy::flip(1.5), 0).is_err());
    }
}
