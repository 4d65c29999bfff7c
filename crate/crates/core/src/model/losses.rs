//! The six training objectives. Each is a standalone function of tensors so
//! alternatives can be swapped in and each can be tested in isolation.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scalar, softplus};

/// Stabilizer added to squared norms before normalizing centred columns.
pub const CORRELATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub adversarial: f64,
    pub perceptual_reconstruction: f64,
    pub classifier_consistency: f64,
    pub decorrelation: f64,
    pub subset_association: f64,
    pub complement_independence: f64,
}

/// Adversarial and decorrelation at 0.1, the rest at 1. At 1 the critic
/// game and the decorrelation noise floor (about `d(d-1)/batch`) overwhelm
/// reconstruction and the decoder collapses to the mean image.
impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 0.1,
            decorrelation: 0.1,
            ..Self::uniform(1.0)
        }
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            adversarial: w,
            perceptual_reconstruction: w,
            classifier_consistency: w,
            decorrelation: w,
            subset_association: w,
            complement_independence: w,
        }
    }

    /// Reconstruction only: a plain perceptual autoencoder.
    pub fn reconstruction_only() -> Self {
        Self {
            perceptual_reconstruction: 1.0,
            ..Self::uniform(0.0)
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.adversarial,
            self.perceptual_reconstruction,
            self.classifier_consistency,
            self.decorrelation,
            self.subset_association,
            self.complement_independence,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

pub const TERM_NAMES: [&str; 6] = [
    "adversarial",
    "perceptual_reconstruction",
    "classifier_consistency",
    "decorrelation",
    "subset_association",
    "complement_independence",
];

/// Scalar values of the six terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adversarial: f64,
    pub perceptual_reconstruction: f64,
    pub classifier_consistency: f64,
    pub decorrelation: f64,
    pub subset_association: f64,
    pub complement_independence: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.adversarial,
            self.perceptual_reconstruction,
            self.classifier_consistency,
            self.decorrelation,
            self.subset_association,
            self.complement_independence,
        ]
    }

    /// Builds a report whose total is `sum(w_i * term_i)` evaluated left to right.
    pub fn from_terms(terms: [f64; 6], weights: &LossWeights) -> Self {
        let total = weighted_sum(&terms, weights);
        let [adversarial, perceptual_reconstruction, classifier_consistency, decorrelation, subset_association, complement_independence] =
            terms;
        Self {
            adversarial,
            perceptual_reconstruction,
            classifier_consistency,
            decorrelation,
            subset_association,
            complement_independence,
            total,
        }
    }

    /// Element-wise mean of several reports, total recomputed from the means.
    pub fn mean(reports: &[LossReport], weights: &LossWeights) -> Self {
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, t) in acc.iter_mut().zip(r.terms()) {
                *a += t;
            }
        }
        let n = reports.len().max(1) as f64;
        Self::from_terms(acc.map(|a| a / n), weights)
    }
}

pub fn weighted_sum(terms: &[f64; 6], weights: &LossWeights) -> f64 {
    terms
        .iter()
        .zip(weights.as_array())
        .fold(0.0, |acc, (t, w)| acc + w * t)
}

/// The six terms as differentiable scalars.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub terms: [Tensor; 6],
}

impl LossTerms {
    pub fn values(&self) -> Result<[f64; 6]> {
        let mut out = [0.0; 6];
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = scalar(t)?;
        }
        Ok(out)
    }

    /// Fails with the name of the first non-finite term.
    pub fn check_finite(&self) -> Result<[f64; 6]> {
        let values = self.values()?;
        for (name, v) in TERM_NAMES.iter().zip(values) {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    term: name.to_string(),
                    value: v,
                });
            }
        }
        Ok(values)
    }

    pub fn weighted_total(&self, weights: &LossWeights) -> Result<Tensor> {
        let mut total = (&self.terms[0] * weights.adversarial)?;
        for (t, w) in self.terms.iter().zip(weights.as_array()).skip(1) {
            total = (total + (t * w)?)?;
        }
        Ok(total)
    }
}

/// Encoder side of the adversarial game: non-saturating
/// `mean(-log sigmoid(critic(z)))`, small when the critic takes codes for
/// prior samples.
pub fn adversarial(critic_logits_on_codes: &Tensor) -> Result<Tensor> {
    Ok(softplus(&critic_logits_on_codes.neg()?)?.mean_all()?)
}

/// Critic objective: prior samples labelled 1, encoded latents labelled 0.
pub fn critic_objective(logits_on_prior: &Tensor, logits_on_codes: &Tensor) -> Result<Tensor> {
    let real = softplus(&logits_on_prior.neg()?)?.mean_all()?;
    let fake = softplus(logits_on_codes)?.mean_all()?;
    Ok((real + fake)?)
}

/// Mean squared distance between paired feature maps, summed over layers.
pub fn perceptual(features: &[Tensor], reconstructed: &[Tensor]) -> Result<Tensor> {
    if features.len() != reconstructed.len() || features.is_empty() {
        return Err(Error::contract("perceptual feature stacks differ in depth"));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in features.iter().zip(reconstructed) {
        let d = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `mean |score(x) - score(x_hat)|`.
pub fn consistency(scores: &Tensor, reconstructed_scores: &Tensor) -> Result<Tensor> {
    Ok((scores - reconstructed_scores)?.abs()?.mean_all()?)
}

/// Centres each column of `(n, k)` and scales it to unit Euclidean norm.
pub fn unit_columns(x: &Tensor) -> Result<Tensor> {
    let centred = x.broadcast_sub(&x.mean_keepdim(0)?)?;
    let norm = (centred.sqr()?.sum_keepdim(0)? + CORRELATION_EPS)?.sqrt()?;
    Ok(centred.broadcast_div(&norm)?)
}

/// Batch correlation matrix of the columns of `(n, d)`.
pub fn correlation_matrix(z: &Tensor) -> Result<Tensor> {
    let u = unit_columns(z)?;
    Ok(u.t()?.matmul(&u)?)
}

/// Squared Frobenius norm of the off-diagonal of the batch latent correlation.
pub fn decorrelation(z: &Tensor) -> Result<Tensor> {
    let u = unit_columns(z)?;
    let corr = u.t()?.matmul(&u)?;
    let diag = u.sqr()?.sum(0)?;
    Ok((corr.sqr()?.sum_all()? - diag.sqr()?.sum_all()?)?)
}

/// Mean squared error of the subset probe's score regression.
pub fn association(probe_prediction: &Tensor, scores: &Tensor) -> Result<Tensor> {
    Ok((probe_prediction - scores)?.sqr()?.mean_all()?)
}

/// Subtracts row and column means of a square Gram matrix (`HKH`).
fn double_centre(k: &Tensor) -> Result<Tensor> {
    let row = k.mean_keepdim(1)?;
    let col = k.mean_keepdim(0)?;
    let all = k.mean_all()?;
    Ok(k.broadcast_sub(&row)?.broadcast_sub(&col)?.broadcast_add(&all)?)
}

/// Centred kernel alignment between a Gaussian kernel on the rows of
/// `features` `(n, m)` and a linear kernel on `scores` `(n,)`. In `[0, 1]`,
/// and 0 when either side is constant over the batch. The bandwidth is the
/// mean pairwise squared distance, so the kernel is scale-free and smooth in
/// the features. Unlike a correlation, it also sees nonlinear dependence.
pub fn kernel_dependence(features: &Tensor, scores: &Tensor) -> Result<Tensor> {
    let n = features.dim(0)?;
    if n < 2 {
        return Err(Error::contract("kernel dependence needs at least two rows"));
    }
    let sq = features.sqr()?.sum_keepdim(1)?;
    let dist = sq
        .broadcast_add(&sq.t()?)?
        .sub(&(features.matmul(&features.t()?)? * 2.0)?)?
        .relu()?;
    let bandwidth = ((dist.sum_all()? / (n * (n - 1)) as f64)? + CORRELATION_EPS)?;
    let kz = double_centre(&dist.broadcast_div(&bandwidth)?.neg()?.exp()?)?;
    let s = scores.reshape((n, 1))?;
    let s = s.broadcast_sub(&s.mean_keepdim(0)?)?;
    let ks = s.matmul(&s.t()?)?;
    let cross = (&kz * &ks)?.sum_all()?;
    let norms = (kz.sqr()?.sum_all()? * ks.sqr()?.sum_all()?)?;
    Ok(cross.broadcast_div(&(norms + CORRELATION_EPS)?.sqrt()?)?)
}

/// Mean absolute off-diagonal correlation, a monitoring metric.
pub fn mean_abs_offdiag(z: &Tensor) -> Result<f64> {
    let d = z.dim(D::Minus1)?;
    if d < 2 {
        return Ok(0.0);
    }
    let c = correlation_matrix(&z.detach())?;
    let total = scalar(&c.abs()?.sum_all()?)?;
    let diag = scalar(&unit_columns(&z.detach())?.sqr()?.sum_all()?)?;
    Ok((total - diag) / (d * (d - 1)) as f64)
}
