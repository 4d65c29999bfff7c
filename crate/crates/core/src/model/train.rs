use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{self, LossReport, LossTerms};
use super::{DiscoverConfig, DiscoverModel, DiscoverSidecar, Networks, FORMAT_VERSION};
use crate::classifier::TrainedClassifier;
use crate::dataset::LabeledImages;
use crate::error::{Error, Result};
use crate::image::ProcessedImage;
use crate::nn::{images_to_tensor, scalar, ParamStore};

/// Everything one forward pass produces.
pub struct Forward {
    pub terms: LossTerms,
    /// Latent codes, still attached to the encoder graph.
    pub z: Tensor,
    /// Classifier scores of the inputs (constants).
    pub scores: Tensor,
}

/// Evaluates the six loss terms for a batch `x` of shape `(b, 1, s, s)`.
pub fn forward_terms(nets: &Networks, clf: &TrainedClassifier, x: &Tensor) -> Result<Forward> {
    let dtype = x.dtype();
    let clf_dtype = clf.params().dtype();
    let z = nets.encoder.forward(x)?;
    let x_hat = nets.decoder.forward(&z)?;

    let scores = clf.score_tensor(x)?.to_dtype(dtype)?.detach();
    let scores_hat = clf.score_tensor(&x_hat)?.to_dtype(dtype)?;
    let feats: Vec<Tensor> = clf
        .net()
        .perceptual_features(&x.to_dtype(clf_dtype)?)?
        .into_iter()
        .map(|t| Ok(t.to_dtype(dtype)?.detach()))
        .collect::<Result<_>>()?;
    let feats_hat: Vec<Tensor> = clf
        .net()
        .perceptual_features(&x_hat.to_dtype(clf_dtype)?)?
        .into_iter()
        .map(|t| Ok(t.to_dtype(dtype)?))
        .collect::<Result<_>>()?;

    let (d, k) = (z.dim(1)?, nets.subset_probe.len());
    let independence = if d > k {
        losses::kernel_dependence(&z.narrow(1, k, d - k)?, &scores)?
    } else {
        Tensor::zeros((), dtype, x.device())?
    };
    let terms = LossTerms {
        terms: [
            losses::adversarial(&nets.critic.forward(&z)?)?,
            losses::perceptual(&feats, &feats_hat)?,
            losses::consistency(&scores, &scores_hat)?,
            losses::decorrelation(&z)?,
            losses::association(&nets.subset_probe.forward(&z)?, &scores)?,
            independence,
        ],
    };
    Ok(Forward { terms, z, scores })
}

/// Step-by-step optimizer state. The encoder, decoder and subset probe
/// minimize the weighted total; the critic is updated afterwards against the
/// detached codes.
pub struct Trainer<'a> {
    config: DiscoverConfig,
    side: usize,
    params: ParamStore,
    nets: Networks,
    clf: &'a TrainedClassifier,
    main_opt: AdamW,
    critic_opt: AdamW,
    prior_rng: ChaCha8Rng,
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

impl<'a> Trainer<'a> {
    pub fn new(config: &DiscoverConfig, side: usize, clf: &'a TrainedClassifier, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if clf.side() != side {
            return Err(Error::contract(format!(
                "classifier expects {0}x{0} images, training data is {1}x{1}",
                clf.side(),
                side
            )));
        }
        let mut params = ParamStore::new(seed, dtype);
        let nets = Networks::build(&mut params, side, config)?;
        let mut main = params.vars_with_prefix("encoder.");
        main.extend(params.vars_with_prefix("decoder."));
        main.extend(params.vars_with_prefix("probe_subset."));
        Ok(Self {
            main_opt: adam(main, config.learning_rate)?,
            critic_opt: adam(params.vars_with_prefix("critic."), config.critic_learning_rate)?,
            prior_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
            config: config.clone(),
            side,
            params,
            nets,
            clf,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// One optimization step on `x`. Nothing is updated when a term is not
    /// finite.
    pub fn step(&mut self, x: &Tensor) -> Result<LossReport> {
        let b = x.dim(0)?;
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        let x = x.to_dtype(self.dtype())?;
        let fwd = forward_terms(&self.nets, self.clf, &x)?;
        let values = fwd.terms.check_finite()?;
        let weights = &self.config.loss_weights;
        let total = fwd.terms.weighted_total(weights)?;
        self.main_opt.backward_step(&total)?;

        let z = fwd.z.detach();
        let d = self.config.latent_dim;
        let prior: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(&mut self.prior_rng)).collect();
        let prior = Tensor::from_vec(prior, (b, d), x.device())?.to_dtype(self.dtype())?;
        let critic_loss = losses::critic_objective(&self.nets.critic.forward(&prior)?, &self.nets.critic.forward(&z)?)?;
        self.critic_opt.backward_step(&critic_loss)?;

        Ok(LossReport::from_terms(values, weights))
    }

    /// Loss terms of `x` at the current weights, without updating anything.
    pub fn evaluate(&self, x: &Tensor) -> Result<LossReport> {
        let fwd = forward_terms(&self.nets, self.clf, &x.to_dtype(self.dtype())?)?;
        Ok(LossReport::from_terms(fwd.terms.values()?, &self.config.loss_weights))
    }

    /// Frozen snapshot of the current weights.
    pub fn model(&self) -> Result<DiscoverModel> {
        DiscoverModel::from_params(self.config.clone(), self.side, &self.params, self.clf.recorded_hash())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 for the untrained model.
    pub epoch: usize,
    /// Mean over the epoch's steps; absent for epoch 0.
    pub losses: Option<LossReport>,
    pub mean_abs_offdiag_corr: f64,
    pub reconstruction_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }

    /// One row per epoch, starting with epoch 0 (empty loss columns).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for name in losses::TERM_NAMES {
            write!(out, ",{name}").unwrap();
        }
        out.push_str(",total,mean_abs_offdiag_corr,reconstruction_mae\n");
        for rec in std::iter::once(&self.initial).chain(&self.epochs) {
            write!(out, "{}", rec.epoch).unwrap();
            match &rec.losses {
                Some(l) => {
                    for v in l.terms().iter().chain([&l.total]) {
                        write!(out, ",{v}").unwrap();
                    }
                }
                None => out.push_str(&",".repeat(7)),
            }
            writeln!(out, ",{},{}", rec.mean_abs_offdiag_corr, rec.reconstruction_mae).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Intermediate checkpoints go to `<dir>/epoch-NNNN` when
    /// `checkpoint_every` is set.
    pub checkpoint_dir: Option<PathBuf>,
    pub dtype: DType,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            checkpoint_dir: None,
            dtype: DType::F32,
        }
    }
}

/// Evenly spaced indices, at most `n` of them.
fn metric_indices(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|i| i * len / n).collect()
}

fn epoch_metrics(model: &DiscoverModel, images: &[&ProcessedImage], epoch: usize, losses: Option<LossReport>) -> Result<EpochRecord> {
    let (mut codes, mut err, mut count) = (Vec::new(), 0.0, 0usize);
    for chunk in images.chunks(64) {
        let x = images_to_tensor(chunk, model.dtype())?;
        let z = model.encode_tensor(&x)?;
        let x_hat = model.decode_tensor(&z)?;
        err += scalar(&(x - x_hat)?.abs()?.sum_all()?)?;
        count += chunk.len() * model.side() * model.side();
        codes.push(z);
    }
    let corr = if images.len() >= 2 {
        losses::mean_abs_offdiag(&Tensor::cat(&codes, 0)?)?
    } else {
        0.0
    };
    Ok(EpochRecord {
        epoch,
        losses,
        mean_abs_offdiag_corr: corr,
        reconstruction_mae: err / count.max(1) as f64,
    })
}

/// Sidecar describing `model` after `epochs_completed` epochs.
pub fn sidecar_for(model: &DiscoverModel, seed: u64, epochs_completed: usize, final_metrics: Option<EpochRecord>) -> Result<DiscoverSidecar> {
    Ok(DiscoverSidecar {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        config_hash: model.config().hash(),
        side: model.side(),
        classifier_hash: model.classifier_hash().to_string(),
        weights_hash: model.weights_hash()?,
        seed,
        epochs_completed,
        final_metrics,
        latent_stats: None,
    })
}

/// Trains an interpreter for `clf` on `data` (labels are not used).
pub fn train(
    data: &LabeledImages,
    clf: &TrainedClassifier,
    config: &DiscoverConfig,
    seed: u64,
    options: &TrainOptions,
) -> Result<(DiscoverModel, TrainingLog)> {
    config.validate()?;
    let side = data.side().ok_or_else(|| Error::contract("empty training set"))?;
    let mut trainer = Trainer::new(config, side, clf, seed, options.dtype)?;
    let metric_imgs: Vec<&ProcessedImage> = metric_indices(data.len(), config.metric_sample)
        .into_iter()
        .map(|i| &data.images[i])
        .collect();
    let mut log = TrainingLog {
        initial: epoch_metrics(&trainer.model()?, &metric_imgs, 0, None)?,
        epochs: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let imgs: Vec<&ProcessedImage> = batch.iter().map(|&i| &data.images[i]).collect();
            let x = images_to_tensor(&imgs, options.dtype)?;
            let report = trainer.step(&x).map_err(|e| match e {
                Error::Divergence { term, value } => Error::Divergence {
                    term: format!("{term} (epoch {epoch})"),
                    value,
                },
                other => other,
            })?;
            reports.push(report);
        }
        let model = trainer.model()?;
        let mean = LossReport::mean(&reports, &config.loss_weights);
        let record = epoch_metrics(&model, &metric_imgs, epoch, Some(mean))?;
        log::info!(
            "discover epoch {epoch}: total {:.4} recon mae {:.4} mean |offdiag corr| {:.4}",
            mean.total,
            record.reconstruction_mae,
            record.mean_abs_offdiag_corr
        );
        if let (Some(dir), Some(every)) = (&options.checkpoint_dir, config.checkpoint_every) {
            if epoch % every == 0 {
                let sidecar = sidecar_for(&model, seed, epoch, Some(record.clone()))?;
                model.save(&dir.join(format!("epoch-{epoch:04}")), &sidecar)?;
            }
        }
        log.epochs.push(record);
    }
    Ok((trainer.model()?, log))
}
