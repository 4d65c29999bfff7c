//! Post-training analysis: latent statistics, correlation ranking,
//! counterfactual traversal, SSIM alteration maps and montages.

mod montage;
mod ranking;
mod ssim;
mod traversal;

pub use montage::{cells_per_row, gradcam_rgb, make_montage, montage_grid, MontagePanel, MontageRow};
pub use ranking::{compute_latent_stats, pearson, rank_features, rank_from_latents, FeatureRanking, LatentStats, RankEntry};
pub use ssim::{heatmap_rgb, hot, ssim_alteration, ssim_alteration_labelled, ssim_map, AlterationMap, C1, C2, SIGMA, WINDOW};
pub use traversal::{Counterfactual, Interpreter, TraversalResult, DEFAULT_MAGNITUDE_STD, DEFAULT_MAX_DELTA_STD};
