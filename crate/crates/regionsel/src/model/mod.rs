//! Hierarchical model: priors, densities, voxel-block likelihoods and sufficient statistics.

mod block;
pub mod density;
mod params;
mod state;

pub use block::{block_loglik, BlockAcc};
pub use params::{GroupParams, Hyperparams, Network};
pub use state::{
    data_loglik_given_w, displaced_targets, log_complete, log_param_prior, log_prior, loglik_from_targets,
    neg_log_complete_from_stats, stats_from_parts, sufficient_stats, LatentState, Observations, SuffStats,
};
