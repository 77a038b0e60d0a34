//! Metropolis-within-Gibbs chains, MCMC-SAEM point estimation and simulated annealing
//! over the elementary displacements.

mod anneal;
mod engine;
mod field;

pub use anneal::{anneal_engine, sa_displacements, AnnealConfig, AnnealResult, MarginalEngine};
pub use engine::{initial_params, m_step_params, problem_loglik, Engine, Problem};
pub use field::SpatialField;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{build_lattice, DisplacementSet};
use crate::error::{Error, Result};
use crate::model::{GroupParams, Hyperparams, Network, Observations, SuffStats};
use crate::volume::{Parcellation, SubjectData};

/// The one generator type used everywhere.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kernel width for the spatial block; `None` freezes displacements at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub omega: f64,
    /// Starting σ_S².
    pub sigma_s2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub rw_sigma: f64,
    pub target_accept: f64,
    pub seed: u64,
    pub spatial: Option<SpatialConfig>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            burn_in: 100,
            samples: 1000,
            rw_sigma: 1.0,
            target_accept: 0.1,
            seed: 0,
            spatial: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::InvalidArgument("samples must be at least 1".into()));
        }
        check_rw(self.rw_sigma, self.target_accept)?;
        check_spatial(self.spatial)
    }
}

fn check_rw(rw: f64, target: f64) -> Result<()> {
    if !(rw > 0.0 && rw.is_finite()) {
        return Err(Error::InvalidArgument(format!("rw_sigma must be positive, got {rw}")));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target_accept must lie in (0,1), got {target}"
        )));
    }
    Ok(())
}

fn check_spatial(s: Option<SpatialConfig>) -> Result<()> {
    if let Some(s) = s {
        if !(s.omega > 0.0 && s.sigma_s2 > 0.0) {
            return Err(Error::InvalidArgument(
                "spatial omega and sigma_s2 must be positive".into(),
            ));
        }
    }
    Ok(())
}

/// Output of [`run_chain`].
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub mean_mu: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_theta: GroupParams,
    pub theta: Vec<GroupParams>,
    /// Per (subject, control point), recorded sweeps only.
    pub acceptance: Vec<f64>,
    /// Posterior mean of the weights (absent in no-SU mode).
    pub mean_w: Option<Vec<f64>>,
    /// Running average of the sufficient statistics over recorded sweeps.
    pub stats: SuffStats,
    pub rw_sigma: f64,
}

/// Build the engine for the data with initial θ from moments.
fn build_engine(
    obs: &Observations,
    parc: &Parcellation,
    gamma: &Network,
    h: &Hyperparams,
    rw_sigma: f64,
    spatial: Option<SpatialConfig>,
    init_w: Option<&DisplacementSet>,
) -> Result<Engine> {
    if parc.grid() != &obs.grid {
        return Err(Error::Shape("parcellation grid differs from the data grid".into()));
    }
    if gamma.len() != parc.region_count() {
        return Err(Error::Shape(format!(
            "network has {} entries for {} regions",
            gamma.len(),
            parc.region_count()
        )));
    }
    let p = Problem::full(obs, parc);
    let sigma_s2 = spatial.map_or(0.0, |s| s.sigma_s2);
    let theta = initial_params(&p, gamma, sigma_s2);
    let w = match (spatial, init_w) {
        (None, _) => None,
        (Some(_), Some(w)) => Some(w.clone()),
        (Some(s), None) => Some(DisplacementSet::zeros(build_lattice(&obs.grid, s.omega)?, obs.subjects)),
    };
    Engine::new(p, theta, gamma.clone(), h.clone(), w.as_ref(), rw_sigma)
}

/// One full sweep in the fixed block order; `adapt` carries the target acceptance
/// during burn-in.
pub fn gibbs_sweep(engine: &mut Engine, rng: &mut Rng, adapt: Option<f64>) -> Result<()> {
    engine.sweep(rng, adapt).map_err(|e| e.at_stage("gibbs"))
}

/// Burn-in with proposal tuning, then recorded sweeps.
pub fn run_chain(
    data: &[SubjectData],
    parc: &Parcellation,
    gamma: &Network,
    h: &Hyperparams,
    cfg: &ChainConfig,
) -> Result<ChainTrace> {
    cfg.validate()?;
    let obs = Observations::from_subjects(data)?;
    let mut eng = build_engine(&obs, parc, gamma, h, cfg.rw_sigma, cfg.spatial, None)?;
    let mut rng = rng_from_seed(cfg.seed);
    run_engine(&mut eng, &mut rng, cfg.burn_in, cfg.samples, cfg.target_accept)
}

/// Drive an existing engine: `burn_in` adaptive sweeps then `samples` recorded ones.
pub fn run_engine(
    eng: &mut Engine,
    rng: &mut Rng,
    burn_in: usize,
    samples: usize,
    target_accept: f64,
) -> Result<ChainTrace> {
    for _ in 0..burn_in {
        gibbs_sweep(eng, rng, Some(target_accept))?;
    }
    eng.reset_acceptance();
    let mut mean_mu = vec![0.0; eng.mu.len()];
    let mut mean_x = vec![0.0; eng.x.len()];
    let mut mean_w = eng.weights().map(|w| vec![0.0; w.len()]);
    let mut thetas = Vec::with_capacity(samples);
    let mut stats = SuffStats::zeros(eng.theta.regions());
    for g in 0..samples {
        gibbs_sweep(eng, rng, None)?;
        add_to(&mut mean_mu, &eng.mu);
        add_to(&mut mean_x, &eng.x);
        if let (Some(m), Some(w)) = (mean_w.as_mut(), eng.weights()) {
            add_to(m, w);
        }
        stats.blend(&eng.stats(), 1.0 / (g + 1) as f64);
        thetas.push(eng.theta.clone());
    }
    let inv = 1.0 / samples as f64;
    mean_mu.iter_mut().for_each(|v| *v *= inv);
    mean_x.iter_mut().for_each(|v| *v *= inv);
    if let Some(m) = mean_w.as_mut() {
        m.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(ChainTrace {
        mean_mu,
        mean_x,
        mean_theta: mean_params(&thetas),
        theta: thetas,
        acceptance: eng.acceptance_rates(),
        mean_w,
        stats,
        rw_sigma: eng.rw_sigma,
    })
}

fn add_to(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn mean_params(ts: &[GroupParams]) -> GroupParams {
    let mut m = ts[0].clone();
    let n = ts.len() as f64;
    for j in 0..m.regions() {
        m.eta[j] = ts.iter().map(|t| t.eta[j]).sum::<f64>() / n;
        m.nu2[j] = ts.iter().map(|t| t.nu2[j]).sum::<f64>() / n;
        m.sigma2[j] = ts.iter().map(|t| t.sigma2[j]).sum::<f64>() / n;
    }
    m.sigma_s2 = ts.iter().map(|t| t.sigma_s2).sum::<f64>() / n;
    m
}

// ----------------------------------------------------------------------------
// SAEM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaemConfig {
    /// Iterations with c_k = 1 (also the proposal-tuning phase).
    pub burn_in: usize,
    /// Total iterations.
    pub iterations: usize,
    pub rw_sigma: f64,
    pub target_accept: f64,
    pub seed: u64,
    pub spatial: Option<SpatialConfig>,
}

impl Default for SaemConfig {
    fn default() -> Self {
        Self {
            burn_in: 500,
            iterations: 1000,
            rw_sigma: 1.0,
            target_accept: 0.1,
            seed: 0,
            spatial: None,
        }
    }
}

impl SaemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.burn_in > self.iterations {
            return Err(Error::InvalidArgument(
                "SAEM needs 1 <= iterations and burn_in <= iterations".into(),
            ));
        }
        check_rw(self.rw_sigma, self.target_accept)?;
        check_spatial(self.spatial)
    }
}

#[derive(Debug, Clone)]
pub struct SaemFit {
    pub theta: GroupParams,
    pub theta_series: Vec<GroupParams>,
    pub stats: SuffStats,
    /// Last simulated weights (absent in no-SU mode).
    pub w: Option<DisplacementSet>,
    /// Proposal scale after tuning.
    pub rw_sigma: f64,
    /// Last simulated template.
    pub mu: Vec<f64>,
}

pub fn saem_fit(
    data: &[SubjectData],
    parc: &Parcellation,
    gamma: &Network,
    h: &Hyperparams,
    cfg: &SaemConfig,
) -> Result<SaemFit> {
    cfg.validate()?;
    let obs = Observations::from_subjects(data)?;
    let mut eng = build_engine(&obs, parc, gamma, h, cfg.rw_sigma, cfg.spatial, None)?;
    let mut rng = rng_from_seed(cfg.seed);
    saem_engine(&mut eng, &mut rng, cfg)
}

/// SAEM on a prepared engine; θ starts from the engine's current value.
pub fn saem_engine(eng: &mut Engine, rng: &mut Rng, cfg: &SaemConfig) -> Result<SaemFit> {
    let mut s = SuffStats::zeros(eng.theta.regions());
    let mut series = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        let tuning = k <= cfg.burn_in;
        eng.latent_sweep(rng, tuning.then_some(cfg.target_accept))
            .map_err(|e| e.at_stage("saem"))?;
        let c = if tuning { 1.0 } else { 1.0 / (k - cfg.burn_in) as f64 };
        s.blend(&eng.stats(), c);
        eng.m_step(&s).map_err(|e| e.at_stage("saem"))?;
        series.push(eng.theta.clone());
    }
    Ok(SaemFit {
        theta: eng.theta.clone(),
        theta_series: series,
        stats: s,
        w: eng.displacements(),
        rw_sigma: eng.rw_sigma,
        mu: eng.mu.clone(),
    })
}
