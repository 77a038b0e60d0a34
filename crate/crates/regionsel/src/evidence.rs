//! Marginal likelihoods by Chib's identity, per-region Bayes factors under the
//! posterior-mode approximation, penalty calibration and parcellation comparison.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::{build_lattice, DisplacementSet};
use crate::error::{Error, Result};
use crate::model::density::{ln_normal_iso, log_sum_exp, LN_2PI};
use crate::model::{log_param_prior, GroupParams, Hyperparams, Network, Observations};
use crate::samplers::{
    anneal_engine, gibbs_sweep, initial_params, problem_loglik, rng_from_seed, saem_engine, AnnealConfig, Engine,
    MarginalEngine, Problem, SaemConfig, SpatialConfig,
};
use crate::volume::{Parcellation, SubjectData};

/// How displacements are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Displacements frozen at zero.
    #[serde(rename = "no-SU")]
    NoSu,
    /// Condition on the most probable displacements.
    #[serde(rename = "posterior-mode-SU")]
    PosteriorModeSu,
    /// Integrate displacements by reduced Chib runs (small problems only).
    #[serde(rename = "exact-SU")]
    ExactSu,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NoSu => "no-SU",
            Mode::PosteriorModeSu => "posterior-mode-SU",
            Mode::ExactSu => "exact-SU",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "no-su" | "nosu" => Ok(Mode::NoSu),
            "posterior-mode-su" | "su" => Ok(Mode::PosteriorModeSu),
            "exact-su" => Ok(Mode::ExactSu),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Iteration counts and tuning shared by every evidence computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidenceConfig {
    pub saem_burn_in: usize,
    pub saem_iterations: usize,
    pub gibbs_burn_in: usize,
    /// Draws averaged in the parameter ordinate.
    pub gibbs_samples: usize,
    /// Kernel width of the estimation lattice.
    pub omega: f64,
    pub sigma_s2_init: f64,
    pub rw_sigma: f64,
    pub target_accept: f64,
    pub anneal_tau: f64,
    pub anneal_steps: usize,
    /// Weight c on the log likelihood ratio in the penalized Bayes factor.
    pub penalty: f64,
    /// Draws of the single-block reduced run; other runs get this over their block count.
    pub exact_iterations: usize,
    /// Largest n·B accepted by the exact computation.
    pub exact_cap: usize,
    pub seed: u64,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            saem_burn_in: 500,
            saem_iterations: 1000,
            gibbs_burn_in: 100,
            gibbs_samples: 1000,
            omega: 4.0,
            sigma_s2_init: 1.0,
            rw_sigma: 1.0,
            target_accept: 0.1,
            anneal_tau: 0.99,
            anneal_steps: 100,
            penalty: 1.0,
            exact_iterations: 3000,
            exact_cap: 256,
            seed: 0,
        }
    }
}

impl EvidenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gibbs_samples < 1 || self.saem_iterations < 1 || self.saem_burn_in > self.saem_iterations {
            return Err(Error::InvalidArgument("iteration counts are inconsistent".into()));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "penalty must be >= 0, got {}",
                self.penalty
            )));
        }
        if !(self.omega > 0.0 && self.sigma_s2_init > 0.0 && self.rw_sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "omega, sigma_s2_init and rw_sigma must be positive".into(),
            ));
        }
        if !(self.anneal_tau > 0.0 && self.anneal_tau < 1.0) {
            return Err(Error::InvalidArgument("anneal_tau must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn saem(&self, seed: u64, spatial: Option<SpatialConfig>) -> SaemConfig {
        SaemConfig {
            burn_in: self.saem_burn_in,
            iterations: self.saem_iterations,
            rw_sigma: self.rw_sigma,
            target_accept: self.target_accept,
            seed,
            spatial,
        }
    }

    fn spatial(&self) -> SpatialConfig {
        SpatialConfig {
            omega: self.omega,
            sigma_s2: self.sigma_s2_init,
        }
    }
}

// ----------------------------------------------------------------------------
// seeds

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed depending only on the base seed, a tag and a region's voxel set, so that equal
/// regions get equal streams whatever their label.
fn region_seed(base: u64, tag: u64, voxels: &[usize]) -> u64 {
    voxels
        .iter()
        .fold(splitmix(base ^ splitmix(tag)), |h, &v| splitmix(h ^ v as u64))
}

// ----------------------------------------------------------------------------
// Chib, one region

/// Pieces of log m(y^j | w, γ_j) = loglik + log_prior − log_ordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChibEstimate {
    pub log_marginal: f64,
    /// log f(y^j | w, θ̂).
    pub loglik: f64,
    /// log π(θ̂ | γ), network term excluded.
    pub log_prior: f64,
    /// log π̂(θ̂ | y^j, w, γ).
    pub log_ordinate: f64,
    pub theta: GroupParams,
}

/// Chib estimate for a one-region problem (observations already displaced).
pub fn chib_marginal_region(
    p: &Problem,
    active: bool,
    h: &Hyperparams,
    cfg: &EvidenceConfig,
    seed: u64,
) -> Result<ChibEstimate> {
    if p.regions() != 1 {
        return Err(Error::Shape("a region problem has exactly one region".into()));
    }
    if p.observations() == 0 {
        return Err(Error::InvalidArgument("region block is empty".into()));
    }
    let gamma = Network::all(1, active);
    let theta0 = initial_params(p, &gamma, 0.0);
    let mut eng = Engine::new(p.clone(), theta0, gamma.clone(), h.clone(), None, cfg.rw_sigma)?;
    let mut rng = rng_from_seed(seed);
    let fit = saem_engine(&mut eng, &mut rng, &cfg.saem(seed, None))?;
    let star = fit.theta;
    eng.theta = star.clone();
    for _ in 0..cfg.gibbs_burn_in {
        gibbs_sweep(&mut eng, &mut rng, None)?;
    }
    let mut ords = Vec::with_capacity(cfg.gibbs_samples);
    for _ in 0..cfg.gibbs_samples {
        gibbs_sweep(&mut eng, &mut rng, None)?;
        ords.push(eng.log_theta_ordinate(&star));
    }
    let log_ordinate = log_sum_exp(&ords) - (ords.len() as f64).ln();
    if !log_ordinate.is_finite() {
        return Err(Error::EvidenceUnderflow(format!(
            "parameter ordinate is {log_ordinate} after {} draws",
            ords.len()
        )));
    }
    let loglik = problem_loglik(p, &star);
    let log_prior = log_param_prior(&star, &gamma, h)?;
    Ok(ChibEstimate {
        log_marginal: loglik + log_prior - log_ordinate,
        loglik,
        log_prior,
        log_ordinate,
        theta: star,
    })
}

// ----------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionEvidence {
    pub region: usize,
    pub log_m0: f64,
    pub log_m1: f64,
    /// Log likelihood ratio at the two fitted modes.
    pub lr: f64,
    /// Prior and ordinate correction, b − lr.
    pub d: f64,
    /// Log Bayes factor log m1 − log m0.
    pub b: f64,
    /// Penalized log Bayes factor c·lr + d.
    pub b_penalized: f64,
    /// Lower bound on the involvement probability.
    pub p_tilde: f64,
    /// Fitted regional mean under γ_j = 1.
    pub eta_hat: f64,
}

impl RegionEvidence {
    pub fn new(region: usize, m0: &ChibEstimate, m1: &ChibEstimate, c: f64, prior_p: f64) -> Self {
        let b = m1.log_marginal - m0.log_marginal;
        let lr = m1.loglik - m0.loglik;
        let d = b - lr;
        let b_penalized = penalized(lr, d, c);
        Self {
            region,
            log_m0: m0.log_marginal,
            log_m1: m1.log_marginal,
            lr,
            d,
            b,
            b_penalized,
            p_tilde: involvement_probability(b_penalized, prior_p),
            eta_hat: m1.theta.eta[0],
        }
    }

    /// Recompute the penalized quantities for another c.
    pub fn with_penalty(&self, c: f64, prior_p: f64) -> Self {
        let mut r = self.clone();
        r.b_penalized = penalized(self.lr, self.d, c);
        r.p_tilde = involvement_probability(r.b_penalized, prior_p);
        r
    }
}

pub fn penalized(lr: f64, d: f64, c: f64) -> f64 {
    c * lr + d
}

/// (1 + e^{−B}(1 − p)/p)⁻¹, evaluated without overflow.
pub fn involvement_probability(b: f64, prior_p: f64) -> f64 {
    let t = b + (prior_p / (1.0 - prior_p)).ln();
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub mode: Mode,
    pub penalty: f64,
    pub regions: Vec<RegionEvidence>,
    pub selected: Network,
    /// Parameters of the single-region fit used to find the displacements (SU only).
    pub theta_template: Option<GroupParams>,
    /// Displacements conditioned on (SU only).
    #[serde(skip)]
    pub w_hat: Option<DisplacementSet>,
}

impl SelectionReport {
    pub fn with_penalty(&self, c: f64, h: &Hyperparams) -> Self {
        let regions: Vec<RegionEvidence> = self.regions.iter().map(|r| r.with_penalty(c, h.p(r.region))).collect();
        let selected = Network::new(regions.iter().map(|r| r.p_tilde > 0.5).collect());
        Self {
            mode: self.mode,
            penalty: c,
            regions,
            selected,
            theta_template: self.theta_template.clone(),
            w_hat: self.w_hat.clone(),
        }
    }
}

/// Displacements from the single-region model: SAEM then annealing from SAEM's last draw.
pub struct TemplateFit {
    pub theta: GroupParams,
    pub w: DisplacementSet,
    pub rw_sigma: f64,
    pub objective: f64,
}

pub fn fit_displacements(obs: &Observations, h: &Hyperparams, cfg: &EvidenceConfig) -> Result<TemplateFit> {
    let single = Parcellation::single(obs.grid.clone());
    let gamma = Network::all(1, true);
    let p = Problem::full(obs, &single);
    let theta0 = initial_params(&p, &gamma, cfg.sigma_s2_init);
    let w0 = DisplacementSet::zeros(build_lattice(&obs.grid, cfg.omega)?, obs.subjects);
    let mut eng = Engine::new(p.clone(), theta0, gamma, h.clone(), Some(&w0), cfg.rw_sigma)?;
    let seed = splitmix(cfg.seed ^ 0x5a5a);
    let mut rng = rng_from_seed(seed);
    let fit = saem_engine(&mut eng, &mut rng, &cfg.saem(seed, Some(cfg.spatial())))?;
    let w_init = fit.w.expect("spatial fit returns displacements");
    let mut me = MarginalEngine::new(p, fit.theta.clone(), &w_init)?;
    let acfg = AnnealConfig {
        tau: cfg.anneal_tau,
        steps: cfg.anneal_steps,
        rw_sigma: fit.rw_sigma,
        seed: splitmix(seed),
    };
    let mut rng = rng_from_seed(acfg.seed);
    let sa = anneal_engine(&mut me, &mut rng, &acfg)?;
    Ok(TemplateFit {
        theta: fit.theta,
        w: sa.w,
        rw_sigma: fit.rw_sigma,
        objective: sa.objective,
    })
}

/// Per-region Chib estimates under both hypotheses, for fixed displaced indices.
fn region_pairs(
    obs: &Observations,
    targets: &[u32],
    parc: &Parcellation,
    h: &Hyperparams,
    cfg: &EvidenceConfig,
) -> Result<Vec<(ChibEstimate, ChibEstimate)>> {
    (0..parc.region_count())
        .map(|j| {
            let p = Problem::region(obs, targets, parc, j);
            if p.observations() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "no observation is displaced into region {j}"
                )));
            }
            let vox = parc.region_voxels(j);
            let m0 = chib_marginal_region(&p, false, h, cfg, region_seed(cfg.seed, 0, &vox))
                .map_err(|e| e.at_stage(&format!("region {j}, inactive")))?;
            let m1 = chib_marginal_region(&p, true, h, cfg, region_seed(cfg.seed, 1, &vox))
                .map_err(|e| e.at_stage(&format!("region {j}, active")))?;
            Ok((m0, m1))
        })
        .collect()
}

/// Region selection with displacements frozen (no-SU) or fixed at their posterior mode.
pub fn posterior_mode_pipeline(
    data: &[SubjectData],
    parc: &Parcellation,
    h: &Hyperparams,
    cfg: &EvidenceConfig,
    mode: Mode,
) -> Result<SelectionReport> {
    cfg.validate()?;
    h.validate()?;
    let obs = Observations::from_subjects(data)?;
    if parc.grid() != &obs.grid {
        return Err(Error::Shape("parcellation grid differs from the data grid".into()));
    }
    let (targets, template) = match mode {
        Mode::NoSu => (Problem::full(&obs, parc).target, None),
        Mode::PosteriorModeSu => {
            let fit = fit_displacements(&obs, h, cfg).map_err(|e| e.at_stage("displacement mode"))?;
            let t = crate::model::displaced_targets(&obs.grid, obs.subjects, Some(&fit.w));
            (t, Some(fit))
        }
        Mode::ExactSu => {
            return Err(Error::InvalidArgument(
                "the posterior-mode pipeline runs in no-SU or posterior-mode-SU mode".into(),
            ))
        }
    };
    let pairs = region_pairs(&obs, &targets, parc, h, cfg)?;
    let regions: Vec<RegionEvidence> = pairs
        .iter()
        .enumerate()
        .map(|(j, (m0, m1))| RegionEvidence::new(j, m0, m1, cfg.penalty, h.p(j)))
        .collect();
    let selected = Network::new(regions.iter().map(|r| r.p_tilde > 0.5).collect());
    Ok(SelectionReport {
        mode,
        penalty: cfg.penalty,
        regions,
        selected,
        theta_template: template.as_ref().map(|t| t.theta.clone()),
        w_hat: template.map(|t| t.w),
    })
}

// ----------------------------------------------------------------------------
// penalty calibration

/// Stored (lr, d) per region of one simulated dataset, with the true involvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationItem {
    pub lr: Vec<f64>,
    pub d: Vec<f64>,
    pub truth: Vec<bool>,
}

impl CalibrationItem {
    pub fn from_report(r: &SelectionReport, truth: Vec<bool>) -> Self {
        Self {
            lr: r.regions.iter().map(|e| e.lr).collect(),
            d: r.regions.iter().map(|e| e.d).collect(),
            truth,
        }
    }

    /// Regions whose sign of c·lr + d disagrees with the truth.
    pub fn errors(&self, c: f64) -> usize {
        (0..self.lr.len())
            .filter(|&j| (penalized(self.lr[j], self.d[j], c) > 0.0) != self.truth[j])
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub c_star: f64,
    pub errors_at_c_star: usize,
    /// (c, total misclassified) over the grid 0, 0.01, …, 1.
    pub risk: Vec<(f64, usize)>,
    pub regions: usize,
}

pub fn penalty_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

/// Smallest c on the grid minimizing the total misclassification count.
pub fn calibrate_penalty(items: &[CalibrationItem]) -> Result<Calibration> {
    for it in items {
        if it.lr.len() != it.d.len() || it.lr.len() != it.truth.len() {
            return Err(Error::Shape("calibration item vectors differ in length".into()));
        }
    }
    let risk: Vec<(f64, usize)> = penalty_grid()
        .into_iter()
        .map(|c| (c, items.iter().map(|it| it.errors(c)).sum()))
        .collect();
    let mut best = risk[0];
    for &r in &risk[1..] {
        if r.1 < best.1 {
            best = r;
        }
    }
    Ok(Calibration {
        c_star: best.0,
        errors_at_c_star: best.1,
        risk,
        regions: items.iter().map(|it| it.lr.len()).sum(),
    })
}

// ----------------------------------------------------------------------------
// parcellation comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParcellationComparison {
    /// log m(y | parcellation) for each input.
    pub log_evidence: Vec<f64>,
    /// Posterior probabilities under a uniform prior over the inputs.
    pub posterior: Vec<f64>,
    /// log_odds[a][b] = log m_a − log m_b.
    pub log_odds: Vec<Vec<f64>>,
}

/// Σ_j log[p_j m(y^j | γ_j=1) + (1 − p_j) m(y^j | γ_j=0)] per parcellation, with
/// displacements frozen (`w = None`) or fixed.
pub fn compare_parcellations(
    data: &[SubjectData],
    parcs: &[Parcellation],
    h: &Hyperparams,
    cfg: &EvidenceConfig,
    w: Option<&DisplacementSet>,
) -> Result<ParcellationComparison> {
    if parcs.len() < 2 {
        return Err(Error::InvalidArgument("at least two parcellations are needed".into()));
    }
    cfg.validate()?;
    let obs = Observations::from_subjects(data)?;
    let targets = crate::model::displaced_targets(&obs.grid, obs.subjects, w);
    let mut log_evidence = Vec::with_capacity(parcs.len());
    for parc in parcs {
        if parc.grid() != &obs.grid {
            return Err(Error::Shape("parcellation grid differs from the data grid".into()));
        }
        if !h.p_regions.is_empty() {
            return Err(Error::InvalidArgument(
                "per-region inclusion probabilities are not defined across parcellations".into(),
            ));
        }
        let pairs = region_pairs(&obs, &targets, parc, h, cfg)?;
        let mut terms: Vec<(usize, f64)> = pairs
            .iter()
            .enumerate()
            .map(|(j, (m0, m1))| {
                let first = parc.region_voxels(j)[0];
                let t =
                    crate::model::density::log_add_exp(h.p.ln() + m1.log_marginal, (1.0 - h.p).ln() + m0.log_marginal);
                (first, t)
            })
            .collect();
        terms.sort_by_key(|t| t.0);
        log_evidence.push(terms.iter().map(|t| t.1).sum());
    }
    let norm = log_sum_exp(&log_evidence);
    let posterior = log_evidence.iter().map(|l| (l - norm).exp()).collect();
    let log_odds = log_evidence
        .iter()
        .map(|a| log_evidence.iter().map(|b| a - b).collect())
        .collect();
    Ok(ParcellationComparison {
        log_evidence,
        posterior,
        log_odds,
    })
}

// ----------------------------------------------------------------------------
// exact integration over displacements

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactEstimate {
    pub log_marginal: f64,
    /// log f(y | w*, θ*).
    pub loglik: f64,
    /// log π(w* | θ*).
    pub log_prior_w: f64,
    /// Σ log π̂(w*_ib | w*_<ib, θ*, y).
    pub log_w_ordinate: f64,
    pub log_prior_theta: f64,
    pub log_theta_ordinate: f64,
    pub theta: GroupParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactSummary {
    pub network: Network,
    pub runs: Vec<ExactEstimate>,
    pub mean: f64,
    pub std: f64,
}

fn ln_q(to: &[f64], from: &[f64], step: f64) -> f64 {
    let r = to.len() as f64;
    let ss: f64 = to.iter().zip(from).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * (r * (LN_2PI + 2.0 * step.ln()) + ss / (step * step))
}

/// log m(y | γ) with displacements integrated: parameter ordinate from a full chain,
/// displacement ordinate from reduced multiple-block runs.
pub fn chib_exact_su(
    data: &[SubjectData],
    parc: &Parcellation,
    gamma: &Network,
    h: &Hyperparams,
    cfg: &EvidenceConfig,
) -> Result<ExactEstimate> {
    cfg.validate()?;
    h.validate()?;
    let obs = Observations::from_subjects(data)?;
    if parc.grid() != &obs.grid || gamma.len() != parc.region_count() {
        return Err(Error::Shape("data, parcellation and network disagree".into()));
    }
    let lattice = build_lattice(&obs.grid, cfg.omega)?;
    let blocks = obs.subjects * lattice.len();
    if blocks > cfg.exact_cap {
        return Err(Error::CapExceeded {
            size: blocks,
            cap: cfg.exact_cap,
        });
    }
    let p = Problem::full(&obs, parc);
    let seed = splitmix(cfg.seed ^ splitmix(gamma.bits().bytes().fold(7u64, |h, b| h * 31 + b as u64)));
    let mut rng = rng_from_seed(seed);

    // parameter mode, then displacement mode
    let theta0 = initial_params(&p, gamma, cfg.sigma_s2_init);
    let w0 = DisplacementSet::zeros(lattice, obs.subjects);
    let mut eng = Engine::new(p.clone(), theta0, gamma.clone(), h.clone(), Some(&w0), cfg.rw_sigma)?;
    let fit = saem_engine(&mut eng, &mut rng, &cfg.saem(seed, Some(cfg.spatial())))
        .map_err(|e| e.at_stage("exact: parameter mode"))?;
    let star = fit.theta.clone();
    let step = fit.rw_sigma;
    let mut me = MarginalEngine::new(p.clone(), star.clone(), fit.w.as_ref().expect("spatial fit"))?;
    let acfg = AnnealConfig {
        tau: cfg.anneal_tau,
        steps: cfg.anneal_steps,
        rw_sigma: step,
        seed: splitmix(seed),
    };
    let sa = anneal_engine(&mut me, &mut rng, &acfg).map_err(|e| e.at_stage("exact: displacement mode"))?;
    let w_star = sa.w.weights().to_vec();
    let loglik = me.loglik();
    let log_prior_w = ln_normal_iso(&w_star, star.sigma_s2);

    // reduced runs: run r frees blocks r.., fixes earlier ones at w*
    let nb = me.control_points();
    let r = me.rank();
    let mut num = vec![Vec::new(); blocks];
    let mut den = vec![Vec::new(); blocks];
    let mut prop = [0.0f64; 3];
    for run in 0..=blocks {
        me.set_weights(&w_star);
        let free = blocks - run;
        let iters = if free == 0 {
            cfg.exact_iterations
        } else {
            (cfg.exact_iterations / free).max(1)
        };
        for _ in 0..iters {
            for blk in run..blocks {
                me.mh_step(&mut rng, blk / nb, blk % nb, step, 1.0)
                    .map_err(|e| e.at_stage("exact: reduced run"))?;
            }
            if run < blocks {
                // numerator of block `run`: move from the current draw to w*
                let (i, b) = (run / nb, run % nb);
                let cur = me.weight(i, b).to_vec();
                let target = &w_star[run * r..run * r + r];
                let delta = me.propose(i, b, target);
                me.finish(false, i, b, target);
                num[run].push(ln_q(target, &cur, step) + delta.min(0.0));
            }
            if run > 0 {
                // denominator of block run−1, which sits at w*: move to a proposal
                let prev = run - 1;
                let (i, b) = (prev / nb, prev % nb);
                let base = &w_star[prev * r..prev * r + r];
                for a in 0..r {
                    prop[a] = base[a] + step * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                }
                let delta = me.propose(i, b, &prop[..r]);
                me.finish(false, i, b, &prop[..r]);
                den[prev].push(delta.min(0.0));
            }
        }
    }
    let mut log_w_ordinate = 0.0;
    for blk in 0..blocks {
        let ln_num = log_sum_exp(&num[blk]) - (num[blk].len() as f64).ln();
        let ln_den = log_sum_exp(&den[blk]) - (den[blk].len() as f64).ln();
        let v = ln_num - ln_den;
        if !v.is_finite() {
            return Err(Error::DegenerateStatistics(format!(
                "reduced ordinate of block {blk} is {v}"
            )));
        }
        log_w_ordinate += v;
    }

    // parameter ordinate from a full chain started at (θ*, w*)
    let mut eng = Engine::new(p, star.clone(), gamma.clone(), h.clone(), Some(&sa.w), step)?;
    for _ in 0..cfg.gibbs_burn_in {
        gibbs_sweep(&mut eng, &mut rng, None)?;
    }
    let mut ords = Vec::with_capacity(cfg.gibbs_samples);
    for _ in 0..cfg.gibbs_samples {
        gibbs_sweep(&mut eng, &mut rng, None)?;
        ords.push(eng.log_theta_ordinate(&star));
    }
    let log_theta_ordinate = log_sum_exp(&ords) - (ords.len() as f64).ln();
    if !log_theta_ordinate.is_finite() {
        return Err(Error::EvidenceUnderflow("parameter ordinate underflowed".into()));
    }
    let log_prior_theta = log_param_prior(&star, gamma, h)?;
    Ok(ExactEstimate {
        log_marginal: loglik + log_prior_w - log_w_ordinate + log_prior_theta - log_theta_ordinate,
        loglik,
        log_prior_w,
        log_w_ordinate,
        log_prior_theta,
        log_theta_ordinate,
        theta: star,
    })
}

/// `repeats` independent exact estimates (seeds derived from `cfg.seed`), mean and std.
pub fn chib_exact_su_repeated(
    data: &[SubjectData],
    parc: &Parcellation,
    gamma: &Network,
    h: &Hyperparams,
    cfg: &EvidenceConfig,
    repeats: usize,
) -> Result<ExactSummary> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut runs = Vec::with_capacity(repeats);
    for k in 0..repeats {
        let mut c = cfg.clone();
        c.seed = splitmix(cfg.seed.wrapping_add(k as u64));
        runs.push(chib_exact_su(data, parc, gamma, h, &c)?);
    }
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.log_marginal).sum::<f64>() / n;
    let var = if runs.len() > 1 {
        runs.iter().map(|r| (r.log_marginal - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(ExactSummary {
        network: gamma.clone(),
        runs,
        mean,
        std: var.sqrt(),
    })
}

/// No-SU total: Σ_j log m(y^j | γ_j), the limit of the exact computation with
/// displacements frozen.
pub fn log_marginal_no_su(
    data: &[SubjectData],
    parc: &Parcellation,
    gamma: &Network,
    h: &Hyperparams,
    cfg: &EvidenceConfig,
) -> Result<f64> {
    let obs = Observations::from_subjects(data)?;
    let targets = Problem::full(&obs, parc).target;
    let mut terms = Vec::with_capacity(parc.region_count());
    for j in 0..parc.region_count() {
        let p = Problem::region(&obs, &targets, parc, j);
        let vox = parc.region_voxels(j);
        let tag = u64::from(gamma.get(j));
        let est = chib_marginal_region(&p, gamma.get(j), h, cfg, region_seed(cfg.seed, tag, &vox))?;
        terms.push((vox[0], est.log_marginal));
    }
    terms.sort_by_key(|t| t.0);
    Ok(terms.iter().map(|t| t.1).sum())
}
