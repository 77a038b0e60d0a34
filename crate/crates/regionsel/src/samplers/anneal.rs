//! Displacement moves against the marginal target f(y | w, θ) π(w | σ_S²), with
//! subject effects and template integrated out voxel by voxel.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::engine::Problem;
use super::field::SpatialField;
use super::{rng_from_seed, Rng};
use crate::deform::DisplacementSet;
use crate::error::{Error, Result};
use crate::model::density::ln_normal_iso;
use crate::model::{BlockAcc, GroupParams, Observations};
use crate::volume::{Parcellation, SubjectData};

/// Per-voxel block accumulators kept in step with the displaced indices.
#[derive(Debug, Clone)]
pub struct MarginalEngine {
    p: Problem,
    theta: GroupParams,
    field: SpatialField,
    acc: Vec<BlockAcc>,
    ll: Vec<f64>,
    // tentative move bookkeeping
    stamp: Vec<u32>,
    epoch: u32,
    touched: Vec<u32>,
    saved: Vec<BlockAcc>,
    new_ll: Vec<f64>,
}

impl MarginalEngine {
    /// `p` must be laid out like [`Problem::full`] for the weights' grid.
    pub fn new(p: Problem, theta: GroupParams, ds: &DisplacementSet) -> Result<Self> {
        let d = p.voxels();
        if ds.lattice().grid().len() != d || ds.subjects() * d != p.observations() {
            return Err(Error::Shape("displacements do not match the problem layout".into()));
        }
        if theta.regions() != p.regions() {
            return Err(Error::Shape("parameters do not match the problem's regions".into()));
        }
        let field = SpatialField::new(ds);
        let mut m = Self {
            p,
            theta,
            field,
            acc: vec![BlockAcc::default(); d],
            ll: vec![0.0; d],
            stamp: vec![0; d],
            epoch: 0,
            touched: Vec::new(),
            saved: Vec::new(),
            new_ll: Vec::new(),
        };
        m.rebuild();
        Ok(m)
    }

    /// Recompute targets and accumulators from scratch.
    pub fn rebuild(&mut self) {
        self.field.write_targets(&mut self.p.target);
        self.acc.iter_mut().for_each(|a| *a = BlockAcc::default());
        for o in 0..self.p.observations() {
            let k = self.p.target[o] as usize;
            let sig = self.theta.sigma2[self.p.labels[k] as usize];
            self.acc[k].add(self.p.y[o], self.p.s2[o], sig);
        }
        for k in 0..self.acc.len() {
            self.ll[k] = self.voxel_ll(k);
        }
    }

    #[inline]
    fn voxel_ll(&self, k: usize) -> f64 {
        let j = self.p.labels[k] as usize;
        self.acc[k].loglik(self.theta.eta[j], self.theta.nu2[j])
    }

    pub fn subjects(&self) -> usize {
        self.field.subjects
    }

    pub fn control_points(&self) -> usize {
        self.field.control_points()
    }

    pub fn rank(&self) -> usize {
        self.field.rank
    }

    pub fn weights(&self) -> &[f64] {
        &self.field.w
    }

    pub fn weight(&self, i: usize, b: usize) -> &[f64] {
        self.field.weight(i, b)
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        self.field.set_weights(w);
        self.rebuild();
    }

    pub fn displacements(&self) -> DisplacementSet {
        self.field.displacement_set()
    }

    pub fn targets(&self) -> &[u32] {
        &self.p.target
    }

    /// log f(y | w, θ).
    pub fn loglik(&self) -> f64 {
        self.ll.iter().sum()
    }

    /// log π(w | σ_S²); zero when σ_S² is zero (flat).
    pub fn log_prior_w(&self) -> f64 {
        if self.theta.sigma_s2 > 0.0 {
            ln_normal_iso(&self.field.w, self.theta.sigma_s2)
        } else {
            0.0
        }
    }

    pub fn objective(&self) -> f64 {
        self.loglik() + self.log_prior_w()
    }

    /// Apply w_{i,b} → `prop` tentatively and return the change in the objective.
    /// Must be followed by [`MarginalEngine::finish`].
    pub fn propose(&mut self, i: usize, b: usize, prop: &[f64]) -> f64 {
        self.field.stage(i, b, prop, &self.p.target);
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = u32::MAX);
            self.epoch = 1;
        }
        self.touched.clear();
        self.saved.clear();
        for idx in 0..self.field.moves.len() {
            let (o, nk) = self.field.moves[idx];
            let o = o as usize;
            let ok = self.p.target[o];
            for v in [ok, nk] {
                if self.stamp[v as usize] != self.epoch {
                    self.stamp[v as usize] = self.epoch;
                    self.touched.push(v);
                    self.saved.push(self.acc[v as usize]);
                }
            }
            let (y, s2) = (self.p.y[o], self.p.s2[o]);
            let so = self.theta.sigma2[self.p.labels[ok as usize] as usize];
            let sn = self.theta.sigma2[self.p.labels[nk as usize] as usize];
            self.acc[ok as usize].remove(y, s2, so);
            self.acc[nk as usize].add(y, s2, sn);
        }
        let mut delta = 0.0;
        self.new_ll.clear();
        for t in 0..self.touched.len() {
            let v = self.touched[t] as usize;
            let nl = self.voxel_ll(v);
            delta += nl - self.ll[v];
            self.new_ll.push(nl);
        }
        if self.theta.sigma_s2 > 0.0 {
            let cur = self.field.weight(i, b);
            let mut dp = 0.0;
            for a in 0..cur.len() {
                dp -= prop[a] * prop[a] - cur[a] * cur[a];
            }
            delta += dp / (2.0 * self.theta.sigma_s2);
        }
        delta
    }

    /// Keep or revert the last proposal.
    pub fn finish(&mut self, accept: bool, i: usize, b: usize, prop: &[f64]) {
        if accept {
            self.field.commit(i, b, prop, &mut self.p.target);
            for (t, &v) in self.touched.iter().enumerate() {
                self.ll[v as usize] = self.new_ll[t];
            }
        } else {
            for (t, &v) in self.touched.iter().enumerate() {
                self.acc[v as usize] = self.saved[t];
            }
        }
    }

    /// One random-walk MH update of w_{i,b} at inverse temperature `beta`; returns the
    /// objective change if accepted.
    pub fn mh_step(&mut self, rng: &mut Rng, i: usize, b: usize, step: f64, beta: f64) -> Result<Option<f64>> {
        let r = self.rank();
        let mut prop = [0.0f64; 3];
        let cur = self.field.weight(i, b);
        for a in 0..r {
            prop[a] = cur[a] + step * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
        let delta = self.propose(i, b, &prop[..r]);
        if !delta.is_finite() {
            self.finish(false, i, b, &prop[..r]);
            return Err(Error::SamplerFailure {
                stage: "annealing".into(),
                detail: format!("non-finite objective change at subject {i}, control point {b}"),
            });
        }
        let u: f64 = rng.random();
        let acc = u.ln() < beta * delta;
        self.finish(acc, i, b, &prop[..r]);
        Ok(acc.then_some(delta))
    }
}

// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    /// Cooling factor; inverse temperature at step t is tau^-t.
    pub tau: f64,
    pub steps: usize,
    /// Base proposal std; shrinks as 1/sqrt(inverse temperature).
    pub rw_sigma: f64,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            tau: 0.99,
            steps: 100,
            rw_sigma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnnealResult {
    /// Best visited weights.
    pub w: DisplacementSet,
    /// log f(y | ŵ, θ) + log π(ŵ).
    pub objective: f64,
    /// Objective of the current state after each temperature step.
    pub trace: Vec<f64>,
    pub acceptance: f64,
}

/// Simulated annealing from `init`; returns the best state visited, including `init`.
pub fn sa_displacements(
    data: &[SubjectData],
    theta: &GroupParams,
    parc: &Parcellation,
    init: &DisplacementSet,
    cfg: &AnnealConfig,
) -> Result<AnnealResult> {
    if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in (0,1), got {}",
            cfg.tau
        )));
    }
    if !(cfg.rw_sigma > 0.0) {
        return Err(Error::InvalidArgument("rw_sigma must be positive".into()));
    }
    let obs = Observations::from_subjects(data)?;
    if parc.grid() != &obs.grid {
        return Err(Error::Shape("parcellation grid differs from the data grid".into()));
    }
    let mut eng = MarginalEngine::new(Problem::full(&obs, parc), theta.clone(), init)?;
    let mut rng = rng_from_seed(cfg.seed);
    anneal_engine(&mut eng, &mut rng, cfg)
}

pub fn anneal_engine(eng: &mut MarginalEngine, rng: &mut Rng, cfg: &AnnealConfig) -> Result<AnnealResult> {
    let (n, nb) = (eng.subjects(), eng.control_points());
    let mut best = eng.objective();
    let mut best_w = eng.weights().to_vec();
    let mut trace = Vec::with_capacity(cfg.steps);
    let (mut acc, mut tot) = (0u64, 0u64);
    for t in 1..=cfg.steps {
        let beta = cfg.tau.powi(-(t as i32));
        let step = cfg.rw_sigma / beta.sqrt();
        eng.rebuild();
        let mut cur = eng.objective();
        for i in 0..n {
            for b in 0..nb {
                let moved = eng
                    .mh_step(rng, i, b, step, beta)
                    .map_err(|e| e.at_stage("annealing"))?;
                tot += 1;
                if let Some(delta) = moved {
                    acc += 1;
                    cur += delta;
                    if cur > best {
                        best = cur;
                        best_w.copy_from_slice(eng.weights());
                    }
                }
            }
        }
        trace.push(cur);
    }
    eng.set_weights(&best_w);
    Ok(AnnealResult {
        w: eng.displacements(),
        objective: eng.objective(),
        trace,
        acceptance: if tot == 0 { 0.0 } else { acc as f64 / tot as f64 },
    })
}
