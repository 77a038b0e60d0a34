//! Complete-data Metropolis-within-Gibbs engine over (x, μ, η, ν², σ², σ_S², w).

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::field::SpatialField;
use crate::deform::DisplacementSet;
use crate::error::{Error, Result};
use crate::model::density::{ln_inv_gamma, ln_normal, LN_2PI};
use crate::model::{GroupParams, Hyperparams, Network, Observations, SuffStats};
use crate::volume::Parcellation;

/// Observations with their displaced voxel, plus the voxel → region map.
#[derive(Debug, Clone)]
pub struct Problem {
    pub y: Vec<f64>,
    pub s2: Vec<f64>,
    pub target: Vec<u32>,
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl Problem {
    /// All observations at their own voxel (w = 0).
    pub fn full(obs: &Observations, parc: &Parcellation) -> Self {
        let d = obs.voxels();
        Self {
            y: obs.y.clone(),
            s2: obs.s2.clone(),
            target: (0..obs.subjects).flat_map(|_| 0..d as u32).collect(),
            labels: parc.labels().to_vec(),
            sizes: parc.sizes().to_vec(),
        }
    }

    /// Observations displaced into region j, re-indexed onto the region's voxels.
    pub fn region(obs: &Observations, targets: &[u32], parc: &Parcellation, j: usize) -> Self {
        let d = obs.voxels();
        let mut local = vec![u32::MAX; d];
        let mut count = 0u32;
        for k in 0..d {
            if parc.label(k) == j {
                local[k] = count;
                count += 1;
            }
        }
        let mut p = Self {
            y: Vec::new(),
            s2: Vec::new(),
            target: Vec::new(),
            labels: vec![0; count as usize],
            sizes: vec![count as usize],
        };
        for (o, &k) in targets.iter().enumerate() {
            let lk = local[k as usize];
            if lk != u32::MAX {
                p.y.push(obs.y[o]);
                p.s2.push(obs.s2[o]);
                p.target.push(lk);
            }
        }
        p
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn regions(&self) -> usize {
        self.sizes.len()
    }

    pub fn observations(&self) -> usize {
        self.y.len()
    }
}

/// Moment-based starting values.
pub fn initial_params(p: &Problem, gamma: &Network, sigma_s2: f64) -> GroupParams {
    let nreg = p.regions();
    let d = p.voxels();
    let mut cnt = vec![0.0; d];
    let mut sy = vec![0.0; d];
    let mut sy2 = vec![0.0; d];
    let mut ss2 = vec![0.0; nreg];
    let mut nobs = vec![0.0; nreg];
    for o in 0..p.observations() {
        let k = p.target[o] as usize;
        cnt[k] += 1.0;
        sy[k] += p.y[o];
        sy2[k] += p.y[o] * p.y[o];
        let j = p.labels[k] as usize;
        ss2[j] += p.s2[o];
        nobs[j] += 1.0;
    }
    let mut theta = GroupParams::uniform(nreg, 0.0, 1.0, 1.0, sigma_s2);
    for j in 0..nreg {
        let (mut m1, mut m2, mut nv, mut within, mut nw) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..d {
            if p.labels[k] as usize != j || cnt[k] == 0.0 {
                continue;
            }
            let mean = sy[k] / cnt[k];
            m1 += mean;
            m2 += mean * mean;
            nv += 1.0;
            if cnt[k] > 1.0 {
                within += (sy2[k] - cnt[k] * mean * mean) / (cnt[k] - 1.0);
                nw += 1.0;
            }
        }
        if nv > 0.0 {
            let mean = m1 / nv;
            if gamma.get(j) {
                theta.eta[j] = mean;
            }
            theta.nu2[j] = (m2 / nv - mean * mean).max(0.05);
        }
        let s2bar = if nobs[j] > 0.0 { ss2[j] / nobs[j] } else { 0.0 };
        if nw > 0.0 {
            theta.sigma2[j] = (within / nw - s2bar).max(0.05);
        }
    }
    theta
}

/// Gibbs state and data for one problem.
#[derive(Debug, Clone)]
pub struct Engine {
    p: Problem,
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub theta: GroupParams,
    pub gamma: Network,
    pub h: Hyperparams,
    field: Option<SpatialField>,
    pub rw_sigma: f64,
    accepted: Vec<u64>,
    proposed: Vec<u64>,
    window: (u32, u32),
    // scratch
    cnt: Vec<u32>,
    sumx: Vec<f64>,
    ln_sig: Vec<f64>,
    inv_sig: Vec<f64>,
}

fn draw_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0).map_err(|e| Error::SamplerFailure {
        stage: "inverse-gamma".into(),
        detail: format!("shape {shape}: {e}"),
    })?;
    let v = scale / g.sample(rng);
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::SamplerFailure {
            stage: "inverse-gamma".into(),
            detail: format!("draw {v} from shape {shape}, scale {scale}"),
        });
    }
    Ok(v)
}

#[inline]
fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

impl Engine {
    /// `w` turns on the spatial block; it must be indexed like `Problem::full`.
    pub fn new(
        p: Problem,
        theta: GroupParams,
        gamma: Network,
        h: Hyperparams,
        w: Option<&DisplacementSet>,
        rw_sigma: f64,
    ) -> Result<Self> {
        if theta.regions() != p.regions() || gamma.len() != p.regions() {
            return Err(Error::Shape("parameters do not match the problem's regions".into()));
        }
        h.validate()?;
        theta.validate(&gamma, false)?;
        let d = p.voxels();
        let nreg = p.regions();
        // start x at y and μ at the voxel means of what lands there
        let x = p.y.clone();
        let mut mu = vec![0.0; d];
        let mut cnt = vec![0u32; d];
        for o in 0..p.observations() {
            let k = p.target[o] as usize;
            mu[k] += p.y[o];
            cnt[k] += 1;
        }
        for k in 0..d {
            mu[k] = if cnt[k] > 0 {
                mu[k] / cnt[k] as f64
            } else {
                theta.eta[p.labels[k] as usize]
            };
        }
        let mut eng = Self {
            x,
            mu,
            theta,
            gamma,
            h,
            field: None,
            rw_sigma,
            accepted: Vec::new(),
            proposed: Vec::new(),
            window: (0, 0),
            cnt,
            sumx: vec![0.0; d],
            ln_sig: vec![0.0; nreg],
            inv_sig: vec![0.0; nreg],
            p,
        };
        if let Some(ds) = w {
            if ds.subjects() * ds.lattice().grid().len() != eng.p.observations() || ds.lattice().grid().len() != d {
                return Err(Error::Shape("displacements do not match the problem layout".into()));
            }
            let f = SpatialField::new(ds);
            f.write_targets(&mut eng.p.target);
            let nb = ds.subjects() * ds.lattice().len();
            eng.accepted = vec![0; nb];
            eng.proposed = vec![0; nb];
            eng.field = Some(f);
        }
        Ok(eng)
    }

    pub fn problem(&self) -> &Problem {
        &self.p
    }

    pub fn targets(&self) -> &[u32] {
        &self.p.target
    }

    pub fn has_spatial(&self) -> bool {
        self.field.is_some()
    }

    pub fn displacements(&self) -> Option<DisplacementSet> {
        self.field.as_ref().map(|f| f.displacement_set())
    }

    /// rank·n·B, or 0 without a spatial block.
    pub fn weight_count(&self) -> usize {
        self.field.as_ref().map_or(0, |f| f.w.len())
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.field.as_ref().map(|f| f.w.as_slice())
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .zip(&self.proposed)
            .map(|(&a, &p)| if p == 0 { 0.0 } else { a as f64 / p as f64 })
            .collect()
    }

    pub fn reset_acceptance(&mut self) {
        self.accepted.iter_mut().for_each(|v| *v = 0);
        self.proposed.iter_mut().for_each(|v| *v = 0);
    }

    fn refresh_sigma_cache(&mut self) {
        for j in 0..self.p.regions() {
            self.ln_sig[j] = self.theta.sigma2[j].ln();
            self.inv_sig[j] = 1.0 / self.theta.sigma2[j];
        }
    }

    /// x_{i,l} | y, μ, σ², w.
    pub fn update_x<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let p = &self.p;
        for o in 0..p.observations() {
            let k = p.target[o] as usize;
            let sig = self.theta.sigma2[p.labels[k] as usize];
            let s2 = p.s2[o];
            if s2 == 0.0 {
                self.x[o] = p.y[o];
                continue;
            }
            let tot = sig + s2;
            let mean = (sig * p.y[o] + s2 * self.mu[k]) / tot;
            let sd = (sig * s2 / tot).sqrt();
            self.x[o] = mean + sd * std_normal(rng);
        }
    }

    fn accumulate_voxels(&mut self) {
        self.cnt.iter_mut().for_each(|v| *v = 0);
        self.sumx.iter_mut().for_each(|v| *v = 0.0);
        for (o, &k) in self.p.target.iter().enumerate() {
            self.cnt[k as usize] += 1;
            self.sumx[k as usize] += self.x[o];
        }
    }

    /// μ_k | x, η, ν², σ², w (prior draw when nothing lands on k).
    pub fn update_mu<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.accumulate_voxels();
        for k in 0..self.p.voxels() {
            let j = self.p.labels[k] as usize;
            let prec = 1.0 / self.theta.nu2[j] + self.cnt[k] as f64 / self.theta.sigma2[j];
            let mean = (self.theta.eta[j] / self.theta.nu2[j] + self.sumx[k] / self.theta.sigma2[j]) / prec;
            self.mu[k] = mean + std_normal(rng) / prec.sqrt();
        }
    }

    /// Per-region Σμ and Σμ².
    fn mu_sums(&self) -> Vec<(f64, f64)> {
        let mut s = vec![(0.0, 0.0); self.p.regions()];
        for (k, &m) in self.mu.iter().enumerate() {
            let e = &mut s[self.p.labels[k] as usize];
            e.0 += m;
            e.1 += m * m;
        }
        s
    }

    /// Shape, scale of ν_j² | μ with η integrated out, and mean of η_j | ν², μ.
    fn nu_eta_conditional(&self, j: usize, sum: f64, sum2: f64) -> (f64, f64, f64) {
        let h = &self.h;
        let d = self.p.sizes[j] as f64;
        let shape = h.alpha + d / 2.0;
        if self.gamma.get(j) {
            let tot = sum + h.lambda * h.m;
            let scale = h.beta + 0.5 * (sum2 + h.lambda * h.m * h.m - tot * tot / (h.lambda + d));
            (shape, scale.max(h.beta * 1e-12), tot / (h.lambda + d))
        } else {
            (shape, h.beta + 0.5 * sum2, 0.0)
        }
    }

    /// (η_j, ν_j²) jointly: ν² from its η-collapsed conditional, then η | ν².
    pub fn update_eta_nu<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let sums = self.mu_sums();
        for (j, &(s1, s2)) in sums.iter().enumerate() {
            let (shape, scale, mean) = self.nu_eta_conditional(j, s1, s2);
            let nu2 = draw_inv_gamma(rng, shape, scale)?;
            self.theta.nu2[j] = nu2;
            self.theta.eta[j] = if self.gamma.get(j) {
                let d = self.p.sizes[j] as f64;
                mean + (nu2 / (self.h.lambda + d)).sqrt() * std_normal(rng)
            } else {
                0.0
            };
        }
        Ok(())
    }

    /// Per-region count and residual sum of squares of x around the displaced template.
    fn residual_sums(&self) -> Vec<(f64, f64)> {
        let mut s = vec![(0.0, 0.0); self.p.regions()];
        for (o, &k) in self.p.target.iter().enumerate() {
            let r = self.x[o] - self.mu[k as usize];
            let e = &mut s[self.p.labels[k as usize] as usize];
            e.0 += 1.0;
            e.1 += r * r;
        }
        s
    }

    pub fn update_sigma2<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let sums = self.residual_sums();
        for (j, &(n, ss)) in sums.iter().enumerate() {
            self.theta.sigma2[j] = draw_inv_gamma(rng, self.h.alpha + n / 2.0, self.h.beta + ss / 2.0)?;
        }
        Ok(())
    }

    pub fn update_sigma_s2<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if let Some(f) = &self.field {
            let shape = self.h.alpha + f.w.len() as f64 / 2.0;
            let scale = self.h.beta + 0.5 * f.sum_sq();
            self.theta.sigma_s2 = draw_inv_gamma(rng, shape, scale)?;
        }
        Ok(())
    }

    /// Log target ratio of moving w_{i,b} to `prop` given x, μ, θ. Leaves the state
    /// unchanged apart from the staged proposal.
    pub fn w_log_ratio(&mut self, i: usize, b: usize, prop: &[f64]) -> f64 {
        self.refresh_sigma_cache();
        let f = self.field.as_mut().expect("spatial block enabled");
        f.stage(i, b, prop, &self.p.target);
        let cur = f.weight(i, b);
        let s2s = self.theta.sigma_s2;
        let mut delta = 0.0;
        for a in 0..f.rank {
            delta -= (prop[a] * prop[a] - cur[a] * cur[a]) / (2.0 * s2s);
        }
        for &(o, nk) in &f.moves {
            let o = o as usize;
            let ok = self.p.target[o] as usize;
            let nk = nk as usize;
            let jo = self.p.labels[ok] as usize;
            let jn = self.p.labels[nk] as usize;
            let ro = self.x[o] - self.mu[ok];
            let rn = self.x[o] - self.mu[nk];
            delta += -0.5 * (self.ln_sig[jn] + rn * rn * self.inv_sig[jn])
                + 0.5 * (self.ln_sig[jo] + ro * ro * self.inv_sig[jo]);
        }
        delta
    }

    /// Apply the proposal staged by the last [`Engine::w_log_ratio`] call.
    pub fn w_commit(&mut self, i: usize, b: usize, prop: &[f64]) {
        let f = self.field.as_mut().expect("spatial block enabled");
        f.commit(i, b, prop, &mut self.p.target);
    }

    /// One random-walk proposal per w_{i,b}; `adapt` tunes rw_sigma on windows of 50.
    pub fn update_w<R: Rng + ?Sized>(&mut self, rng: &mut R, adapt: Option<f64>) -> Result<()> {
        let Some(f) = &self.field else { return Ok(()) };
        let (n, nb, r) = (f.subjects, f.control_points(), f.rank);
        let mut prop = [0.0f64; 3];
        for i in 0..n {
            for b in 0..nb {
                let cur = self.field.as_ref().unwrap().weight(i, b);
                for a in 0..r {
                    prop[a] = cur[a] + self.rw_sigma * std_normal(rng);
                }
                let delta = self.w_log_ratio(i, b, &prop[..r]);
                if !delta.is_finite() {
                    return Err(Error::SamplerFailure {
                        stage: "w-block".into(),
                        detail: format!("non-finite log acceptance ratio for subject {i}, control point {b}"),
                    });
                }
                let slot = i * nb + b;
                self.proposed[slot] += 1;
                let u: f64 = rng.random();
                let acc = delta >= 0.0 || u.ln() < delta;
                if acc {
                    self.w_commit(i, b, &prop[..r]);
                    self.accepted[slot] += 1;
                }
                if let Some(target) = adapt {
                    self.window.1 += 1;
                    if acc {
                        self.window.0 += 1;
                    }
                    if self.window.1 == 50 {
                        let rate = self.window.0 as f64 / 50.0;
                        self.rw_sigma *= if rate > target { 1.1 } else { 0.9 };
                        self.window = (0, 0);
                    }
                }
            }
        }
        Ok(())
    }

    /// Full sweep in the order x, μ, (η, ν²), σ², σ_S², w.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, adapt: Option<f64>) -> Result<()> {
        self.update_x(rng);
        self.update_mu(rng);
        self.update_eta_nu(rng)?;
        self.update_sigma2(rng)?;
        self.update_sigma_s2(rng)?;
        self.update_w(rng, adapt)
    }

    /// Latent variables only (x, μ, w) at the current θ.
    pub fn latent_sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, adapt: Option<f64>) -> Result<()> {
        self.update_x(rng);
        self.update_mu(rng);
        self.update_w(rng, adapt)
    }

    pub fn stats(&self) -> SuffStats {
        let nreg = self.p.regions();
        let h = &self.h;
        let mut s = SuffStats::zeros(nreg);
        s.spatial = h.beta + 0.5 * self.field.as_ref().map_or(0.0, |f| f.sum_sq());
        for (j, &(n, ss)) in self.residual_sums().iter().enumerate() {
            s.regions[j][0] = 0.5 * n;
            s.regions[j][1] = 0.5 * ss;
        }
        for (j, &(s1, s2)) in self.mu_sums().iter().enumerate() {
            s.regions[j][2] = h.beta + 0.5 * s2;
            s.regions[j][3] = if self.gamma.get(j) { s1 } else { 0.0 };
        }
        s
    }

    /// Closed-form maximizer of the complete-data posterior given averaged statistics.
    pub fn m_step(&mut self, s: &SuffStats) -> Result<()> {
        let th = m_step_params(s, &self.gamma, &self.p.sizes, &self.h, self.weight_count())?;
        let keep_s = self.theta.sigma_s2;
        self.theta = th;
        if self.field.is_none() {
            self.theta.sigma_s2 = keep_s;
        }
        Ok(())
    }

    /// log π(θ* | z, y, γ) as a product of the full conditionals at the current z.
    pub fn log_theta_ordinate(&self, star: &GroupParams) -> f64 {
        let mut lp = 0.0;
        for (j, &(s1, s2)) in self.mu_sums().iter().enumerate() {
            let (shape, scale, mean) = self.nu_eta_conditional(j, s1, s2);
            lp += ln_inv_gamma(star.nu2[j], shape, scale);
            if self.gamma.get(j) {
                let d = self.p.sizes[j] as f64;
                lp += ln_normal(star.eta[j], mean, star.nu2[j] / (self.h.lambda + d));
            }
        }
        for (j, &(n, ss)) in self.residual_sums().iter().enumerate() {
            lp += ln_inv_gamma(star.sigma2[j], self.h.alpha + n / 2.0, self.h.beta + ss / 2.0);
        }
        if let Some(f) = &self.field {
            let shape = self.h.alpha + f.w.len() as f64 / 2.0;
            lp += ln_inv_gamma(star.sigma_s2, shape, self.h.beta + 0.5 * f.sum_sq());
        }
        lp
    }

    /// log f(y, x, μ, w | θ) up to θ-free terms; used by invariance checks.
    pub fn log_joint_latent(&self) -> f64 {
        let p = &self.p;
        let mut lp = 0.0;
        for o in 0..p.observations() {
            if p.s2[o] > 0.0 {
                lp += ln_normal(p.y[o], self.x[o], p.s2[o]);
            }
            let k = p.target[o] as usize;
            lp += ln_normal(self.x[o], self.mu[k], self.theta.sigma2[p.labels[k] as usize]);
        }
        for (k, &m) in self.mu.iter().enumerate() {
            let j = p.labels[k] as usize;
            lp += ln_normal(m, self.theta.eta[j], self.theta.nu2[j]);
        }
        if let Some(f) = &self.field {
            let v = self.theta.sigma_s2;
            lp += f.w.iter().map(|w| -0.5 * (LN_2PI + v.ln() + w * w / v)).sum::<f64>();
        }
        lp
    }
}

/// SAEM M-step on averaged statistics; `w_count` = rank·n·B (0 without spatial block).
pub fn m_step_params(
    s: &SuffStats,
    gamma: &Network,
    sizes: &[usize],
    h: &Hyperparams,
    w_count: usize,
) -> Result<GroupParams> {
    let nreg = sizes.len();
    let mut th = GroupParams::uniform(nreg, 0.0, 1.0, 1.0, 0.0);
    let check = |num: f64, den: f64, what: &str, j: usize| -> Result<f64> {
        let v = num / den;
        if !(num > 0.0 && den > 0.0 && v.is_finite()) {
            return Err(Error::DegenerateStatistics(format!(
                "{what} update in region {j}: numerator {num}, denominator {den}"
            )));
        }
        Ok(v)
    };
    for j in 0..nreg {
        let [s1, s2, s3, s4] = s.regions[j];
        let d = sizes[j] as f64;
        th.sigma2[j] = check(h.beta + s2, h.alpha + 1.0 + s1, "sigma2", j)?;
        if gamma.get(j) {
            let tot = s4 + h.lambda * h.m;
            let num = s3 + 0.5 * h.lambda * h.m * h.m - 0.5 * tot * tot / (d + h.lambda);
            th.nu2[j] = check(num, h.alpha + 1.0 + (d + 1.0) / 2.0, "nu2", j)?;
            th.eta[j] = tot / (d + h.lambda);
        } else {
            th.nu2[j] = check(s3, h.alpha + 1.0 + d / 2.0, "nu2", j)?;
            th.eta[j] = 0.0;
        }
    }
    if w_count > 0 {
        th.sigma_s2 = check(s.spatial, h.alpha + 1.0 + w_count as f64 / 2.0, "sigma_s2", 0)?;
    }
    Ok(th)
}

/// log f(y | θ) for a problem's current displaced indices, with x and μ integrated out.
pub fn problem_loglik(p: &Problem, theta: &GroupParams) -> f64 {
    let mut acc = vec![crate::model::BlockAcc::default(); p.voxels()];
    for o in 0..p.observations() {
        let k = p.target[o] as usize;
        acc[k].add(p.y[o], p.s2[o], theta.sigma2[p.labels[k] as usize]);
    }
    acc.iter()
        .enumerate()
        .map(|(k, a)| {
            let j = p.labels[k] as usize;
            a.loglik(theta.eta[j], theta.nu2[j])
        })
        .sum()
}
