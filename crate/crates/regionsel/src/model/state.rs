use super::block::BlockAcc;
use super::density::{ln_inv_gamma, ln_normal, ln_normal_iso};
use super::params::{GroupParams, Hyperparams, Network};
use crate::deform::{displace_index, DisplacementSet, KernelMode, KernelTable};
use crate::error::{Error, Result};
use crate::volume::{common_grid, Parcellation, ScalarMap, SubjectData, VoxelGrid};

/// Subject maps flattened subject-major: entry i·d + l is subject i, voxel l.
#[derive(Debug, Clone)]
pub struct Observations {
    pub grid: VoxelGrid,
    pub subjects: usize,
    pub y: Vec<f64>,
    pub s2: Vec<f64>,
}

impl Observations {
    pub fn from_subjects(data: &[SubjectData]) -> Result<Self> {
        let grid = common_grid(data)?.clone();
        let mut y = Vec::with_capacity(data.len() * grid.len());
        let mut s2 = Vec::with_capacity(data.len() * grid.len());
        for s in data {
            y.extend_from_slice(s.effects().values());
            s2.extend_from_slice(s.variances().values());
        }
        Ok(Self {
            grid,
            subjects: data.len(),
            y,
            s2,
        })
    }

    pub fn voxels(&self) -> usize {
        self.grid.len()
    }

    /// Per-voxel mean over subjects.
    pub fn voxel_means(&self) -> Vec<f64> {
        let d = self.voxels();
        let mut m = vec![0.0; d];
        for i in 0..self.subjects {
            for l in 0..d {
                m[l] += self.y[i * d + l];
            }
        }
        m.iter_mut().for_each(|v| *v /= self.subjects as f64);
        m
    }
}

/// Displaced voxel index φ_i(l) for every observation; identity when `w` is `None`.
pub fn displaced_targets(grid: &VoxelGrid, subjects: usize, w: Option<&DisplacementSet>) -> Vec<u32> {
    let d = grid.len();
    let mut t: Vec<u32> = (0..subjects).flat_map(|_| 0..d as u32).collect();
    if let Some(ds) = w {
        let lat = ds.lattice();
        let table = KernelTable::new(lat, KernelMode::Truncated);
        let r = grid.rank();
        let mut u = vec![0.0; d * r];
        for i in 0..subjects {
            u.iter_mut().for_each(|v| *v = 0.0);
            for b in 0..lat.len() {
                let wb = ds.weight(i, b);
                for &(k, kv) in table.support(b) {
                    for a in 0..r {
                        u[k as usize * r + a] += kv * wb[a];
                    }
                }
            }
            for l in 0..d {
                t[i * d + l] = displace_index(grid, l, &u[l * r..l * r + r]) as u32;
            }
        }
    }
    t
}

/// Σ_k log-density of the block of observations displaced onto voxel k.
pub fn loglik_from_targets(obs: &Observations, targets: &[u32], parc: &Parcellation, theta: &GroupParams) -> f64 {
    let mut acc = vec![BlockAcc::default(); obs.voxels()];
    for (o, &k) in targets.iter().enumerate() {
        let j = parc.label(k as usize);
        acc[k as usize].add(obs.y[o], obs.s2[o], theta.sigma2[j]);
    }
    acc.iter()
        .enumerate()
        .map(|(k, a)| {
            let j = parc.label(k);
            a.loglik(theta.eta[j], theta.nu2[j])
        })
        .sum()
}

/// log f(y | w, θ) with subject effects and template integrated out.
pub fn data_loglik_given_w(
    data: &[SubjectData],
    w: &DisplacementSet,
    theta: &GroupParams,
    parc: &Parcellation,
) -> Result<f64> {
    let obs = Observations::from_subjects(data)?;
    if parc.grid() != &obs.grid || w.lattice().grid() != &obs.grid {
        return Err(Error::Shape(
            "data, displacements and parcellation differ in grid".into(),
        ));
    }
    if w.subjects() != obs.subjects {
        return Err(Error::Shape("displacement set has the wrong subject count".into()));
    }
    let t = displaced_targets(&obs.grid, obs.subjects, Some(w));
    Ok(loglik_from_targets(&obs, &t, parc, theta))
}

/// Latent variables z = (x, μ, w).
#[derive(Debug, Clone)]
pub struct LatentState {
    pub grid: VoxelGrid,
    pub subjects: usize,
    /// Subject effects, flattened subject-major.
    pub x: Vec<f64>,
    /// Template μ.
    pub mu: Vec<f64>,
    /// `None` means displacements are frozen at zero.
    pub w: Option<DisplacementSet>,
}

impl LatentState {
    pub fn subject_map(&self, i: usize) -> ScalarMap {
        let d = self.grid.len();
        ScalarMap::new(self.grid.clone(), self.x[i * d..(i + 1) * d].to_vec()).expect("latent state is finite")
    }

    pub fn template(&self) -> ScalarMap {
        ScalarMap::new(self.grid.clone(), self.mu.clone()).expect("latent state is finite")
    }

    pub fn targets(&self) -> Vec<u32> {
        displaced_targets(&self.grid, self.subjects, self.w.as_ref())
    }

    fn w_sum_sq(&self) -> (f64, usize) {
        match &self.w {
            Some(ds) => (ds.sum_sq(), ds.weights().len()),
            None => (0.0, 0),
        }
    }
}

/// Complete-data sufficient statistics: S_S and S_j = ½(N_j, SS_j, 2β + Σμ², 2γΣμ).
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub spatial: f64,
    pub regions: Vec<[f64; 4]>,
}

impl SuffStats {
    pub fn zeros(regions: usize) -> Self {
        Self {
            spatial: 0.0,
            regions: vec![[0.0; 4]; regions],
        }
    }

    /// s ← s + c (S − s).
    pub fn blend(&mut self, other: &SuffStats, c: f64) {
        self.spatial += c * (other.spatial - self.spatial);
        for (a, b) in self.regions.iter_mut().zip(&other.regions) {
            for q in 0..4 {
                a[q] += c * (b[q] - a[q]);
            }
        }
    }
}

pub fn stats_from_parts(
    x: &[f64],
    mu: &[f64],
    targets: &[u32],
    w_sum_sq: f64,
    gamma: &Network,
    parc: &Parcellation,
    h: &Hyperparams,
) -> SuffStats {
    let nreg = parc.region_count();
    let mut s = SuffStats::zeros(nreg);
    s.spatial = h.beta + 0.5 * w_sum_sq;
    for (o, &k) in targets.iter().enumerate() {
        let j = parc.label(k as usize);
        let r = x[o] - mu[k as usize];
        s.regions[j][0] += 0.5;
        s.regions[j][1] += 0.5 * r * r;
    }
    for j in 0..nreg {
        s.regions[j][2] = h.beta;
    }
    for (k, &m) in mu.iter().enumerate() {
        let j = parc.label(k);
        s.regions[j][2] += 0.5 * m * m;
        if gamma.get(j) {
            s.regions[j][3] += m;
        }
    }
    s
}

pub fn sufficient_stats(state: &LatentState, gamma: &Network, parc: &Parcellation, h: &Hyperparams) -> SuffStats {
    let t = state.targets();
    let (ss, _) = state.w_sum_sq();
    stats_from_parts(&state.x, &state.mu, &t, ss, gamma, parc, h)
}

/// log π(θ | γ) + log π(γ). The spatial-variance prior enters only when σ_S² > 0.
pub fn log_prior(theta: &GroupParams, gamma: &Network, h: &Hyperparams) -> Result<f64> {
    theta.validate(gamma, false)?;
    let mut lp = 0.0;
    for j in 0..theta.regions() {
        let p = h.p(j);
        if gamma.get(j) {
            lp += p.ln() + ln_normal(theta.eta[j], h.m, theta.nu2[j] / h.lambda);
        } else {
            lp += (1.0 - p).ln();
        }
        lp += ln_inv_gamma(theta.nu2[j], h.alpha, h.beta);
        lp += ln_inv_gamma(theta.sigma2[j], h.alpha, h.beta);
    }
    if theta.sigma_s2 > 0.0 {
        lp += ln_inv_gamma(theta.sigma_s2, h.alpha, h.beta);
    }
    Ok(lp)
}

/// log π(θ | γ) without the Bernoulli network term.
pub fn log_param_prior(theta: &GroupParams, gamma: &Network, h: &Hyperparams) -> Result<f64> {
    let net: f64 = (0..gamma.len())
        .map(|j| if gamma.get(j) { h.p(j).ln() } else { (1.0 - h.p(j)).ln() })
        .sum();
    Ok(log_prior(theta, gamma, h)? - net)
}

/// log f(y, z, θ | γ) for the full hierarchical model.
pub fn log_complete(
    obs: &Observations,
    state: &LatentState,
    theta: &GroupParams,
    gamma: &Network,
    parc: &Parcellation,
    h: &Hyperparams,
) -> Result<f64> {
    let t = state.targets();
    let mut lp = log_param_prior(theta, gamma, h)?;
    for o in 0..obs.y.len() {
        if obs.s2[o] > 0.0 {
            lp += ln_normal(obs.y[o], state.x[o], obs.s2[o]);
        }
        let k = t[o] as usize;
        lp += ln_normal(state.x[o], state.mu[k], theta.sigma2[parc.label(k)]);
    }
    for (k, &m) in state.mu.iter().enumerate() {
        let j = parc.label(k);
        lp += ln_normal(m, theta.eta[j], theta.nu2[j]);
    }
    if let Some(ds) = &state.w {
        if theta.sigma_s2 > 0.0 {
            lp += ln_normal_iso(ds.weights(), theta.sigma_s2);
        }
    }
    Ok(lp)
}

/// ⟨S, φ(θ)⟩ + ψ(θ): the θ-dependent part of −log f(y, z, θ), up to constants in z.
///
/// `w_count` is rank·n·B (0 in no-SU mode, which drops the spatial term).
pub fn neg_log_complete_from_stats(
    s: &SuffStats,
    theta: &GroupParams,
    gamma: &Network,
    parc: &Parcellation,
    h: &Hyperparams,
    w_count: usize,
) -> f64 {
    let mut v = 0.0;
    for j in 0..parc.region_count() {
        let [s1, s2, s3, s4] = s.regions[j];
        let d = parc.sizes()[j] as f64;
        let g = if gamma.get(j) { 1.0 } else { 0.0 };
        let sig = theta.sigma2[j];
        v += (h.alpha + 1.0 + s1) * sig.ln() + (h.beta + s2) / sig;
        let nu = theta.nu2[j];
        let eta = theta.eta[j];
        let quad = if gamma.get(j) {
            s3 - eta * s4 + (d + h.lambda) * eta * eta / 2.0 + h.lambda * h.m * (h.m / 2.0 - eta)
        } else {
            s3
        };
        v += (h.alpha + 1.0 + (d + g) / 2.0) * nu.ln() + quad / nu;
    }
    if w_count > 0 {
        v += (h.alpha + 1.0 + w_count as f64 / 2.0) * theta.sigma_s2.ln() + s.spatial / theta.sigma_s2;
    }
    v
}
