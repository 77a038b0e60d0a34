//! Synthetic data: warped phantoms with heteroscedastic noise, sparse Gaussian means
//! and random atlases.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::{displace_index, KERNEL_CUTOFF};
use crate::error::{Error, Result};
use crate::volume::{Parcellation, ScalarMap, SubjectData, VoxelGrid};

/// Ground-truth signal geometry. Coordinates are in voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Signal {
    /// Sum of Gaussian bumps on a line.
    Bumps {
        centers: Vec<f64>,
        widths: Vec<f64>,
        height: f64,
    },
    /// Uniform disc (2D) or ball (3D) at the grid centre.
    Disc { diameter: f64, value: f64 },
    /// Uniform balls at the given centres.
    Spheres {
        centers: Vec<[f64; 3]>,
        diameter: f64,
        value: f64,
    },
    /// Gaussian peaks with standard deviation `radius`.
    Peaks {
        centers: Vec<[f64; 3]>,
        radius: f64,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    pub signal: Signal,
    /// Gaussian pre-smoothing of the signal (std, voxels); 0 disables.
    pub smoothing: f64,
    /// Kernel width of the simulated deformation (one control point per voxel).
    pub omega: f64,
    /// Marginal displacement std per axis (voxels).
    pub sigma_s: f64,
    /// Between-subject std.
    pub sigma: f64,
    /// Noise level: s² = ε²·χ²(1).
    pub epsilon: f64,
    pub subjects: usize,
    pub seed: u64,
}

impl PhantomSpec {
    /// 50-voxel line with three bumps, two of them close together.
    pub fn bumps_1d(seed: u64) -> Self {
        Self {
            dims: vec![50],
            signal: Signal::Bumps {
                centers: vec![10.0, 25.0, 33.0],
                widths: vec![2.0, 2.0, 2.0],
                height: 5.0,
            },
            smoothing: 0.0,
            omega: 6.5,
            sigma_s: 3.0,
            sigma: 1.0,
            epsilon: 4.0,
            subjects: 40,
            seed,
        }
    }

    /// 24×24 central disc of diameter 7.
    pub fn disc_2d(seed: u64) -> Self {
        Self {
            dims: vec![24, 24],
            signal: Signal::Disc {
                diameter: 7.0,
                value: 5.0,
            },
            smoothing: 0.0,
            omega: 4.0,
            sigma_s: 1.0,
            sigma: 1.0,
            epsilon: 1.0,
            subjects: 30,
            seed,
        }
    }

    /// Cubic grid with a central ball of diameter 7.
    pub fn sphere_3d(side: usize, omega: f64, epsilon: f64, seed: u64) -> Self {
        Self {
            dims: vec![side; 3],
            signal: Signal::Disc {
                diameter: 7.0,
                value: 5.0,
            },
            smoothing: 0.0,
            omega,
            sigma_s: 1.0,
            sigma: 1.0,
            epsilon,
            subjects: 30,
            seed,
        }
    }

    /// 24×32×32 with two nearby balls of diameter 7, lightly smoothed.
    pub fn two_spheres_3d(seed: u64) -> Self {
        Self {
            dims: vec![24, 32, 32],
            signal: Signal::Spheres {
                centers: vec![[12.0, 16.0, 11.0], [12.0, 16.0, 21.0]],
                diameter: 7.0,
                value: 5.0,
            },
            smoothing: 0.5,
            omega: 4.0,
            sigma_s: 2.0,
            sigma: 1.0,
            epsilon: 1.0,
            subjects: 40,
            seed,
        }
    }

    fn validate(&self) -> Result<VoxelGrid> {
        let grid = VoxelGrid::new(&self.dims)?;
        if self.subjects < 1 {
            return Err(Error::InvalidArgument("at least one subject is required".into()));
        }
        let finite = [self.smoothing, self.omega, self.sigma_s, self.sigma, self.epsilon];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "phantom scales must be finite and non-negative".into(),
            ));
        }
        if self.sigma_s > 0.0 && self.omega <= 0.0 {
            return Err(Error::InvalidArgument("omega must be positive when sigma_s > 0".into()));
        }
        let value = match &self.signal {
            Signal::Bumps {
                centers,
                widths,
                height,
            } => {
                if grid.rank() != 1 || centers.len() != widths.len() {
                    return Err(Error::InvalidArgument(
                        "bumps need a 1D grid and one width per centre".into(),
                    ));
                }
                *height
            }
            Signal::Disc { diameter, value } => {
                if grid.rank() < 2 || grid.dims().iter().any(|&n| (n as f64) < *diameter) {
                    return Err(Error::InvalidArgument("disc does not fit in the grid".into()));
                }
                *value
            }
            Signal::Spheres {
                centers,
                diameter,
                value,
            } => {
                let r = diameter / 2.0;
                for c in centers {
                    for a in 0..grid.rank() {
                        if c[a] - r < -0.5 || c[a] + r > grid.dims()[a] as f64 - 0.5 {
                            return Err(Error::InvalidArgument(format!("sphere at {c:?} exceeds the grid")));
                        }
                    }
                }
                *value
            }
            Signal::Peaks { centers, value, .. } => {
                for c in centers {
                    if (0..grid.rank()).any(|a| c[a] < 0.0 || c[a] > (grid.dims()[a] - 1) as f64) {
                        return Err(Error::InvalidArgument(format!("peak at {c:?} lies outside the grid")));
                    }
                }
                *value
            }
        };
        if !value.is_finite() {
            return Err(Error::InvalidArgument("signal value must be finite".into()));
        }
        Ok(grid)
    }
}

/// Generated data with its ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub subjects: Vec<SubjectData>,
    /// Population template (after pre-smoothing).
    pub truth_mu: ScalarMap,
    /// Per-subject displacement fields, laid out subject × voxel × axis.
    pub truth_u: Vec<f64>,
    /// Background is region 0; object j is region j + 1. Bumps give a single region.
    pub parcellation: Parcellation,
}

fn point(grid: &VoxelGrid, k: usize) -> [f64; 3] {
    let c = grid.coords(k);
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn dist2(a: &[f64; 3], b: &[f64; 3], rank: usize) -> f64 {
    (0..rank).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Noise-free template and object membership.
fn render(grid: &VoxelGrid, signal: &Signal) -> (Vec<f64>, Vec<u32>) {
    let d = grid.len();
    let r = grid.rank();
    let mut mu = vec![0.0; d];
    let mut lab = vec![0u32; d];
    match signal {
        Signal::Bumps {
            centers,
            widths,
            height,
        } => {
            for k in 0..d {
                let x = k as f64;
                mu[k] = centers
                    .iter()
                    .zip(widths)
                    .map(|(c, w)| height * (-(x - c) * (x - c) / (2.0 * w * w)).exp())
                    .sum();
            }
        }
        Signal::Disc { diameter, value } => {
            let e = grid.extents();
            let c = [(e[0] / 2) as f64, (e[1] / 2) as f64, (e[2] / 2) as f64];
            let r2 = diameter * diameter / 4.0;
            for k in 0..d {
                if dist2(&point(grid, k), &c, r) <= r2 {
                    mu[k] = *value;
                    lab[k] = 1;
                }
            }
        }
        Signal::Spheres {
            centers,
            diameter,
            value,
        } => {
            let r2 = diameter * diameter / 4.0;
            for k in 0..d {
                let p = point(grid, k);
                if let Some(j) = centers.iter().position(|c| dist2(&p, c, r) <= r2) {
                    mu[k] = *value;
                    lab[k] = j as u32 + 1;
                }
            }
        }
        Signal::Peaks { centers, radius, value } => {
            for k in 0..d {
                let p = point(grid, k);
                mu[k] = centers
                    .iter()
                    .map(|c| value * (-dist2(&p, c, r) / (2.0 * radius * radius)).exp())
                    .fold(0.0, f64::max);
            }
        }
    }
    (mu, lab)
}

/// Separable convolution with exp(−t²/2s²) truncated at `cutoff`·s, zero outside the
/// grid. `normalize` rescales the 1D kernel to unit sum.
pub fn gaussian_filter(grid: &VoxelGrid, values: &[f64], s: f64, cutoff: f64, normalize: bool) -> Vec<f64> {
    let rad = (cutoff * s).ceil() as isize;
    let mut kern: Vec<f64> = (-rad..=rad).map(|t| (-(t * t) as f64 / (2.0 * s * s)).exp()).collect();
    if normalize {
        let z: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|v| *v /= z);
    }
    let e = grid.extents();
    let stride = [e[1] * e[2], e[2], 1];
    let mut cur = values.to_vec();
    let mut out = vec![0.0; values.len()];
    for a in 0..grid.rank() {
        let n = e[a] as isize;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..values.len() {
            let c = ((k / stride[a]) % e[a]) as isize;
            let lo = (-rad).max(-c);
            let hi = rad.min(n - 1 - c);
            let mut acc = 0.0;
            for t in lo..=hi {
                let nb = (k as isize + t * stride[a] as isize) as usize;
                acc += kern[(t + rad) as usize] * cur[nb];
            }
            out[k] = acc;
        }
        std::mem::swap(&mut cur, &mut out);
    }
    cur
}

/// Dense per-voxel deformation: kernel-smoothed white noise rescaled to marginal std
/// `sigma_s` per axis.
fn sample_field(grid: &VoxelGrid, omega: f64, sigma_s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = grid.len();
    let r = grid.rank();
    let mut u = vec![0.0; d * r];
    if sigma_s == 0.0 {
        return u;
    }
    // Σ K² over an unbounded lattice, one factor per axis
    let rad = (KERNEL_CUTOFF * omega).ceil() as i64;
    let axis: f64 = (-rad..=rad).map(|t| (-(t * t) as f64 / (omega * omega)).exp()).sum();
    let scale = sigma_s / axis.powi(r as i32).sqrt();
    for a in 0..r {
        let noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let f = gaussian_filter(grid, &noise, omega, KERNEL_CUTOFF, false);
        for k in 0..d {
            u[k * r + a] = scale * f[k];
        }
    }
    u
}

fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Warp, add between-subject and measurement noise. Shared by every phantom.
fn simulate_subjects(spec: &PhantomSpec, grid: &VoxelGrid, mu: &[f64]) -> Result<(Vec<SubjectData>, Vec<f64>)> {
    let d = grid.len();
    let r = grid.rank();
    let mut subjects = Vec::with_capacity(spec.subjects);
    let mut truth_u = Vec::with_capacity(spec.subjects * d * r);
    for i in 0..spec.subjects {
        let mut rng = subject_rng(spec.seed, i);
        let u = sample_field(grid, spec.omega, spec.sigma_s, &mut rng);
        let mut y = vec![0.0; d];
        let mut s2 = vec![0.0; d];
        for k in 0..d {
            let src = displace_index(grid, k, &u[k * r..k * r + r]);
            let z: f64 = StandardNormal.sample(&mut rng);
            s2[k] = spec.epsilon * spec.epsilon * z * z;
            let x = mu[src] + spec.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            y[k] = x + s2[k].sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        truth_u.extend_from_slice(&u);
        subjects.push(SubjectData::new(
            ScalarMap::new(grid.clone(), y)?,
            ScalarMap::new(grid.clone(), s2)?,
        )?);
    }
    Ok((subjects, truth_u))
}

fn generate(spec: &PhantomSpec, grid: VoxelGrid) -> Result<Phantom> {
    let (mut mu, lab) = render(&grid, &spec.signal);
    if spec.smoothing > 0.0 {
        mu = gaussian_filter(&grid, &mu, spec.smoothing, KERNEL_CUTOFF, true);
    }
    let (subjects, truth_u) = simulate_subjects(spec, &grid, &mu)?;
    Ok(Phantom {
        subjects,
        truth_mu: ScalarMap::new(grid.clone(), mu)?,
        truth_u,
        parcellation: Parcellation::from_labels(grid, lab)?,
    })
}

/// Line phantom; the grid must have rank 1.
pub fn gen_1d(spec: &PhantomSpec) -> Result<Phantom> {
    let grid = spec.validate()?;
    if grid.rank() != 1 {
        return Err(Error::InvalidArgument("gen_1d needs a rank-1 grid".into()));
    }
    generate(spec, grid)
}

/// 2D or 3D phantom.
pub fn gen_grid_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let grid = spec.validate()?;
    if grid.rank() < 2 {
        return Err(Error::InvalidArgument(
            "gen_grid_phantom needs a rank-2 or rank-3 grid".into(),
        ));
    }
    generate(spec, grid)
}

/// Peak phantom over a given atlas.
///
/// A region is truly active when it meets the core of some peak: a voxel within one
/// kernel radius of a centre, or the voxel nearest the centre. A peak placed where
/// several regions meet therefore activates all of them.
pub fn gen_atlas_phantom(spec: &PhantomSpec, atlas: &Parcellation) -> Result<(Phantom, Vec<bool>)> {
    let grid = spec.validate()?;
    if atlas.grid() != &grid {
        return Err(Error::Shape("atlas grid differs from the phantom grid".into()));
    }
    let Signal::Peaks { centers, radius, .. } = &spec.signal else {
        return Err(Error::InvalidArgument("atlas phantoms use peak signals".into()));
    };
    let r = grid.rank();
    let mut active = vec![false; atlas.region_count()];
    for c in centers {
        let mut nearest = [0; 3];
        for a in 0..r {
            nearest[a] = c[a].round() as usize;
        }
        active[atlas.label(grid.index(nearest))] = true;
        for k in 0..grid.len() {
            if dist2(&point(&grid, k), c, r) <= radius * radius {
                active[atlas.label(k)] = true;
            }
        }
    }
    let mut ph = generate(spec, grid)?;
    ph.parcellation = atlas.clone();
    Ok((ph, active))
}

/// First `active` means uniform on [a, b], the rest zero, plus unit Gaussian noise.
pub fn gen_sparse_means(n: usize, active: usize, a: f64, b: f64, seed: u64) -> Result<(Vec<f64>, Vec<bool>)> {
    if active > n {
        return Err(Error::InvalidArgument(format!("{active} active means out of {n}")));
    }
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(Error::InvalidArgument(format!("invalid range [{a}, {b}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let m = if i < active {
            if a == b {
                a
            } else {
                rng.random_range(a..=b)
            }
        } else {
            0.0
        };
        let z: f64 = StandardNormal.sample(&mut rng);
        y.push(m + z);
    }
    Ok((y, (0..n).map(|i| i < active).collect()))
}

/// Voronoi partition around `n` random seed voxels under face-path distance.
pub fn synth_atlas(grid: &VoxelGrid, n: usize, seed: u64) -> Result<Parcellation> {
    synth_atlas_masked(grid, n, seed, None)
}

/// As [`synth_atlas`]; with a mask, voxels outside it form region 0 and the `n` regions
/// are labelled 1..=n within the mask's reach.
pub fn synth_atlas_masked(grid: &VoxelGrid, n: usize, seed: u64, mask: Option<&[bool]>) -> Result<Parcellation> {
    let d = grid.len();
    let inside: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != d {
                return Err(Error::Shape("mask length differs from the grid".into()));
            }
            (0..d).filter(|&k| m[k]).collect()
        }
        None => (0..d).collect(),
    };
    if n == 0 || n > inside.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot place {n} regions in {} voxels",
            inside.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<usize> = sample(&mut rng, inside.len(), n)
        .into_iter()
        .map(|i| inside[i])
        .collect();
    seeds.sort_unstable();
    let off = u32::from(mask.is_some());
    let mut lab = vec![u32::MAX; d];
    let mut queue = VecDeque::new();
    for (j, &s) in seeds.iter().enumerate() {
        lab[s] = j as u32 + off;
        queue.push_back(s);
    }
    let mut nb = Vec::with_capacity(6);
    while let Some(k) = queue.pop_front() {
        grid.face_neighbors(k, &mut nb);
        for &q in &nb {
            if lab[q] == u32::MAX && mask.is_none_or(|m| m[q]) {
                lab[q] = lab[k];
                queue.push_back(q);
            }
        }
    }
    // unreachable masked-in voxels and masked-out voxels go to the background
    if mask.is_some() {
        lab.iter_mut().filter(|l| **l == u32::MAX).for_each(|l| *l = 0);
        Parcellation::new(grid.clone(), lab, n + 1)
    } else {
        Parcellation::new(grid.clone(), lab, n)
    }
}
