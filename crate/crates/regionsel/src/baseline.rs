//! Mass-univariate voxel and cluster inference: one-sample t maps, Bonferroni and
//! Benjamini-Hochberg adjustment, and sign-flip calibration of the maximum statistic
//! and of the maximum cluster size.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::samplers::{rng_from_seed, Rng};
use crate::volume::{common_grid, mask_components, SubjectData, VoxelGrid};

/// Voxelwise t statistics; NaN marks voxels where the statistic is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct StatMap {
    pub grid: VoxelGrid,
    pub values: Vec<f64>,
    pub df: usize,
}

impl StatMap {
    pub fn is_defined(&self, k: usize) -> bool {
        !self.values[k].is_nan()
    }

    /// One-sided upper-tail p-values; undefined voxels get 1.
    pub fn p_values(&self) -> Vec<f64> {
        let t = student(self.df);
        self.values
            .iter()
            .map(|&v| if v.is_nan() { 1.0 } else { t.sf(v) })
            .collect()
    }
}

fn student(df: usize) -> StudentsT {
    StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom")
}

/// t value for a sample with the given mean and mean squared deviation.
#[inline]
fn t_value(mean: f64, msd: f64, n: usize) -> f64 {
    if msd > 0.0 {
        mean * ((n - 1) as f64).sqrt() / msd.sqrt()
    } else if mean == 0.0 {
        f64::NAN
    } else {
        mean.signum() * f64::INFINITY
    }
}

fn effect_rows(subjects: &[SubjectData]) -> Result<(&VoxelGrid, Vec<&[f64]>)> {
    let grid = common_grid(subjects)?;
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a t map needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    Ok((grid, subjects.iter().map(|s| s.effects().values()).collect()))
}

/// t map of sign-flipped rows; `signs` of ±1 per subject.
fn flipped_t(rows: &[&[f64]], signs: &[f64], mean: &mut [f64], msd: &mut [f64], out: &mut [f64]) {
    let n = rows.len();
    mean.iter_mut().for_each(|v| *v = 0.0);
    msd.iter_mut().for_each(|v| *v = 0.0);
    for (r, &s) in rows.iter().zip(signs) {
        for (m, &y) in mean.iter_mut().zip(r.iter()) {
            *m += s * y;
        }
    }
    let inv = 1.0 / n as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    for (r, &s) in rows.iter().zip(signs) {
        for ((q, &y), &m) in msd.iter_mut().zip(r.iter()).zip(mean.iter()) {
            let d = s * y - m;
            *q += d * d;
        }
    }
    for ((o, &m), &q) in out.iter_mut().zip(mean.iter()).zip(msd.iter()) {
        *o = t_value(m, q * inv, n);
    }
}

/// T = mean / (population std / sqrt(n-1)) at every voxel.
pub fn t_map(subjects: &[SubjectData]) -> Result<StatMap> {
    let (grid, rows) = effect_rows(subjects)?;
    let d = grid.len();
    let (mut mean, mut msd, mut values) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    flipped_t(&rows, &vec![1.0; rows.len()], &mut mean, &mut msd, &mut values);
    Ok(StatMap {
        grid: grid.clone(),
        values,
        df: rows.len() - 1,
    })
}

// ----------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    Bonferroni,
    Bh,
    MaxT,
    ClusterSize,
}

impl std::str::FromStr for Procedure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bonferroni" => Ok(Procedure::Bonferroni),
            "bh" | "fdr" => Ok(Procedure::Bh),
            "maxt" | "max-t" => Ok(Procedure::MaxT),
            "cluster" | "cluster-size" => Ok(Procedure::ClusterSize),
            _ => Err(Error::InvalidArgument(format!("unknown procedure '{s}'"))),
        }
    }
}

/// A surviving suprathreshold cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub voxels: Vec<usize>,
    pub peak_value: f64,
    pub peak_voxel: usize,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipleTestResult {
    pub procedure: Procedure,
    pub alpha: f64,
    /// Rejected voxels, ascending.
    pub rejected: Vec<usize>,
    /// p-value cutoff (Bonferroni, BH) or statistic threshold (maxT, cluster forming).
    pub threshold: f64,
    /// Critical cluster size; clusters must be strictly larger.
    pub critical_size: Option<usize>,
    pub clusters: Vec<Cluster>,
}

fn check_level(a: f64, what: &str) -> Result<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must lie in (0,1), got {a}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjustment {
    Bonferroni,
    Bh,
}

pub fn adjust_pvalues(p: &[f64], method: Adjustment, alpha: f64) -> Result<MultipleTestResult> {
    check_level(alpha, "alpha")?;
    if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!("p-value {} at {i} outside [0,1]", p[i])));
    }
    let d = p.len() as f64;
    let (procedure, threshold, rejected) = match method {
        Adjustment::Bonferroni => {
            let cut = alpha / d;
            (
                Procedure::Bonferroni,
                cut,
                (0..p.len()).filter(|&k| p[k] < cut).collect::<Vec<_>>(),
            )
        }
        Adjustment::Bh => {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            let kstar = (1..=p.len())
                .rev()
                .find(|&k| p[order[k - 1]] <= k as f64 * alpha / d)
                .unwrap_or(0);
            let mut rej = order[..kstar].to_vec();
            rej.sort_unstable();
            (Procedure::Bh, kstar as f64 * alpha / d, rej)
        }
    };
    Ok(MultipleTestResult {
        procedure,
        alpha,
        rejected,
        threshold,
        critical_size: None,
        clusters: Vec::new(),
    })
}

// ----------------------------------------------------------------------------
// Sign-flip calibration

fn random_signs(rng: &mut Rng, n: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }));
}

/// Maximum over defined, finite voxels; 0 when there are none.
fn max_defined(t: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in t {
        if v.is_finite() && v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY {
        0.0
    } else {
        m
    }
}

/// Largest face-connected cluster with t > u.
fn max_cluster(grid: &VoxelGrid, t: &[f64], u: f64) -> usize {
    let mask: Vec<bool> = t.iter().map(|&v| v > u).collect();
    mask_components(grid, &mask).iter().map(Vec::len).max().unwrap_or(0)
}

/// Null samples of a map functional over the given sign patterns.
fn sign_flip_null<I, F>(subjects: &[SubjectData], patterns: I, mut functional: F) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = Vec<f64>>,
    F: FnMut(&VoxelGrid, &[f64]) -> f64,
{
    let (grid, rows) = effect_rows(subjects)?;
    let d = grid.len();
    let (mut mean, mut msd, mut t) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut out = Vec::new();
    for s in patterns {
        if s.len() != rows.len() {
            return Err(Error::Shape(format!("{} signs for {} subjects", s.len(), rows.len())));
        }
        flipped_t(&rows, &s, &mut mean, &mut msd, &mut t);
        out.push(functional(grid, &t));
    }
    Ok(out)
}

/// Null distribution of max_k T_k over explicit sign patterns.
pub fn max_t_null<I: IntoIterator<Item = Vec<f64>>>(subjects: &[SubjectData], patterns: I) -> Result<Vec<f64>> {
    sign_flip_null(subjects, patterns, |_, t| max_defined(t))
}

/// All 2^n sign patterns, the identity first.
pub fn all_sign_patterns(n: usize) -> impl Iterator<Item = Vec<f64>> {
    assert!(n < 32, "too many subjects to enumerate");
    (0u32..(1 << n)).map(move |b| (0..n).map(|i| if b >> i & 1 == 1 { -1.0 } else { 1.0 }).collect())
}

fn random_patterns(n: usize, reps: usize, seed: u64) -> impl Iterator<Item = Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..reps).map(move |_| {
        let mut s = Vec::with_capacity(n);
        random_signs(&mut rng, n, &mut s);
        s
    })
}

/// Empirical (1-α) quantile.
fn upper_quantile(mut v: Vec<f64>, alpha: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let r = v.len();
    let idx = (((1.0 - alpha) * r as f64).ceil() as usize).clamp(1, r) - 1;
    v[idx]
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 sign-flip replicates, got {reps}"
        )));
    }
    Ok(())
}

pub fn permutation_max_t(subjects: &[SubjectData], alpha: f64, reps: usize, seed: u64) -> Result<MultipleTestResult> {
    check_level(alpha, "alpha")?;
    check_reps(reps)?;
    let null = max_t_null(subjects, random_patterns(subjects.len(), reps, seed))?;
    let u = upper_quantile(null, alpha);
    let t = t_map(subjects)?;
    Ok(MultipleTestResult {
        procedure: Procedure::MaxT,
        alpha,
        rejected: (0..t.values.len()).filter(|&k| t.values[k] > u).collect(),
        threshold: u,
        critical_size: None,
        clusters: Vec::new(),
    })
}

/// Clusters of the observed map above `u`, ordered by smallest voxel.
pub fn clusters_above(t: &StatMap, u: f64) -> Vec<Cluster> {
    let mask: Vec<bool> = t.values.iter().map(|&v| v > u).collect();
    mask_components(&t.grid, &mask)
        .into_iter()
        .enumerate()
        .map(|(id, voxels)| {
            let mut peak_voxel = voxels[0];
            for &k in &voxels {
                if t.values[k] > t.values[peak_voxel] {
                    peak_voxel = k;
                }
            }
            Cluster {
                id,
                peak_value: t.values[peak_voxel],
                peak_voxel,
                voxels,
            }
        })
        .collect()
}

pub fn cluster_size_test(
    subjects: &[SubjectData],
    forming_alpha: f64,
    fwer_alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<MultipleTestResult> {
    check_level(forming_alpha, "cluster-forming level")?;
    check_level(fwer_alpha, "fwer level")?;
    check_reps(reps)?;
    let t = t_map(subjects)?;
    let u = student(t.df).inverse_cdf(1.0 - forming_alpha);
    let null = sign_flip_null(subjects, random_patterns(subjects.len(), reps, seed), |g, tv| {
        max_cluster(g, tv, u) as f64
    })?;
    let critical = upper_quantile(null, fwer_alpha) as usize;
    let clusters: Vec<Cluster> = clusters_above(&t, u)
        .into_iter()
        .filter(|c| c.size() > critical)
        .enumerate()
        .map(|(id, c)| Cluster { id, ..c })
        .collect();
    let mut rejected: Vec<usize> = clusters.iter().flat_map(|c| c.voxels.iter().copied()).collect();
    rejected.sort_unstable();
    Ok(MultipleTestResult {
        procedure: Procedure::ClusterSize,
        alpha: fwer_alpha,
        rejected,
        threshold: u,
        critical_size: Some(critical),
        clusters,
    })
}
