//! Gaussian-kernel deformation fields driven by weights at control points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, Volume, VoxelGrid};

/// Kernel support radius in units of ω. exp(-16/2) ≈ 3.4e-4.
pub const KERNEL_CUTOFF: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    #[default]
    Truncated,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlLattice {
    grid: VoxelGrid,
    points: Vec<[usize; 3]>,
    omega: f64,
}

impl ControlLattice {
    pub fn new(grid: VoxelGrid, points: Vec<[usize; 3]>, omega: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument(
                "lattice needs at least one control point".into(),
            ));
        }
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel width must be positive, got {omega}"
            )));
        }
        let ext = grid.extents();
        if points.iter().any(|p| (0..3).any(|a| p[a] >= ext[a])) {
            return Err(Error::InvalidArgument("control point outside the grid".into()));
        }
        Ok(Self { grid, points, omega })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn points(&self) -> &[[usize; 3]] {
        &self.points
    }

    /// Number of control points B.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    #[inline]
    pub fn kernel(&self, b: usize, k: usize) -> f64 {
        let c = self.grid.coords(k);
        let p = self.points[b];
        let d2: f64 = (0..3)
            .map(|a| {
                let d = c[a] as f64 - p[a] as f64;
                d * d
            })
            .sum();
        (-d2 / (2.0 * self.omega * self.omega)).exp()
    }
}

/// Axis positions: spacing 2ω, at least 2.5ω from either boundary, centred in the
/// admissible interval; one point at the axis centre when none fit.
fn axis_positions(len: usize, omega: f64) -> Vec<usize> {
    let lo = 2.5 * omega;
    let hi = (len as f64 - 1.0) - 2.5 * omega;
    let spacing = 2.0 * omega;
    if hi < lo {
        return vec![((len as f64 - 1.0) / 2.0).round() as usize];
    }
    let count = ((hi - lo) / spacing).floor() as usize + 1;
    let span = (count - 1) as f64 * spacing;
    let start = lo + ((hi - lo) - span) / 2.0;
    (0..count)
        .map(|i| (start + i as f64 * spacing).round() as usize)
        .collect()
}

/// Regular control lattice for a grid and kernel width ω.
pub fn build_lattice(grid: &VoxelGrid, omega: f64) -> Result<ControlLattice> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "kernel width must be positive, got {omega}"
        )));
    }
    let ext = grid.extents();
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            if a < grid.rank() {
                axis_positions(ext[a], omega)
            } else {
                vec![0]
            }
        })
        .collect();
    let mut points = Vec::new();
    for &p0 in &per_axis[0] {
        for &p1 in &per_axis[1] {
            for &p2 in &per_axis[2] {
                points.push([p0, p1, p2]);
            }
        }
    }
    ControlLattice::new(grid.clone(), points, omega)
}

/// Per-subject weights w_{i,b} ∈ R^rank, stored subject-major then control point.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSet {
    lattice: ControlLattice,
    subjects: usize,
    weights: Vec<f64>,
}

impl DisplacementSet {
    pub fn zeros(lattice: ControlLattice, subjects: usize) -> Self {
        let len = subjects * lattice.len() * lattice.grid().rank();
        Self {
            lattice,
            subjects,
            weights: vec![0.0; len],
        }
    }

    pub fn from_weights(lattice: ControlLattice, subjects: usize, weights: Vec<f64>) -> Result<Self> {
        let len = subjects * lattice.len() * lattice.grid().rank();
        if weights.len() != len {
            return Err(Error::Shape(format!(
                "expected {len} weights for {subjects} subjects, got {}",
                weights.len()
            )));
        }
        if let Some(k) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        Ok(Self {
            lattice,
            subjects,
            weights,
        })
    }

    pub fn lattice(&self) -> &ControlLattice {
        &self.lattice
    }

    pub fn subjects(&self) -> usize {
        self.subjects
    }

    pub fn rank(&self) -> usize {
        self.lattice.grid().rank()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Weight vector of subject i at control point b.
    pub fn weight(&self, i: usize, b: usize) -> &[f64] {
        let r = self.rank();
        let o = (i * self.lattice.len() + b) * r;
        &self.weights[o..o + r]
    }

    pub fn set_weight(&mut self, i: usize, b: usize, w: &[f64]) {
        let r = self.rank();
        let o = (i * self.lattice.len() + b) * r;
        self.weights[o..o + r].copy_from_slice(w);
    }

    pub fn sum_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Displacement field of one subject, `d × rank` values (voxel-major).
pub fn interpolate_field(ds: &DisplacementSet, subject: usize) -> Vec<f64> {
    interpolate_field_with(ds, subject, KernelMode::Truncated)
}

pub fn interpolate_field_with(ds: &DisplacementSet, subject: usize, mode: KernelMode) -> Vec<f64> {
    assert!(subject < ds.subjects, "subject index out of range");
    let lat = ds.lattice();
    let grid = lat.grid();
    let r = grid.rank();
    let mut u = vec![0.0; grid.len() * r];
    let table = KernelTable::new(lat, mode);
    for b in 0..lat.len() {
        let w = ds.weight(subject, b);
        for &(k, kv) in table.support(b) {
            let k = k as usize;
            for a in 0..r {
                u[k * r + a] += kv * w[a];
            }
        }
    }
    u
}

/// Shift voxel k by u rounded half away from zero per axis, clamped into the grid.
#[inline]
pub fn displace_index(grid: &VoxelGrid, k: usize, u: &[f64]) -> usize {
    let c = grid.coords(k);
    let ext = grid.extents();
    let mut out = c;
    for a in 0..grid.rank() {
        let t = c[a] as f64 + u[a].round();
        out[a] = t.clamp(0.0, (ext[a] - 1) as f64) as usize;
    }
    grid.index(out)
}

/// Kernel values of each control point over its support.
#[derive(Debug, Clone)]
pub struct KernelTable {
    support: Vec<Vec<(u32, f64)>>,
}

impl KernelTable {
    pub fn new(lattice: &ControlLattice, mode: KernelMode) -> Self {
        let grid = lattice.grid();
        let omega = lattice.omega();
        let radius = KERNEL_CUTOFF * omega;
        let ext = grid.extents();
        let support = lattice
            .points()
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let mut s = Vec::new();
                let range = |a: usize| -> (usize, usize) {
                    if mode == KernelMode::Exact || a >= grid.rank() {
                        (0, ext[a] - 1)
                    } else {
                        let lo = (p[a] as f64 - radius).ceil().max(0.0) as usize;
                        let hi = ((p[a] as f64 + radius).floor() as usize).min(ext[a] - 1);
                        (lo, hi)
                    }
                };
                let (l0, h0) = range(0);
                let (l1, h1) = range(1);
                let (l2, h2) = range(2);
                for c0 in l0..=h0 {
                    for c1 in l1..=h1 {
                        for c2 in l2..=h2 {
                            let k = grid.index([c0, c1, c2]);
                            let d2 = [c0, c1, c2]
                                .iter()
                                .zip(p.iter())
                                .map(|(&c, &q)| {
                                    let d = c as f64 - q as f64;
                                    d * d
                                })
                                .sum::<f64>();
                            if mode == KernelMode::Exact || d2 <= radius * radius {
                                s.push((k as u32, lattice.kernel(b, k)));
                            }
                        }
                    }
                }
                s
            })
            .collect();
        Self { support }
    }

    pub fn support(&self, b: usize) -> &[(u32, f64)] {
        &self.support[b]
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeSidecar {
    pub dims: Vec<usize>,
    pub omega: f64,
    pub control_points: Vec<Vec<usize>>,
    pub subjects: usize,
}

/// Write weights as a `weights` volume of dims [n, B, rank] plus a `.json` sidecar.
pub fn write_displacements(path: impl AsRef<Path>, ds: &DisplacementSet) -> Result<()> {
    let path = path.as_ref();
    let lat = ds.lattice();
    let r = ds.rank();
    write_volume(
        path,
        &Volume::Weights {
            dims: vec![ds.subjects, lat.len(), r],
            values: ds.weights.clone(),
        },
    )?;
    let side = LatticeSidecar {
        dims: lat.grid().dims().to_vec(),
        omega: lat.omega(),
        control_points: lat.points().iter().map(|p| p[..r].to_vec()).collect(),
        subjects: ds.subjects,
    };
    let sp = path.with_extension("json");
    std::fs::write(&sp, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&sp, e))
}

pub fn read_displacements(path: impl AsRef<Path>) -> Result<DisplacementSet> {
    let path = path.as_ref();
    let sp = path.with_extension("json");
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: LatticeSidecar = serde_json::from_str(&text).map_err(|e| Error::Header(e.to_string()))?;
    let grid = VoxelGrid::new(&side.dims)?;
    let points = side
        .control_points
        .iter()
        .map(|p| {
            let mut q = [0usize; 3];
            if p.len() != grid.rank() {
                return Err(Error::Header("control point rank mismatch".into()));
            }
            q[..p.len()].copy_from_slice(p);
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    let lattice = ControlLattice::new(grid, points, side.omega)?;
    match read_volume(path)? {
        Volume::Weights { values, .. } => DisplacementSet::from_weights(lattice, side.subjects, values),
        _ => Err(Error::Header("expected a weights volume".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_rule() {
        assert_eq!(axis_positions(50, 6.5), vec![18, 31]);
        assert_eq!(axis_positions(10, 6.5), vec![5]);
        assert_eq!(axis_positions(24, 4.0), vec![12]);
        assert_eq!(axis_positions(32, 4.0), vec![12, 20]);
    }

    #[test]
    fn rounding_and_clamp() {
        let g = VoxelGrid::new(&[50]).unwrap();
        assert_eq!(displace_index(&g, 10, &[0.4]), 10);
        assert_eq!(displace_index(&g, 10, &[0.5]), 11);
        assert_eq!(displace_index(&g, 10, &[-0.5]), 9);
        assert_eq!(displace_index(&g, 49, &[3.0]), 49);
        assert_eq!(displace_index(&g, 1, &[-7.0]), 0);
    }
}
