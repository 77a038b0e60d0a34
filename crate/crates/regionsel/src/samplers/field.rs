//! Mutable per-subject displacement state shared by the samplers.

use crate::deform::{ControlLattice, DisplacementSet, KernelMode, KernelTable};
use crate::volume::VoxelGrid;

/// Weights, interpolated fields and displaced indices for every subject.
///
/// Observation o = i·d + l is voxel l of subject i; its displaced voxel lives in the
/// caller's target array.
#[derive(Debug, Clone)]
pub struct SpatialField {
    grid: VoxelGrid,
    lattice: ControlLattice,
    table: KernelTable,
    coords: Vec<[i32; 3]>,
    ext: [i32; 3],
    pub(crate) subjects: usize,
    pub(crate) rank: usize,
    pub(crate) w: Vec<f64>,
    u: Vec<f64>,
    // staged proposal
    staged_u: Vec<f64>,
    pub(crate) moves: Vec<(u32, u32)>,
}

impl SpatialField {
    pub fn new(ds: &DisplacementSet) -> Self {
        let lattice = ds.lattice().clone();
        let grid = lattice.grid().clone();
        let table = KernelTable::new(&lattice, KernelMode::Truncated);
        let coords = (0..grid.len())
            .map(|k| {
                let c = grid.coords(k);
                [c[0] as i32, c[1] as i32, c[2] as i32]
            })
            .collect();
        let e = grid.extents();
        let rank = grid.rank();
        let subjects = ds.subjects();
        let mut f = Self {
            u: vec![0.0; subjects * grid.len() * rank],
            grid,
            lattice,
            table,
            coords,
            ext: [e[0] as i32, e[1] as i32, e[2] as i32],
            subjects,
            rank,
            w: ds.weights().to_vec(),
            staged_u: Vec::new(),
            moves: Vec::new(),
        };
        f.recompute_fields();
        f
    }

    pub fn lattice(&self) -> &ControlLattice {
        &self.lattice
    }

    pub fn control_points(&self) -> usize {
        self.lattice.len()
    }

    pub fn displacement_set(&self) -> DisplacementSet {
        DisplacementSet::from_weights(self.lattice.clone(), self.subjects, self.w.clone())
            .expect("field weights are finite")
    }

    pub fn weight(&self, i: usize, b: usize) -> &[f64] {
        let o = (i * self.lattice.len() + b) * self.rank;
        &self.w[o..o + self.rank]
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        self.w.copy_from_slice(w);
        self.recompute_fields();
    }

    pub fn sum_sq(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum()
    }

    fn recompute_fields(&mut self) {
        let d = self.grid.len();
        let r = self.rank;
        self.u.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.subjects {
            for b in 0..self.lattice.len() {
                let o = (i * self.lattice.len() + b) * r;
                for &(k, kv) in self.table.support(b) {
                    let base = (i * d + k as usize) * r;
                    for a in 0..r {
                        self.u[base + a] += kv * self.w[o + a];
                    }
                }
            }
        }
    }

    #[inline]
    fn displaced(&self, l: usize, u: &[f64]) -> u32 {
        let c = self.coords[l];
        let mut out = c;
        for a in 0..self.rank {
            let t = c[a] + u[a].round() as i32;
            out[a] = t.clamp(0, self.ext[a] - 1);
        }
        ((out[0] * self.ext[1] + out[1]) * self.ext[2] + out[2]) as u32
    }

    /// Fill `targets` with φ_i(l) for every observation.
    pub fn write_targets(&self, targets: &mut [u32]) {
        let d = self.grid.len();
        let r = self.rank;
        for i in 0..self.subjects {
            for l in 0..d {
                let o = i * d + l;
                targets[o] = self.displaced(l, &self.u[o * r..o * r + r]);
            }
        }
    }

    /// Stage w_{i,b} → `prop`: compute the new field over the kernel support and record
    /// every observation whose displaced voxel changes as (o, new voxel) in `moves`.
    pub fn stage(&mut self, i: usize, b: usize, prop: &[f64], targets: &[u32]) {
        let d = self.grid.len();
        let r = self.rank;
        let wo = (i * self.lattice.len() + b) * r;
        let mut dw = [0.0f64; 3];
        for a in 0..r {
            dw[a] = prop[a] - self.w[wo + a];
        }
        let support = self.table.support(b);
        self.staged_u.clear();
        self.moves.clear();
        let mut un = [0.0f64; 3];
        for &(l, kv) in support {
            let o = i * d + l as usize;
            for a in 0..r {
                un[a] = self.u[o * r + a] + kv * dw[a];
                self.staged_u.push(un[a]);
            }
            let nk = self.displaced(l as usize, &un[..r]);
            if nk != targets[o] {
                self.moves.push((o as u32, nk));
            }
        }
    }

    /// Apply the staged proposal.
    pub fn commit(&mut self, i: usize, b: usize, prop: &[f64], targets: &mut [u32]) {
        let d = self.grid.len();
        let r = self.rank;
        let wo = (i * self.lattice.len() + b) * r;
        self.w[wo..wo + r].copy_from_slice(&prop[..r]);
        for (s, &(l, _)) in self.table.support(b).iter().enumerate() {
            let o = i * d + l as usize;
            self.u[o * r..o * r + r].copy_from_slice(&self.staged_u[s * r..s * r + r]);
        }
        for &(o, nk) in &self.moves {
            targets[o as usize] = nk;
        }
    }
}
