use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular voxel lattice of rank 1, 2 or 3, indexed in C order (last axis fastest).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct VoxelGrid {
    dims: Vec<usize>,
    // dims padded with trailing 1s; padding does not change C-order indices
    ext: [usize; 3],
}

impl VoxelGrid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::Shape(format!("grid rank must be 1..=3, got {}", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("grid dims must be positive, got {dims:?}")));
        }
        let mut ext = [1usize; 3];
        ext[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            dims: dims.to_vec(),
            ext,
        })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Per-axis extents padded to three axes.
    pub fn extents(&self) -> [usize; 3] {
        self.ext
    }

    /// Voxel count d.
    pub fn len(&self) -> usize {
        self.ext[0] * self.ext[1] * self.ext[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn coords(&self, k: usize) -> [usize; 3] {
        let c2 = k % self.ext[2];
        let r = k / self.ext[2];
        [r / self.ext[1], r % self.ext[1], c2]
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.ext[1] + c[1]) * self.ext[2] + c[2]
    }

    pub fn contains(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.ext[a])
    }

    /// Face neighbours of voxel k (2 per axis of the grid's rank, fewer at boundaries).
    pub fn face_neighbors(&self, k: usize, out: &mut Vec<usize>) {
        out.clear();
        let c = self.coords(k);
        for a in 0..self.rank() {
            if c[a] > 0 {
                let mut n = c;
                n[a] -= 1;
                out.push(self.index(n));
            }
            if c[a] + 1 < self.ext[a] {
                let mut n = c;
                n[a] += 1;
                out.push(self.index(n));
            }
        }
    }

    /// Squared Euclidean distance between two voxels.
    pub fn dist2(&self, a: usize, b: usize) -> f64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        (0..3)
            .map(|i| {
                let d = ca[i] as f64 - cb[i] as f64;
                d * d
            })
            .sum()
    }
}

impl TryFrom<Vec<usize>> for VoxelGrid {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        VoxelGrid::new(&v)
    }
}

impl From<VoxelGrid> for Vec<usize> {
    fn from(g: VoxelGrid) -> Self {
        g.dims
    }
}
