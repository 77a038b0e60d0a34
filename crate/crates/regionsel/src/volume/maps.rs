use crate::error::{Error, Result};

use super::VoxelGrid;

/// Real-valued field over a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    grid: VoxelGrid,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(grid: VoxelGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "map has {} values for a grid of {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: VoxelGrid) -> Self {
        let d = grid.len();
        Self {
            grid,
            values: vec![0.0; d],
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Partition of the grid into N labelled regions (labels are 0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parcellation {
    grid: VoxelGrid,
    labels: Vec<u32>,
    region_count: usize,
    sizes: Vec<usize>,
}

impl Parcellation {
    /// Build with an explicit region count; every region must be nonempty.
    pub fn new(grid: VoxelGrid, labels: Vec<u32>, region_count: usize) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Shape(format!(
                "label field has {} values for a grid of {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        let mut sizes = vec![0usize; region_count];
        for (voxel, &l) in labels.iter().enumerate() {
            if (l as usize) >= region_count {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    voxel,
                    regions: region_count,
                });
            }
            sizes[l as usize] += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("region {j} is empty")));
        }
        Ok(Self {
            grid,
            labels,
            region_count,
            sizes,
        })
    }

    /// Region count inferred as max label + 1.
    pub fn from_labels(grid: VoxelGrid, labels: Vec<u32>) -> Result<Self> {
        let n = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        Self::new(grid, labels, n)
    }

    /// One region covering the whole grid.
    pub fn single(grid: VoxelGrid) -> Self {
        let d = grid.len();
        Self {
            grid,
            labels: vec![0; d],
            region_count: 1,
            sizes: vec![d],
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, k: usize) -> usize {
        self.labels[k] as usize
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Voxels of region j in increasing index order.
    pub fn region_voxels(&self, j: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == j)
            .map(|(k, _)| k)
            .collect()
    }
}

/// One subject's effect map y_i and its within-subject variance map s_i².
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    effects: ScalarMap,
    variances: ScalarMap,
}

impl SubjectData {
    pub fn new(effects: ScalarMap, variances: ScalarMap) -> Result<Self> {
        if effects.grid() != variances.grid() {
            return Err(Error::Shape("effect and variance maps differ in grid".into()));
        }
        if let Some(k) = variances.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("negative variance at voxel {k}")));
        }
        Ok(Self { effects, variances })
    }

    pub fn grid(&self) -> &VoxelGrid {
        self.effects.grid()
    }

    pub fn effects(&self) -> &ScalarMap {
        &self.effects
    }

    pub fn variances(&self) -> &ScalarMap {
        &self.variances
    }
}

/// Check that all subjects share one grid and return it.
pub fn common_grid(data: &[SubjectData]) -> Result<&VoxelGrid> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subjects".into()))?;
    if data.iter().any(|s| s.grid() != first.grid()) {
        return Err(Error::Shape("subjects are not on one grid".into()));
    }
    Ok(first.grid())
}
