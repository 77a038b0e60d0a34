use std::collections::VecDeque;

use super::ScalarMap;

/// Face-connected clusters of voxels with value strictly above `threshold`.
///
/// Clusters are ordered by their smallest voxel index; voxels inside a cluster are sorted.
pub fn connected_components(map: &ScalarMap, threshold: f64) -> Vec<Vec<usize>> {
    let grid = map.grid();
    let vals = map.values();
    let mut seen = vec![false; vals.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    let mut nb = Vec::with_capacity(6);
    for start in 0..vals.len() {
        if seen[start] || vals[start] <= threshold {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cluster = Vec::new();
        while let Some(k) = queue.pop_front() {
            cluster.push(k);
            grid.face_neighbors(k, &mut nb);
            for &m in &nb {
                if !seen[m] && vals[m] > threshold {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        cluster.sort_unstable();
        clusters.push(cluster);
    }
    clusters
}

/// Same as [`connected_components`] but on an explicit voxel mask.
pub fn mask_components(grid: &super::VoxelGrid, mask: &[bool]) -> Vec<Vec<usize>> {
    let vals: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let map = ScalarMap::new(grid.clone(), vals).expect("mask length matches grid");
    connected_components(&map, 0.5)
}
