//! Voxel grids, fields over them, clusters, and the on-disk container.

mod components;
mod grid;
mod io;
mod maps;

pub use components::{connected_components, mask_components};
pub use grid::VoxelGrid;
pub use io::{
    decode_volume, encode_volume, read_manifest, read_volume, write_dataset, write_volume, Dataset, Dtype, Header,
    Kind, Manifest, SubjectEntry, Volume,
};
pub use maps::{common_grid, Parcellation, ScalarMap, SubjectData};
