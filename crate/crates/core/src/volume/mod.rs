//! Voxel grids, label and probability maps, resampling, connected
//! components, and the `rvol` file format.

mod classes;
mod components;
mod grid;
mod maps;
mod resample;
pub mod rvol;

pub use classes::{seg, ta, ClassTable, BACKGROUND};
pub use components::{
    connected_components, largest_foreground_component, ComponentMap, Connectivity,
};
pub use grid::{Dims, Spacing, Voxel, VoxelGrid};
pub use maps::{argmax_labels, LabelMap, ProbMap, PROB_SUM_TOLERANCE};
pub use resample::{resample_labels, resample_to_spacing, resampled_dims, Interpolation};
