use serde::{Deserialize, Serialize};

use super::grid::{check_spacing, Dims, Spacing, Voxel, VoxelGrid};
use super::maps::LabelMap;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Output dims for a resampling: `round(n * s / t)`, at least 1 per axis.
pub fn resampled_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Dims {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
    }
    out
}

/// Continuous input index of output voxel `i`'s center along one axis.
#[inline]
fn source_coord(i: usize, in_spacing: f64, out_spacing: f64) -> f64 {
    (i as f64 + 0.5) * out_spacing / in_spacing - 0.5
}

/// Resamples an intensity grid onto `target` spacing.
///
/// Voxel centers are matched in physical space with both grids anchored at
/// the same corner. Linear mode is trilinear with samples clamped to the
/// border voxel centers.
pub fn resample_to_spacing(
    grid: &VoxelGrid<f32>,
    target: Spacing,
    mode: Interpolation,
) -> Result<VoxelGrid<f32>> {
    check_spacing(target)?;
    match mode {
        Interpolation::Nearest => resample_nearest(grid, target),
        Interpolation::Linear => resample_linear(grid, target),
    }
}

/// Nearest-neighbour resampling of a label map; never introduces new labels.
pub fn resample_labels(labels: &LabelMap, target: Spacing) -> Result<LabelMap> {
    check_spacing(target)?;
    LabelMap::new(
        resample_nearest(labels.grid(), target)?,
        labels.classes().clone(),
    )
}

fn resample_nearest<T: Voxel>(grid: &VoxelGrid<T>, target: Spacing) -> Result<VoxelGrid<T>> {
    let dims = grid.dims();
    let spacing = grid.spacing();
    let out = resampled_dims(dims, spacing, target);
    let lookup: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..out[a])
                .map(|i| {
                    let u = source_coord(i, spacing[a], target[a]);
                    ((u + 0.5).floor().max(0.0) as usize).min(dims[a] - 1)
                })
                .collect()
        })
        .collect();
    VoxelGrid::from_fn(out, target, |x, y, z| {
        grid.get(lookup[0][x], lookup[1][y], lookup[2][z])
    })
}

fn resample_linear(grid: &VoxelGrid<f32>, target: Spacing) -> Result<VoxelGrid<f32>> {
    let dims = grid.dims();
    let spacing = grid.spacing();
    let out = resampled_dims(dims, spacing, target);
    // (lower index, upper index, upper weight) per axis
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            let last = (dims[a] - 1) as f64;
            (0..out[a])
                .map(|i| {
                    let u = source_coord(i, spacing[a], target[a]).clamp(0.0, last);
                    let lo = u.floor();
                    let hi = (lo + 1.0).min(last);
                    (lo as usize, hi as usize, u - lo)
                })
                .collect()
        })
        .collect();
    let sample = |x: usize, y: usize, z: usize| grid.get(x, y, z) as f64;
    VoxelGrid::from_fn(out, target, |x, y, z| {
        let (x0, x1, wx) = taps[0][x];
        let (y0, y1, wy) = taps[1][y];
        let (z0, z1, wz) = taps[2][z];
        let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + (b - a) * w };
        let c00 = lerp(sample(x0, y0, z0), sample(x1, y0, z0), wx);
        let c10 = lerp(sample(x0, y1, z0), sample(x1, y1, z0), wx);
        let c01 = lerp(sample(x0, y0, z1), sample(x1, y0, z1), wx);
        let c11 = lerp(sample(x0, y1, z1), sample(x1, y1, z1), wx);
        let c0 = lerp(c00, c10, wy);
        let c1 = lerp(c01, c11, wy);
        lerp(c0, c1, wz) as f32
    })
}
