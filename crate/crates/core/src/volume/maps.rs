use super::classes::ClassTable;
use super::grid::{Dims, Spacing, VoxelGrid};
use crate::error::{Error, Result};

/// Per-voxel channel sums of a [`ProbMap`] must be within this of 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

/// Hard class assignment per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: VoxelGrid<u8>,
    classes: ClassTable,
}

impl LabelMap {
    pub fn new(grid: VoxelGrid<u8>, classes: ClassTable) -> Result<Self> {
        if let Some(&bad) = grid.data().iter().find(|&&v| !classes.contains(v)) {
            return Err(Error::invalid(format!(
                "label {bad} is not in a table of {} classes",
                classes.len()
            )));
        }
        Ok(Self { grid, classes })
    }

    pub fn background(dims: Dims, spacing: Spacing, classes: ClassTable) -> Result<Self> {
        Self::new(VoxelGrid::filled(dims, spacing, 0)?, classes)
    }

    pub fn grid(&self) -> &VoxelGrid<u8> {
        &self.grid
    }

    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }

    pub fn data(&self) -> &[u8] {
        self.grid.data()
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.grid.spacing()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Same geometry and data, labels rewritten voxel-wise.
    pub fn relabel(&self, classes: ClassTable, f: impl FnMut(u8) -> u8) -> Result<Self> {
        Self::new(self.grid.map(f), classes)
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.grid.with_data(data)?, self.classes.clone())
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data().iter().filter(|&&v| v == class_id).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.data().iter().filter(|&&v| v != 0).count()
    }

    pub fn into_grid(self) -> VoxelGrid<u8> {
        self.grid
    }

    pub(crate) fn check_same_shape(&self, other: &LabelMap) -> Result<()> {
        if !self.grid.same_geometry(&other.grid) {
            return Err(Error::invalid(format!(
                "label maps differ in geometry: {:?}/{:?} vs {:?}/{:?}",
                self.dims(),
                self.spacing(),
                other.dims(),
                other.spacing()
            )));
        }
        Ok(())
    }
}

/// Per-voxel class distribution: one probability channel per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    channels: Vec<VoxelGrid<f32>>,
    classes: ClassTable,
}

impl ProbMap {
    pub fn new(channels: Vec<VoxelGrid<f32>>, classes: ClassTable) -> Result<Self> {
        if channels.len() != classes.len() {
            return Err(Error::invalid(format!(
                "{} channels for {} classes",
                channels.len(),
                classes.len()
            )));
        }
        let first = &channels[0];
        if channels.iter().any(|c| !c.same_geometry(first)) {
            return Err(Error::invalid("probability channels differ in geometry"));
        }
        for v in 0..first.len() {
            let mut sum = 0.0f64;
            for ch in &channels {
                let p = ch.data()[v];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid(format!(
                        "probability {p} outside [0,1] at voxel {v}"
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "probabilities sum to {sum} at voxel {v}"
                )));
            }
        }
        Ok(Self { channels, classes })
    }

    /// Builds a map from voxel-major rows (`rows[v * C + c]`).
    pub fn from_rows(
        dims: Dims,
        spacing: Spacing,
        classes: ClassTable,
        rows: &[f32],
    ) -> Result<Self> {
        let k = classes.len();
        let n = dims[0] * dims[1] * dims[2];
        if rows.len() != n * k {
            return Err(Error::invalid(format!(
                "{} probability values for {n} voxels x {k} classes",
                rows.len()
            )));
        }
        let channels = (0..k)
            .map(|c| VoxelGrid::new(dims, spacing, (0..n).map(|v| rows[v * k + c]).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels, classes)
    }

    /// One-hot encoding of a label map.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let channels = labels
            .classes()
            .ids()
            .map(|c| labels.grid().map(|l| if l == c { 1.0 } else { 0.0 }))
            .collect();
        Self {
            channels,
            classes: labels.classes().clone(),
        }
    }

    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }

    pub fn channels(&self) -> &[VoxelGrid<f32>] {
        &self.channels
    }

    pub fn channel(&self, class_id: u8) -> &VoxelGrid<f32> {
        &self.channels[class_id as usize]
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.channels[0].spacing()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels[0].is_empty()
    }

    #[inline]
    pub fn prob(&self, voxel: usize, class_id: u8) -> f32 {
        self.channels[class_id as usize].data()[voxel]
    }

    pub(crate) fn check_compatible(&self, other: &ProbMap) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::invalid(
                "probability maps use different class tables",
            ));
        }
        if !self.channels[0].same_geometry(&other.channels[0]) {
            return Err(Error::invalid(format!(
                "probability maps differ in geometry: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Hardens a distribution map. Ties go to the lowest class id.
pub fn argmax_labels(probs: &ProbMap) -> LabelMap {
    let k = probs.classes().len();
    let data = (0..probs.len())
        .map(|v| {
            let mut best = 0u8;
            let mut best_p = probs.prob(v, 0);
            for c in 1..k as u8 {
                let p = probs.prob(v, c);
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            best
        })
        .collect();
    let grid = probs.channels()[0]
        .with_data(data)
        .expect("geometry taken from a valid map");
    LabelMap {
        grid,
        classes: probs.classes().clone(),
    }
}
