use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing, VoxelGrid};

/// CT acquisition phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NonContrast,
    Pancreatic,
    Venous,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::NonContrast, Phase::Pancreatic, Phase::Venous];

    pub fn name(self) -> &'static str {
        match self {
            Phase::NonContrast => "non_contrast",
            Phase::Pancreatic => "pancreatic",
            Phase::Venous => "venous",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown phase `{s}`")))
    }
}

/// Aligned images of one case keyed by phase.
pub type PhaseImages = BTreeMap<Phase, VoxelGrid<f32>>;

/// Per-voxel features: for each phase, raw intensity plus mean and standard
/// deviation over a `(2r+1)^3` edge-clamped box; then a constant bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default = "default_radius")]
    pub radius: usize,
    pub phases: Vec<Phase>,
}

fn default_radius() -> usize {
    1
}

pub const FEATURES_PER_PHASE: usize = 3;

impl FeatureConfig {
    pub fn new(phases: Vec<Phase>) -> Self {
        Self { radius: 1, phases }
    }

    pub fn count(&self) -> usize {
        FEATURES_PER_PHASE * self.phases.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::invalid("feature config needs at least one phase"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if self.phases[..i].contains(p) {
                return Err(Error::invalid(format!("phase `{p}` listed twice")));
            }
        }
        Ok(())
    }
}

/// The three per-phase feature channels of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFeatures {
    pub raw: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Voxel-major feature rows in raster order: `data[v * n_features + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dims: Dims,
    spacing: Spacing,
    n_features: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn row(&self, voxel: usize) -> &[f32] {
        &self.data[voxel * self.n_features..(voxel + 1) * self.n_features]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Interleaves per-phase channels (in the given order) and appends the bias.
    pub fn assemble(dims: Dims, spacing: Spacing, phases: &[&PhaseFeatures]) -> Self {
        let n: usize = dims.iter().product();
        let n_features = FEATURES_PER_PHASE * phases.len() + 1;
        let mut data = Vec::with_capacity(n * n_features);
        for v in 0..n {
            for p in phases {
                data.extend_from_slice(&[p.raw[v], p.mean[v], p.std[v]]);
            }
            data.push(1.0);
        }
        Self {
            dims,
            spacing,
            n_features,
            data,
        }
    }
}

/// Raw, box-mean and box-std channels of one image.
pub fn phase_features(image: &VoxelGrid<f32>, radius: usize) -> PhaseFeatures {
    let raw = image.data().to_vec();
    if radius == 0 {
        return PhaseFeatures {
            mean: raw.clone(),
            std: vec![0.0; raw.len()],
            raw,
        };
    }
    let [nx, ny, nz] = image.dims();
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let window = ((2 * radius + 1) as f64).powi(3);
    let mut mean = Vec::with_capacity(raw.len());
    let mut std = Vec::with_capacity(raw.len());
    let mut samples = Vec::with_capacity((2 * radius + 1).pow(3));
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                samples.clear();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            samples.push(image.get(
                                clamp(x + dx, nx),
                                clamp(y + dy, ny),
                                clamp(z + dz, nz),
                            ) as f64);
                        }
                    }
                }
                let m = samples.iter().sum::<f64>() / window;
                let var = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / window;
                mean.push(m as f32);
                std.push(var.sqrt() as f32);
            }
        }
    }
    PhaseFeatures { raw, mean, std }
}

/// Feature rows for the phases listed in `cfg`, in that order.
pub fn extract_features(images: &PhaseImages, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let grids = cfg
        .phases
        .iter()
        .map(|p| {
            images
                .get(p)
                .ok_or_else(|| Error::MissingPhase(p.name().into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = grids[0];
    if grids.iter().any(|g| !g.same_geometry(first)) {
        return Err(Error::invalid("phase images differ in geometry"));
    }
    let per_phase: Vec<PhaseFeatures> = grids
        .iter()
        .map(|g| phase_features(g, cfg.radius))
        .collect();
    Ok(FeatureMatrix::assemble(
        first.dims(),
        first.spacing(),
        &per_phase.iter().collect::<Vec<_>>(),
    ))
}
