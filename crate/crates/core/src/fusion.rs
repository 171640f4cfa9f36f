//! Dual-teacher pseudo-annotation: a region-dependent convex combination of
//! two teachers' probability maps, hardened to labels.
//!
//! Along the sagittal axis the pancreas extent is split into a head/uncinate
//! prefix holding `head_fraction` of the foreground voxels and the rest.
//! Teacher A gets weight `w0` inside the head region; teacher B gets weight
//! `w1` outside it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{argmax_labels, largest_foreground_component, LabelMap, ProbMap, VoxelGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceDirection {
    #[default]
    Ascending,
    Descending,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Teacher-A weight inside the head region.
    pub w0: f64,
    /// Teacher-B weight outside the head region.
    pub w1: f64,
    pub head_fraction: f64,
    /// Sagittal axis index into (x, y, z).
    pub axis: usize,
    pub direction: SliceDirection,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w0: 0.8,
            w1: 0.6,
            head_fraction: 0.6,
            axis: 0,
            direction: SliceDirection::Ascending,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w0) || !(0.0..=1.0).contains(&self.w1) {
            return Err(Error::invalid(format!(
                "fusion weights must lie in [0,1], got w0={} w1={}",
                self.w0, self.w1
            )));
        }
        if !(self.head_fraction > 0.0 && self.head_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "head_fraction must lie in (0,1), got {}",
                self.head_fraction
            )));
        }
        if self.axis > 2 {
            return Err(Error::invalid(format!(
                "axis must be 0, 1 or 2, got {}",
                self.axis
            )));
        }
        Ok(())
    }
}

/// The head/uncinate slab as a binary mask over whole slices.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRegion {
    pub mask: VoxelGrid<u8>,
    /// First occupied and last included slice index (in scan order), if any.
    pub slab: Option<[usize; 2]>,
}

impl HeadRegion {
    pub fn contains(&self, voxel: usize) -> bool {
        self.mask.data()[voxel] != 0
    }
}

/// Marks the smallest prefix of sagittal slices (in `cfg.direction`) whose
/// cumulative foreground count reaches `head_fraction` of the total.
pub fn head_region_mask(foreground: &LabelMap, cfg: &FusionConfig) -> Result<HeadRegion> {
    cfg.validate()?;
    let grid = foreground.grid();
    let n_slices = grid.dims()[cfg.axis];
    let mut counts = vec![0usize; n_slices];
    for (i, &l) in grid.data().iter().enumerate() {
        if l != 0 {
            counts[grid.coords(i)[cfg.axis]] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let order: Vec<usize> = match cfg.direction {
        SliceDirection::Ascending => (0..n_slices).collect(),
        SliceDirection::Descending => (0..n_slices).rev().collect(),
    };

    let mut in_head = vec![false; n_slices];
    let mut slab = None;
    if total > 0 {
        let target = cfg.head_fraction * total as f64 - 1e-9;
        let mut cumulative = 0usize;
        let mut first = None;
        for &s in &order {
            in_head[s] = true;
            cumulative += counts[s];
            if counts[s] > 0 && first.is_none() {
                first = Some(s);
            }
            if cumulative as f64 >= target {
                slab = Some([first.expect("cumulative > 0"), s]);
                break;
            }
        }
    }
    let mask = grid.map(|_| 0u8);
    let data = (0..grid.len())
        .map(|i| in_head[grid.coords(i)[cfg.axis]] as u8)
        .collect();
    Ok(HeadRegion {
        mask: mask.with_data(data)?,
        slab,
    })
}

/// Per-voxel convex combination: `w0*pA + (1-w0)*pB` in the head region,
/// `(1-w1)*pA + w1*pB` elsewhere.
pub fn fuse_probabilities(
    pa: &ProbMap,
    pb: &ProbMap,
    head: &HeadRegion,
    cfg: &FusionConfig,
) -> Result<ProbMap> {
    cfg.validate()?;
    pa.check_compatible(pb)?;
    if head.mask.dims() != pa.dims() {
        return Err(Error::invalid(
            "head mask and probability maps differ in dims",
        ));
    }
    let head_w = (cfg.w0, 1.0 - cfg.w0);
    let rest_w = (1.0 - cfg.w1, cfg.w1);
    weighted_mean(pa, pb, |v| if head.contains(v) { head_w } else { rest_w })
}

fn weighted_mean(
    pa: &ProbMap,
    pb: &ProbMap,
    weights: impl Fn(usize) -> (f64, f64),
) -> Result<ProbMap> {
    let channels = pa
        .channels()
        .iter()
        .zip(pb.channels())
        .map(|(ca, cb)| {
            let data = ca
                .data()
                .iter()
                .zip(cb.data())
                .enumerate()
                .map(|(v, (&a, &b))| {
                    let (wa, wb) = weights(v);
                    (wa * a as f64 + wb * b as f64).clamp(0.0, 1.0) as f32
                })
                .collect();
            ca.with_data(data)
        })
        .collect::<Result<Vec<_>>>()?;
    ProbMap::new(channels, pa.classes().clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w0: f64,
    pub w1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionDiagnostics {
    pub head_slab: Option<[usize; 2]>,
    pub class_voxels: BTreeMap<String, usize>,
    pub weights: FusionWeights,
}

/// Fuses two teachers' maps into hard pseudo labels.
///
/// The head region is taken from the argmax of the equal-weight mean of both
/// teachers; the fused map is hardened by argmax and reduced to its largest
/// joint-foreground component.
pub fn make_pseudo_labels(
    pa: &ProbMap,
    pb: &ProbMap,
    cfg: &FusionConfig,
) -> Result<(LabelMap, FusionDiagnostics)> {
    pa.check_compatible(pb)?;
    let consensus = argmax_labels(&weighted_mean(pa, pb, |_| (0.5, 0.5))?);
    let head = head_region_mask(&consensus, cfg)?;
    let fused = fuse_probabilities(pa, pb, &head, cfg)?;
    let pseudo = largest_foreground_component(&argmax_labels(&fused));
    let class_voxels = pseudo
        .classes()
        .ids()
        .map(|c| {
            (
                pseudo.classes().name(c).unwrap().to_string(),
                pseudo.count(c),
            )
        })
        .collect();
    let diagnostics = FusionDiagnostics {
        head_slab: head.slab,
        class_voxels,
        weights: FusionWeights {
            w0: cfg.w0,
            w1: cfg.w1,
        },
    };
    Ok((pseudo, diagnostics))
}
