use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::volume::{Dims, Spacing};

/// Anatomical structures that receive their own intensity per phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Background,
    /// Non-pancreatic soft-tissue organs (distractors).
    Organ,
    Pancreas,
    /// Dilated pancreatic duct, labelled pancreas.
    Duct,
    Tumor,
    /// Hyper-enhancing (non-PDAC-like) tumor variant.
    TumorHyper,
    PortalSplenicVein,
    Smv,
    Sma,
    TruncusCoeliacus,
}

impl Structure {
    pub const ALL: [Structure; 10] = [
        Structure::Background,
        Structure::Organ,
        Structure::Pancreas,
        Structure::Duct,
        Structure::Tumor,
        Structure::TumorHyper,
        Structure::PortalSplenicVein,
        Structure::Smv,
        Structure::Sma,
        Structure::TruncusCoeliacus,
    ];

    pub const VESSELS: [Structure; 4] = [
        Structure::PortalSplenicVein,
        Structure::Smv,
        Structure::Sma,
        Structure::TruncusCoeliacus,
    ];
}

/// Mean intensity of one structure in each phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseIntensity {
    pub non_contrast: f64,
    pub pancreatic: f64,
    pub venous: f64,
}

impl PhaseIntensity {
    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::NonContrast => self.non_contrast,
            Phase::Pancreatic => self.pancreatic,
            Phase::Venous => self.venous,
        }
    }
}

/// Structure -> per-phase mean intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnhancementTable(pub BTreeMap<Structure, PhaseIntensity>);

impl EnhancementTable {
    pub fn mean(&self, s: Structure, phase: Phase) -> f64 {
        self.0[&s].get(phase)
    }

    /// |tumor - pancreas| per phase.
    pub fn tumor_contrast(&self, phase: Phase) -> f64 {
        (self.mean(Structure::Tumor, phase) - self.mean(Structure::Pancreas, phase)).abs()
    }

    pub fn validate(&self) -> Result<()> {
        for s in Structure::ALL {
            let row = self
                .0
                .get(&s)
                .ok_or_else(|| Error::Config(format!("enhancement table lacks `{s:?}`")))?;
            if Phase::ALL.iter().any(|&p| !row.get(p).is_finite()) {
                return Err(Error::Config(format!("non-finite enhancement for `{s:?}`")));
            }
        }
        let nc = self.tumor_contrast(Phase::NonContrast);
        let pa = self.tumor_contrast(Phase::Pancreatic);
        let pv = self.tumor_contrast(Phase::Venous);
        if !(pa > pv && pv > nc) {
            return Err(Error::Config(format!(
                "tumor/pancreas contrast must order pancreatic > venous > non_contrast, got {pa} / {pv} / {nc}"
            )));
        }
        Ok(())
    }
}

impl Default for EnhancementTable {
    fn default() -> Self {
        let row = |non_contrast, pancreatic, venous| PhaseIntensity {
            non_contrast,
            pancreatic,
            venous,
        };
        Self(
            [
                (Structure::Background, row(-60.0, -50.0, -45.0)),
                (Structure::Organ, row(45.0, 15.0, 40.0)),
                (Structure::Pancreas, row(40.0, 140.0, 110.0)),
                (Structure::Duct, row(12.0, 30.0, 75.0)),
                (Structure::Tumor, row(32.0, 60.0, 80.0)),
                (Structure::TumorHyper, row(45.0, 170.0, 140.0)),
                (Structure::PortalSplenicVein, row(80.0, 150.0, 125.0)),
                (Structure::Smv, row(82.0, 148.0, 128.0)),
                (Structure::Sma, row(78.0, 160.0, 122.0)),
                (Structure::TruncusCoeliacus, row(78.0, 155.0, 120.0)),
            ]
            .into_iter()
            .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorLocation {
    /// Centre placed in the head/uncinate part of the pancreas.
    Head,
    Anywhere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TumorSpec {
    pub radius_mm: [f64; 2],
    pub location: TumorLocation,
    /// Relative amplitude of the boundary perturbation, in [0, 0.6].
    pub irregularity: f64,
    /// Chance that a case gets the hyper-enhancing variant.
    pub hyper_enhancing_prob: f64,
    /// Per-case tumor/pancreas contrast is scaled by U(1 - j, 1 + j).
    pub contrast_jitter: f64,
}

impl Default for TumorSpec {
    fn default() -> Self {
        Self {
            radius_mm: [5.0, 9.0],
            location: TumorLocation::Anywhere,
            irregularity: 0.25,
            hyper_enhancing_prob: 0.0,
            contrast_jitter: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PancreasSpec {
    pub center_mm: [f64; 3],
    pub length_mm: f64,
    pub head_radius_mm: f64,
    pub tail_radius_mm: f64,
    /// Cross-section extent along z relative to the in-plane radius.
    pub z_scale: f64,
    /// Peak bend of the centreline along y.
    pub bend_mm: f64,
    /// Per-case uniform jitter of the centre, per axis.
    pub center_jitter_mm: f64,
    /// Per-case relative jitter of the length.
    pub length_jitter: f64,
}

impl Default for PancreasSpec {
    fn default() -> Self {
        Self {
            center_mm: [36.0, 34.0, 50.0],
            length_mm: 52.0,
            head_radius_mm: 10.0,
            tail_radius_mm: 5.5,
            z_scale: 1.4,
            bend_mm: 5.0,
            center_jitter_mm: 3.0,
            length_jitter: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VesselSpec {
    pub portal_splenic_radius_mm: f64,
    pub smv_radius_mm: f64,
    pub sma_radius_mm: f64,
    pub truncus_radius_mm: f64,
    pub jitter_mm: f64,
}

impl Default for VesselSpec {
    fn default() -> Self {
        Self {
            portal_splenic_radius_mm: 3.5,
            smv_radius_mm: 3.5,
            sma_radius_mm: 3.0,
            truncus_radius_mm: 3.0,
            jitter_mm: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuctSpec {
    pub probability: f64,
    pub radius_mm: [f64; 2],
}

impl Default for DuctSpec {
    fn default() -> Self {
        Self {
            probability: 1.0,
            radius_mm: [1.5, 2.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrganSpec {
    pub count: usize,
    pub radius_mm: [f64; 2],
    /// Minimum surface gap kept from the pancreas.
    pub gap_mm: f64,
}

impl Default for OrganSpec {
    fn default() -> Self {
        Self {
            count: 3,
            radius_mm: [7.0, 12.0],
            gap_mm: 4.0,
        }
    }
}

/// Everything needed to draw a synthetic multi-phase case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub pancreas: PancreasSpec,
    pub tumor: TumorSpec,
    pub duct: DuctSpec,
    pub vessels: VesselSpec,
    pub organs: OrganSpec,
    pub enhancement: EnhancementTable,
    /// Additive Gaussian noise per voxel and phase.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48, 48, 32],
            spacing_mm: [1.5, 1.5, 3.0],
            pancreas: PancreasSpec::default(),
            tumor: TumorSpec::default(),
            duct: DuctSpec::default(),
            vessels: VesselSpec::default(),
            organs: OrganSpec::default(),
            enhancement: EnhancementTable::default(),
            noise_sigma: 14.0,
            seed: 2021,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing_mm.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config("dims and spacing_mm must be positive".into()));
        }
        let p = &self.pancreas;
        let t = &self.tumor;
        let positive = [
            p.length_mm,
            p.head_radius_mm,
            p.tail_radius_mm,
            p.z_scale,
            t.radius_mm[0],
            self.duct.radius_mm[0],
            self.organs.radius_mm[0],
            self.vessels.portal_splenic_radius_mm,
            self.vessels.smv_radius_mm,
            self.vessels.sma_radius_mm,
            self.vessels.truncus_radius_mm,
        ];
        if positive.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(Error::Config("radii and lengths must be > 0".into()));
        }
        for (name, range) in [
            ("tumor.radius_mm", t.radius_mm),
            ("duct.radius_mm", self.duct.radius_mm),
            ("organs.radius_mm", self.organs.radius_mm),
        ] {
            if range[0] > range[1] {
                return Err(Error::Config(format!("{name} must be [min, max]")));
            }
        }
        if !(0.0..=0.6).contains(&t.irregularity) {
            return Err(Error::Config(
                "tumor.irregularity must lie in [0, 0.6]".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.contrast_jitter) {
            return Err(Error::Config(
                "tumor.contrast_jitter must lie in [0, 1)".into(),
            ));
        }
        for (name, prob) in [
            ("tumor.hyper_enhancing_prob", t.hyper_enhancing_prob),
            ("duct.probability", self.duct.probability),
        ] {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        self.enhancement.validate()
    }
}

/// Which annotations a dataset exposes, mirroring the four data sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetRole {
    /// Multi-phase, manual tumor annotation only.
    #[serde(rename = "A")]
    A,
    /// Venous phase only, pancreas + tumor annotation.
    #[serde(rename = "B")]
    B,
    /// Multi-phase, no annotation.
    #[serde(rename = "C")]
    C,
    /// Multi-phase, pancreas + vessel annotation.
    #[serde(rename = "D")]
    D,
}

impl DatasetRole {
    pub const ALL: [DatasetRole; 4] = [
        DatasetRole::A,
        DatasetRole::B,
        DatasetRole::C,
        DatasetRole::D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetRole::A => "A",
            DatasetRole::B => "B",
            DatasetRole::C => "C",
            DatasetRole::D => "D",
        }
    }

    /// Phases written to disk for this role.
    pub fn phases(self) -> &'static [Phase] {
        match self {
            DatasetRole::B => &[Phase::Venous],
            _ => &Phase::ALL,
        }
    }

    pub(crate) fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetRole::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown dataset role `{s}`")))
    }
}
