use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Phase, PhaseImages};
use crate::phantom::DatasetRole;
use crate::volume::{rvol, LabelMap};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Annotation kinds stored per case.
pub mod kind {
    /// Full SEG3 labels (pancreas + tumor).
    pub const SEG: &str = "seg";
    /// Tumor-only SEG3 labels (classes {0, 2}).
    pub const TUMOR: &str = "tumor";
    /// TA6 pancreas + vessel labels.
    pub const TA: &str = "ta";
}

/// Where an annotation came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Bootstrapped,
    Pseudo,
    RefinedPseudo,
}

impl Provenance {
    fn rank(self) -> u8 {
        match self {
            Provenance::Bootstrapped | Provenance::Pseudo => 1,
            Provenance::RefinedPseudo => 2,
            Provenance::Manual => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::Bootstrapped => "bootstrapped",
            Provenance::Pseudo => "pseudo",
            Provenance::RefinedPseudo => "refined_pseudo",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub path: PathBuf,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub role: DatasetRole,
    pub phases: BTreeMap<Phase, PathBuf>,
    #[serde(default)]
    pub annotations: BTreeMap<String, Annotation>,
    /// Hidden ground truth, used only for evaluation and audits.
    #[serde(default)]
    pub truth: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

impl CaseRecord {
    pub fn new(case_id: impl Into<String>, role: DatasetRole) -> Self {
        Self {
            case_id: case_id.into(),
            role,
            phases: BTreeMap::new(),
            annotations: BTreeMap::new(),
            truth: BTreeMap::new(),
            fold: None,
        }
    }

    pub fn annotation(&self, kind: &str) -> Option<&Annotation> {
        self.annotations.get(kind)
    }

    pub fn provenance(&self, kind: &str) -> Option<Provenance> {
        self.annotations.get(kind).map(|a| a.provenance)
    }

    /// Records an annotation. Provenance only moves forward
    /// (none → pseudo/bootstrapped → refined_pseudo) and manual labels are final.
    pub fn set_annotation(
        &mut self,
        kind: &str,
        path: PathBuf,
        provenance: Provenance,
    ) -> Result<()> {
        if let Some(old) = self.annotations.get(kind) {
            let forward =
                old.provenance != Provenance::Manual && provenance.rank() > old.provenance.rank();
            if !forward {
                return Err(Error::Provenance(format!(
                    "case `{}`: `{kind}` annotation cannot go from {} to {}",
                    self.case_id, old.provenance, provenance
                )));
            }
        }
        self.annotations
            .insert(kind.to_string(), Annotation { path, provenance });
        Ok(())
    }
}

/// The ledger of one dataset directory. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Directory the case paths are relative to. Written as `.`; reset to
    /// the manifest's directory on load.
    #[serde(default = "dot")]
    pub root: PathBuf,
    pub role: DatasetRole,
    pub spec_hash: String,
    pub cases: Vec<CaseRecord>,
}

fn dot() -> PathBuf {
    PathBuf::from(".")
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, role: DatasetRole, spec_hash: impl Into<String>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            root: root.into(),
            role,
            spec_hash: spec_hash.into(),
            cases: Vec::new(),
        }
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    pub fn case_ids(&self) -> Vec<&str> {
        self.cases.iter().map(|c| c.case_id.as_str()).collect()
    }

    /// Checks id uniqueness, role consistency and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest format_version {} is not supported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        let mut seen = BTreeSet::new();
        for case in &self.cases {
            if !seen.insert(case.case_id.as_str()) {
                return Err(Error::DatasetIntegrity {
                    case: case.case_id.clone(),
                    reason: "duplicate case id".into(),
                });
            }
            if case.role != self.role {
                return Err(Error::DatasetIntegrity {
                    case: case.case_id.clone(),
                    reason: format!("role {} in a role-{} manifest", case.role, self.role),
                });
            }
            let files = case
                .phases
                .values()
                .chain(case.annotations.values().map(|a| &a.path))
                .chain(case.truth.values());
            for rel in files {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(Error::DatasetIntegrity {
                        case: case.case_id.clone(),
                        reason: format!("missing file `{}`", path.display()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Reads every phase image of a case.
    pub fn load_images(&self, case: &CaseRecord) -> Result<PhaseImages> {
        case.phases
            .iter()
            .map(|(&phase, rel)| Ok((phase, rvol::read_f32(&self.resolve(rel))?)))
            .collect()
    }

    /// Reads an annotation; a missing entry is an integrity error naming the case.
    pub fn load_annotation(&self, case: &CaseRecord, kind: &str) -> Result<LabelMap> {
        let ann = case
            .annotation(kind)
            .ok_or_else(|| Error::DatasetIntegrity {
                case: case.case_id.clone(),
                reason: format!("no `{kind}` annotation"),
            })?;
        self.read_labels_for(case, &ann.path)
    }

    /// Reads hidden ground truth (`seg` or `ta`).
    pub fn load_truth(&self, case: &CaseRecord, kind: &str) -> Result<LabelMap> {
        let rel = case
            .truth
            .get(kind)
            .ok_or_else(|| Error::DatasetIntegrity {
                case: case.case_id.clone(),
                reason: format!("no `{kind}` ground truth"),
            })?;
        self.read_labels_for(case, rel)
    }

    fn read_labels_for(&self, case: &CaseRecord, rel: &Path) -> Result<LabelMap> {
        let path = self.resolve(rel);
        if !path.is_file() {
            return Err(Error::DatasetIntegrity {
                case: case.case_id.clone(),
                reason: format!("missing file `{}`", path.display()),
            });
        }
        rvol::read_labels(&path)
    }

    pub fn to_json(&self) -> String {
        let mut doc = self.clone();
        doc.root = dot();
        serde_json::to_string_pretty(&doc).expect("manifest serializes")
    }

    /// Writes `manifest.json` into `root`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest from a file or from a directory holding `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| Error::json(&file, e))?;
        let dir = file.parent().unwrap_or(Path::new("."));
        manifest.root = if manifest.root.is_absolute() {
            manifest.root
        } else {
            dir.join(&manifest.root)
        };
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_moves_forward_only() {
        let mut case = CaseRecord::new("C000", DatasetRole::C);
        case.set_annotation(kind::SEG, "a".into(), Provenance::Pseudo)
            .unwrap();
        assert!(case
            .set_annotation(kind::SEG, "b".into(), Provenance::Pseudo)
            .is_err());
        case.set_annotation(kind::SEG, "c".into(), Provenance::RefinedPseudo)
            .unwrap();
        let err = case
            .set_annotation(kind::SEG, "d".into(), Provenance::Pseudo)
            .unwrap_err();
        assert!(matches!(err, Error::Provenance(_)));
    }

    #[test]
    fn manual_is_final() {
        let mut case = CaseRecord::new("A000", DatasetRole::A);
        case.set_annotation(kind::TUMOR, "t".into(), Provenance::Manual)
            .unwrap();
        for p in [
            Provenance::Pseudo,
            Provenance::RefinedPseudo,
            Provenance::Manual,
        ] {
            assert!(case.set_annotation(kind::TUMOR, "x".into(), p).is_err());
        }
        // other kinds are independent
        case.set_annotation(kind::SEG, "s".into(), Provenance::Bootstrapped)
            .unwrap();
        case.set_annotation(kind::SEG, "s2".into(), Provenance::RefinedPseudo)
            .unwrap();
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path(), DatasetRole::C, "h");
        m.cases.push(CaseRecord::new("C000", DatasetRole::C));
        m.validate().unwrap();
        m.cases.push(CaseRecord::new("C000", DatasetRole::C));
        assert!(matches!(m.validate(), Err(Error::DatasetIntegrity { .. })));
    }

    #[test]
    fn missing_file_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path(), DatasetRole::C, "h");
        let mut case = CaseRecord::new("C007", DatasetRole::C);
        case.phases.insert(Phase::Venous, "C007/venous.rvol".into());
        m.cases.push(case);
        match m.validate() {
            Err(Error::DatasetIntegrity { case, reason }) => {
                assert_eq!(case, "C007");
                assert!(reason.contains("venous.rvol"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_relocates_root() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path(), DatasetRole::B, "abc");
        let mut case = CaseRecord::new("B000", DatasetRole::B);
        case.fold = Some(3);
        m.cases.push(case);
        m.save().unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back.cases, m.cases);
        assert_eq!(back.root, dir.path().join("."));
        assert!(!m.to_json().contains(&*dir.path().to_string_lossy()));
    }
}
