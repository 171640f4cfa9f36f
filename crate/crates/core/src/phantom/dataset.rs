use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{generate_named, mix, PhantomCase};
use super::spec::{DatasetRole, PhantomSpec, TumorLocation, TumorSpec};
use crate::error::{Error, Result};
use crate::model::hex_digest;
use crate::pipeline::manifest::{kind, CaseRecord, DatasetManifest, Provenance};
use crate::volume::{rvol, seg, ClassTable};

pub const GEN_CONFIG_VERSION: u32 = 1;

/// Seed for case `index` of a role. Independent of generation order.
pub fn case_seed(dataset_seed: u64, role: DatasetRole, index: usize) -> u64 {
    mix(dataset_seed ^ mix(role.stream() ^ mix(index as u64)))
}

pub fn case_id(role: DatasetRole, index: usize) -> String {
    format!("{role}{index:03}")
}

impl DatasetRole {
    /// Tumor population drawn for this role unless overridden.
    pub fn default_tumor(self) -> TumorSpec {
        let base = TumorSpec::default();
        match self {
            DatasetRole::A => TumorSpec {
                radius_mm: [5.0, 8.0],
                location: TumorLocation::Head,
                ..base
            },
            DatasetRole::B => TumorSpec {
                radius_mm: [4.0, 12.0],
                hyper_enhancing_prob: 0.3,
                ..base
            },
            DatasetRole::C => TumorSpec {
                radius_mm: [4.0, 11.0],
                ..base
            },
            DatasetRole::D => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor: Option<TumorSpec>,
}

/// Input of `selfseg gen`: one phantom spec and the four role datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub version: u32,
    #[serde(default)]
    pub phantom: PhantomSpec,
    pub dataset_seed: u64,
    pub roles: BTreeMap<DatasetRole, RoleConfig>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let n = [
            (DatasetRole::A, 20),
            (DatasetRole::B, 15),
            (DatasetRole::C, 20),
            (DatasetRole::D, 10),
        ];
        Self {
            version: GEN_CONFIG_VERSION,
            phantom: PhantomSpec::default(),
            dataset_seed: 7,
            roles: n
                .into_iter()
                .map(|(r, n)| (r, RoleConfig { n, tumor: None }))
                .collect(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != GEN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {GEN_CONFIG_VERSION}, found {}",
                self.version
            )));
        }
        for role in self.roles.keys() {
            self.spec_for(*role).validate()?;
        }
        Ok(())
    }

    /// The phantom spec with the role's tumor population applied.
    pub fn spec_for(&self, role: DatasetRole) -> PhantomSpec {
        let tumor = self
            .roles
            .get(&role)
            .and_then(|r| r.tumor.clone())
            .unwrap_or_else(|| role.default_tumor());
        PhantomSpec {
            tumor,
            ..self.phantom.clone()
        }
    }
}

fn spec_hash(spec: &PhantomSpec, role: DatasetRole, n: usize, dataset_seed: u64) -> String {
    let doc =
        serde_json::json!({ "spec": spec, "role": role, "n": n, "dataset_seed": dataset_seed });
    hex_digest(doc.to_string().as_bytes())
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Collision(dir.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_case(dir: &Path, role: DatasetRole, case: &PhantomCase) -> Result<CaseRecord> {
    let case_dir = dir.join(&case.case_id);
    let ann_dir = case_dir.join("ann");
    fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
    let rel = |name: &str| PathBuf::from(&case.case_id).join(name);
    let mut record = CaseRecord::new(&case.case_id, role);

    for &phase in role.phases() {
        let name = format!("{}.rvol", phase.name());
        rvol::write_grid(&dir.join(rel(&name)), &case.images[&phase], None)?;
        record.phases.insert(phase, rel(&name));
    }
    rvol::write_labels(&dir.join(rel("truth_seg.rvol")), &case.truth_seg)?;
    rvol::write_labels(&dir.join(rel("truth_ta.rvol")), &case.truth_ta)?;
    record.truth.insert(kind::SEG.into(), rel("truth_seg.rvol"));
    record.truth.insert(kind::TA.into(), rel("truth_ta.rvol"));

    let exposed = match role {
        DatasetRole::A => {
            let tumor_only =
                case.truth_seg
                    .relabel(ClassTable::seg3(), |l| if l == seg::TUMOR { l } else { 0 })?;
            Some((kind::TUMOR, tumor_only))
        }
        DatasetRole::B => Some((kind::SEG, case.truth_seg.clone())),
        DatasetRole::D => Some((kind::TA, case.truth_ta.clone())),
        DatasetRole::C => None,
    };
    if let Some((k, labels)) = exposed {
        let path = rel(&format!("ann/{k}.rvol"));
        rvol::write_labels(&dir.join(&path), &labels)?;
        record.set_annotation(k, path, Provenance::Manual)?;
    }
    Ok(record)
}

/// Generates `n` cases of one role under `root/<role>/` and writes its manifest.
pub fn generate_dataset(
    spec: &PhantomSpec,
    role: DatasetRole,
    n: usize,
    dataset_seed: u64,
    root: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    spec.validate()?;
    let dir = root.join(role.name());
    prepare_dir(&dir, overwrite)?;
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let case = generate_named(spec, case_seed(dataset_seed, role, i), case_id(role, i))?;
            write_case(&dir, role, &case)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(&dir, role, spec_hash(spec, role, n, dataset_seed));
    manifest.cases = records;
    manifest.save()?;
    Ok(manifest)
}

/// Root index listing the per-role manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub datasets: BTreeMap<DatasetRole, PathBuf>,
}

/// Generates every configured role under `root` and writes `root/manifest.json`.
pub fn generate_all(
    cfg: &GenConfig,
    root: &Path,
    overwrite: bool,
) -> Result<BTreeMap<DatasetRole, PathBuf>> {
    cfg.validate()?;
    let index_path = root.join(crate::pipeline::manifest::MANIFEST_FILE);
    if !overwrite {
        for role in cfg.roles.keys() {
            let dir = root.join(role.name());
            if dir.exists()
                && fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .next()
                    .is_some()
            {
                return Err(Error::Collision(dir));
            }
        }
        if index_path.exists() {
            return Err(Error::Collision(index_path));
        }
    }
    let mut out = BTreeMap::new();
    for (&role, rc) in &cfg.roles {
        let manifest = generate_dataset(
            &cfg.spec_for(role),
            role,
            rc.n,
            cfg.dataset_seed,
            root,
            overwrite,
        )?;
        out.insert(
            role,
            manifest.root.join(crate::pipeline::manifest::MANIFEST_FILE),
        );
    }
    let index = DatasetIndex {
        format_version: crate::pipeline::manifest::MANIFEST_VERSION,
        datasets: out
            .keys()
            .map(|r| {
                (
                    *r,
                    PathBuf::from(r.name()).join(crate::pipeline::manifest::MANIFEST_FILE),
                )
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    Ok(out)
}
