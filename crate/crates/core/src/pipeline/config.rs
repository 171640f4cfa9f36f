use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{hex_digest, LossConfig, LrSchedule, Phase, TrainConfig};
use crate::phantom::DatasetRole;
use crate::refine::RefineOptions;

pub const PIPELINE_CONFIG_VERSION: u32 = 1;

/// Training settings of the four model families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigs {
    pub teacher_a: TrainConfig,
    pub teacher_b: TrainConfig,
    pub ta: TrainConfig,
    pub student: TrainConfig,
}

impl Default for ModelConfigs {
    fn default() -> Self {
        let seg = TrainConfig {
            batch_size: 1024,
            schedule: LrSchedule::Step {
                lr: 1.0,
                gamma: 0.5,
                every: 5,
            },
            class_balanced: false,
            ..TrainConfig::default()
        };
        let ta = TrainConfig {
            schedule: LrSchedule::Step {
                lr: 0.3,
                gamma: 0.5,
                every: 5,
            },
            class_balanced: true,
            ..seg.clone()
        };
        Self {
            teacher_a: seg.clone(),
            teacher_b: seg.clone(),
            ta,
            student: seg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Ablation {
    /// A teacher trained on the A-role training folds with the given phases.
    Teacher {
        phases: Vec<Phase>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// The student, trained from scratch.
    Student {
        self_learning: bool,
        ta: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Ablation::Teacher { label: Some(l), .. } | Ablation::Student { label: Some(l), .. } => {
                l.clone()
            }
            Ablation::Teacher { phases, .. } if phases.len() == Phase::ALL.len() => {
                "3-phases (Teacher A)".into()
            }
            Ablation::Teacher { phases, .. } => phases
                .iter()
                .map(|p| p.name())
                .collect::<Vec<_>>()
                .join("+"),
            Ablation::Student {
                self_learning, ta, ..
            } => match (self_learning, ta) {
                (false, false) => "Student".into(),
                (true, false) => "+Self-learn".into(),
                (false, true) => "Student+TA".into(),
                (true, true) => "+Self-learn+TA".into(),
            },
        }
    }

    /// Dataset roles whose data shaped the row's model.
    pub fn training_data(&self) -> Vec<String> {
        let roles: &[&str] = match self {
            Ablation::Teacher { .. } => &["A"],
            Ablation::Student {
                self_learning: false,
                ta: false,
                ..
            } => &["A"],
            Ablation::Student {
                self_learning: true,
                ta: false,
                ..
            } => &["A", "C"],
            Ablation::Student {
                self_learning: false,
                ta: true,
                ..
            } => &["A", "D"],
            Ablation::Student {
                self_learning: true,
                ta: true,
                ..
            } => &["A", "C", "D"],
        };
        roles.iter().map(|r| r.to_string()).collect()
    }

    /// The default table: three single-phase teachers, the three-phase
    /// teacher, then the student with and without the teaching assistant.
    pub fn table_rows() -> Vec<Ablation> {
        let teacher = |phases: Vec<Phase>| Ablation::Teacher {
            phases,
            label: None,
        };
        vec![
            teacher(vec![Phase::NonContrast]),
            teacher(vec![Phase::Pancreatic]),
            teacher(vec![Phase::Venous]),
            teacher(Phase::ALL.to_vec()),
            Ablation::Student {
                self_learning: true,
                ta: false,
                label: None,
            },
            Ablation::Student {
                self_learning: true,
                ta: true,
                label: None,
            },
        ]
    }
}

/// Input of `selfseg run`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Manifest file (or directory) per role; relative paths resolve
    /// against the config file's directory.
    pub datasets: BTreeMap<DatasetRole, PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_radius")]
    pub feature_radius: usize,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub training: ModelConfigs,
    #[serde(default)]
    pub refine: RefineOptions,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default = "Ablation::table_rows")]
    pub ablations: Vec<Ablation>,
}

fn default_radius() -> usize {
    1
}

impl PipelineConfig {
    pub fn new(datasets: BTreeMap<DatasetRole, PathBuf>) -> Self {
        Self {
            version: PIPELINE_CONFIG_VERSION,
            datasets,
            seed: 0,
            feature_radius: 1,
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
            training: ModelConfigs::default(),
            refine: RefineOptions::default(),
            evaluation: EvalConfig::default(),
            ablations: Ablation::table_rows(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PIPELINE_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {PIPELINE_CONFIG_VERSION}, found {}",
                self.version
            )));
        }
        if self.ablations.is_empty() {
            return Err(Error::Config(
                "ablations: at least one row is required".into(),
            ));
        }
        let needs = |role: DatasetRole| -> Result<()> {
            if self.datasets.contains_key(&role) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "datasets: role {role} is required by the configured ablations"
                )))
            }
        };
        needs(DatasetRole::A)?;
        needs(DatasetRole::B)?;
        for row in &self.ablations {
            match row {
                Ablation::Teacher { phases, .. } => {
                    crate::model::FeatureConfig::new(phases.clone())
                        .validate()
                        .map_err(|e| Error::Config(format!("ablations: {e}")))?;
                }
                Ablation::Student {
                    self_learning, ta, ..
                } => {
                    if *self_learning {
                        needs(DatasetRole::C)?;
                    }
                    if *ta {
                        needs(DatasetRole::D)?;
                    }
                }
            }
        }
        if self.evaluation.folds < 2 {
            return Err(Error::Config("evaluation.folds must be >= 2".into()));
        }
        self.fusion
            .validate()
            .map_err(|e| Error::Config(format!("fusion: {e}")))?;
        self.loss
            .validate()
            .map_err(|e| Error::Config(format!("loss: {e}")))?;
        for (name, t) in [
            ("teacher_a", &self.training.teacher_a),
            ("teacher_b", &self.training.teacher_b),
            ("ta", &self.training.ta),
            ("student", &self.training.student),
        ] {
            t.validate()
                .map_err(|e| Error::Config(format!("training.{name}: {e}")))?;
        }
        Ok(())
    }

    /// Dataset manifest paths resolved against `base`.
    pub fn resolved_datasets(&self, base: &Path) -> BTreeMap<DatasetRole, PathBuf> {
        self.datasets
            .iter()
            .map(|(r, p)| (*r, base.join(p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn datasets() -> BTreeMap<DatasetRole, PathBuf> {
        DatasetRole::ALL
            .iter()
            .map(|r| (*r, PathBuf::from(r.name())))
            .collect()
    }

    #[test]
    fn json_round_trip_and_hash() {
        let cfg = PipelineConfig::new(datasets());
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = PipelineConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn unknown_fields_rejected_with_position() {
        let text = r#"{"version": 1, "datasets": {}, "sede": 3}"#;
        match PipelineConfig::from_json(text) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("sede"), "{msg}");
                assert!(msg.contains("line 1"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_role_for_ablation() {
        let mut ds = datasets();
        ds.remove(&DatasetRole::D);
        let cfg = PipelineConfig::new(ds);
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("role D")));
    }

    #[test]
    fn ablation_labels() {
        let rows = Ablation::table_rows();
        let labels: Vec<_> = rows.iter().map(Ablation::label).collect();
        assert_eq!(
            labels,
            [
                "non_contrast",
                "pancreatic",
                "venous",
                "3-phases (Teacher A)",
                "+Self-learn",
                "+Self-learn+TA"
            ]
        );
        let json = serde_json::to_string(&rows[4]).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"student","self_learning":true,"ta":false}"#
        );
    }
}
