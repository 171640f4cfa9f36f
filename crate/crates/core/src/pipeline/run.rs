use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_pancreas_labels, BootstrapReport};
use super::config::{Ablation, PipelineConfig};
use super::crossval::crossval_split;
use super::manifest::{kind, DatasetManifest, Provenance};
use crate::error::{Error, Result};
use crate::fusion::{make_pseudo_labels, FusionDiagnostics};
use crate::metrics::{dice, summarize, AblationRow, AblationTable, Summary};
use crate::model::{
    phase_features, predict_features, train, FeatureConfig, FeatureMatrix, LinearSoftmaxModel,
    Phase, PhaseFeatures, TrainConfig, TrainLog, TrainTask, TrainingCase,
};
use crate::phantom::{mix, DatasetRole};
use crate::refine::{refine_pseudo_with, ta_predict, train_teaching_assistant, RefineReport};
use crate::volume::{rvol, seg, ta, ClassTable, Dims, LabelMap, Spacing};

pub const RUN_REPORT_VERSION: u32 = 1;
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Per-phase features of one case, computed once per run.
struct CaseData {
    id: String,
    dims: Dims,
    spacing: Spacing,
    phases: BTreeMap<Phase, PhaseFeatures>,
}

impl CaseData {
    fn load(manifest: &DatasetManifest, idx: usize, radius: usize) -> Result<Self> {
        let case = &manifest.cases[idx];
        let images = manifest.load_images(case)?;
        let first = images
            .values()
            .next()
            .ok_or_else(|| Error::DatasetIntegrity {
                case: case.case_id.clone(),
                reason: "no phase images".into(),
            })?;
        let (dims, spacing) = (first.dims(), first.spacing());
        if images.values().any(|g| !g.same_geometry(first)) {
            return Err(Error::DatasetIntegrity {
                case: case.case_id.clone(),
                reason: "phase images differ in geometry".into(),
            });
        }
        let phases = images
            .iter()
            .map(|(&p, g)| (p, phase_features(g, radius)))
            .collect();
        Ok(Self {
            id: case.case_id.clone(),
            dims,
            spacing,
            phases,
        })
    }

    fn features(&self, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
        let parts = cfg
            .phases
            .iter()
            .map(|p| {
                self.phases
                    .get(p)
                    .ok_or_else(|| Error::MissingPhase(p.name().into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMatrix::assemble(self.dims, self.spacing, &parts))
    }
}

fn load_cases(manifest: &DatasetManifest, radius: usize) -> Result<Vec<CaseData>> {
    (0..manifest.cases.len())
        .into_par_iter()
        .map(|i| CaseData::load(manifest, i, radius))
        .collect()
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Training settings for one model, with a seed derived from the run seed,
/// the model name and the fold.
fn seeded(base: &TrainConfig, run_seed: u64, name: &str, fold: usize) -> TrainConfig {
    TrainConfig {
        seed: mix(run_seed ^ mix(base.seed ^ name_hash(name) ^ mix(fold as u64))),
        ..base.clone()
    }
}

fn seg_task(phases: Vec<Phase>, radius: usize) -> TrainTask {
    TrainTask {
        classes: ClassTable::seg3(),
        features: FeatureConfig { radius, phases },
        selection_classes: vec![seg::PANCREAS, seg::TUMOR],
    }
}

/// Labels of a case set, with the provenance they were recorded under.
struct LabelSet<'a> {
    manifest: &'a DatasetManifest,
    labels: BTreeMap<String, LabelMap>,
}

impl<'a> LabelSet<'a> {
    fn load(manifest: &'a DatasetManifest, ids: &[&str], expected: Provenance) -> Result<Self> {
        let labels = ids
            .par_iter()
            .map(|id| {
                let case = manifest.case(id).ok_or_else(|| Error::DatasetIntegrity {
                    case: id.to_string(),
                    reason: "not in manifest".into(),
                })?;
                match case.provenance(kind::SEG) {
                    Some(p) if p == expected => {}
                    found => {
                        return Err(Error::Provenance(format!(
                            "case `{id}`: training label has provenance {}, expected {expected}",
                            found.map_or("none".to_string(), |p| p.to_string())
                        )))
                    }
                }
                Ok((id.to_string(), manifest.load_annotation(case, kind::SEG)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            labels: labels.into_iter().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub file: String,
    pub hash: String,
    pub initial_hash: String,
    pub initial_zero: bool,
    pub selected_epoch: usize,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub spec_hash: String,
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoCase {
    pub case_id: String,
    pub fusion: FusionDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineReport>,
}

/// Pancreas pseudo-label voxels lying on ground-truth vessels, before and
/// after refinement, over the C-role cases of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaEffect {
    pub fold: usize,
    pub pancreas_on_vessel_before: usize,
    pub pancreas_on_vessel_after: usize,
    pub tumor_voxels_changed: usize,
}

impl TaEffect {
    pub fn reduction(&self) -> f64 {
        if self.pancreas_on_vessel_before == 0 {
            return 0.0;
        }
        1.0 - self.pancreas_on_vessel_after as f64 / self.pancreas_on_vessel_before as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub test_cases: Vec<String>,
    /// Every case id seen (training or validation) per model of the fold.
    pub model_cases: BTreeMap<String, Vec<String>>,
    pub leak_free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitAudit {
    pub model: String,
    pub initial_hash: String,
    pub zero_initialized: bool,
    pub distinct_from_teachers: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub fold: usize,
    pub tumor: f64,
    pub pancreas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub method: String,
    pub ablation: Ablation,
    pub per_case: BTreeMap<String, CaseScore>,
    pub tumor: Summary,
    pub pancreas: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audits {
    pub leakage: Vec<FoldAudit>,
    pub fresh_init: Vec<InitAudit>,
}

/// Everything a run produced, minus wall-clock timings and absolute paths,
/// so identical configs give byte-identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub datasets: BTreeMap<DatasetRole, DatasetSummary>,
    pub stages: Vec<String>,
    pub models: BTreeMap<String, ModelRecord>,
    pub bootstrap: BootstrapReport,
    pub refine_a: BTreeMap<String, RefineReport>,
    pub pseudo: BTreeMap<usize, Vec<PseudoCase>>,
    pub ta_effect: Vec<TaEffect>,
    pub audits: Audits,
    pub results: Vec<RowResult>,
    pub table: AblationTable,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, method: &str) -> Option<&RowResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: RunReport,
}

/// Directory name of a run: keyed by the config hash.
pub fn run_dir_name(cfg: &PipelineConfig) -> String {
    format!("run-{}", &cfg.hash()[..16])
}

struct Timings(BTreeMap<String, f64>);

impl Timings {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {stage}");
        let out = f();
        self.0
            .insert(stage.to_string(), start.elapsed().as_secs_f64());
        out
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains, saves and records one model.
struct Trainer<'r> {
    run_dir: &'r Path,
    models: BTreeMap<String, ModelRecord>,
}

impl Trainer<'_> {
    fn fit(
        &mut self,
        name: &str,
        task: &TrainTask,
        cases: &[TrainingCase<'_>],
        cfg: &TrainConfig,
        loss: &crate::model::LossConfig,
    ) -> Result<LinearSoftmaxModel> {
        let (model, log) = train(task, None, cases, cfg, loss)?;
        self.record(name, &model, &log)?;
        Ok(model)
    }

    fn record(&mut self, name: &str, model: &LinearSoftmaxModel, log: &TrainLog) -> Result<()> {
        let file = format!("models/{name}.json");
        let path = self.run_dir.join(&file);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        model.save(&path)?;
        self.models.insert(
            name.to_string(),
            ModelRecord {
                file,
                hash: model.content_hash(),
                initial_hash: log.initial_model_hash.clone(),
                initial_zero: log.initial_weights_zero,
                selected_epoch: log.selected_epoch,
                train_cases: log.train_cases.clone(),
                val_cases: log.val_cases.clone(),
                warnings: log.warnings.clone(),
            },
        );
        Ok(())
    }
}

fn training_cases<'a>(
    sets: &[(&'a [CaseData], &'a [FeatureMatrix], &'a LabelSet<'a>)],
) -> Vec<TrainingCase<'a>> {
    let mut out = Vec::new();
    for (data, features, labels) in sets {
        for (case, fm) in data.iter().zip(features.iter()) {
            if let Some(l) = labels.labels.get(&case.id) {
                out.push(TrainingCase {
                    id: &case.id,
                    features: fm,
                    labels: l,
                    mask: None,
                });
            }
        }
    }
    out
}

fn sorted_phases(phases: &[Phase]) -> Vec<Phase> {
    let mut p = phases.to_vec();
    p.sort();
    p
}

fn evaluate(
    model: &LinearSoftmaxModel,
    cases: &[&CaseData],
    truths: &BTreeMap<String, LabelMap>,
) -> Result<Vec<(String, f64, f64)>> {
    cases
        .par_iter()
        .map(|case| {
            let fm = case.features(model.feature_config())?;
            let pred = predict_features(model, &fm, true)?
                .labels
                .expect("postprocess yields labels");
            let truth = &truths[&case.id];
            Ok((
                case.id.clone(),
                dice(&pred, truth, seg::TUMOR)?,
                dice(&pred, truth, seg::PANCREAS)?,
            ))
        })
        .collect()
}

/// Runs the full flow under `out/<run-hash>/`. `base` resolves relative
/// dataset paths in the config.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_dir = out.join(run_dir_name(cfg));
    if run_dir.exists()
        && fs::read_dir(&run_dir)
            .map_err(|e| Error::io(&run_dir, e))?
            .next()
            .is_some()
    {
        return Err(Error::Collision(run_dir));
    }
    create_dir(&run_dir)?;
    let run_dir = fs::canonicalize(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let mut timings = Timings(BTreeMap::new());
    let report = execute(cfg, base, &run_dir, &mut timings)?;
    write_json(&run_dir.join(RUN_REPORT_FILE), &report.to_json())?;
    let timings_text = serde_json::to_string_pretty(&timings.0).expect("timings serialize");
    write_json(&run_dir.join(TIMINGS_FILE), &timings_text)?;
    Ok(RunOutcome { run_dir, report })
}

/// The ablation table of a full run.
pub fn run_ablations(cfg: &PipelineConfig, base: &Path, out: &Path) -> Result<AblationTable> {
    run_pipeline(cfg, base, out).map(|o| o.report.table)
}

fn execute(
    cfg: &PipelineConfig,
    base: &Path,
    run_dir: &Path,
    timings: &mut Timings,
) -> Result<RunReport> {
    let radius = cfg.feature_radius;
    let mut stages = Vec::new();
    let mut trainer = Trainer {
        run_dir,
        models: BTreeMap::new(),
    };

    // load
    let paths = cfg.resolved_datasets(base);
    let manifests = stage(
        "load",
        timings.time("load", || {
            paths
                .iter()
                .map(|(&role, path)| {
                    let m = DatasetManifest::load(path)?;
                    m.validate()?;
                    if m.role != role {
                        return Err(Error::Config(format!(
                            "datasets.{role}: manifest `{}` holds role {}",
                            path.display(),
                            m.role
                        )));
                    }
                    Ok((role, m))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        }),
    )?;
    stages.push("load".to_string());
    let datasets = manifests
        .iter()
        .map(|(&r, m)| {
            (
                r,
                DatasetSummary {
                    spec_hash: m.spec_hash.clone(),
                    cases: m.cases.len(),
                },
            )
        })
        .collect();
    let needs_c = cfg.ablations.iter().any(|a| {
        matches!(
            a,
            Ablation::Student {
                self_learning: true,
                ..
            }
        )
    });
    let needs_ta = cfg
        .ablations
        .iter()
        .any(|a| matches!(a, Ablation::Student { ta: true, .. }));
    let man_a = &manifests[&DatasetRole::A];
    let man_b = &manifests[&DatasetRole::B];

    let features_of =
        |role: DatasetRole| -> Result<Vec<CaseData>> { load_cases(&manifests[&role], radius) };
    let data_a = stage(
        "features",
        timings.time("features", || features_of(DatasetRole::A)),
    )?;
    let data_c = if needs_c {
        stage(
            "features",
            timings.time("features_c", || features_of(DatasetRole::C)),
        )?
    } else {
        Vec::new()
    };
    stages.push("features".to_string());
    let all3 = FeatureConfig {
        radius,
        phases: Phase::ALL.to_vec(),
    };
    let venous = FeatureConfig {
        radius,
        phases: vec![Phase::Venous],
    };

    // (1) teacher B on the B role, venous only
    let teacher_b = stage(
        "teacher_b",
        timings.time("teacher_b", || {
            let data_b = features_of(DatasetRole::B)?;
            let fms = data_b
                .iter()
                .map(|c| c.features(&venous))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<&str> = man_b.case_ids();
            let labels = LabelSet::load(man_b, &ids, Provenance::Manual)?;
            let cases = training_cases(&[(&data_b, &fms, &labels)]);
            let tc = seeded(&cfg.training.teacher_b, cfg.seed, "teacher_b", 0);
            trainer.fit(
                "teacher_b",
                &seg_task(vec![Phase::Venous], radius),
                &cases,
                &tc,
                &cfg.loss,
            )
        }),
    )?;
    stages.push("teacher_b".to_string());

    // (2) bootstrap A pancreas labels with teacher B
    let (boot_a, boot_report) = stage(
        "bootstrap",
        timings.time("bootstrap", || {
            bootstrap_pancreas_labels(man_a, &teacher_b, &run_dir.join("labels/A/bootstrapped"))
        }),
    )?;
    stages.push("bootstrap".to_string());
    let usable: BTreeSet<&str> = boot_report
        .bootstrapped
        .iter()
        .map(String::as_str)
        .collect();
    let a_idx: Vec<usize> = (0..data_a.len())
        .filter(|&i| usable.contains(data_a[i].id.as_str()))
        .collect();
    let a_ids: Vec<&str> = a_idx.iter().map(|&i| data_a[i].id.as_str()).collect();
    let labels_a = stage(
        "bootstrap",
        LabelSet::load(&boot_a, &a_ids, Provenance::Bootstrapped),
    )?;
    let truths_a: BTreeMap<String, LabelMap> = stage(
        "bootstrap",
        a_ids
            .par_iter()
            .map(|id| {
                Ok((
                    id.to_string(),
                    man_a.load_truth(man_a.case(id).unwrap(), kind::SEG)?,
                ))
            })
            .collect::<Result<Vec<_>>>(),
    )?
    .into_iter()
    .collect();

    // (5) teaching assistant on D, and its predictions on A and C
    let mut refine_a = BTreeMap::new();
    let mut refined_a_manifest = None;
    let mut ta_pred_c: BTreeMap<String, LabelMap> = BTreeMap::new();
    let mut truth_ta_c: BTreeMap<String, LabelMap> = BTreeMap::new();
    if needs_ta {
        let ta_model = stage(
            "teaching_assistant",
            timings.time("teaching_assistant", || {
                let tc = seeded(&cfg.training.ta, cfg.seed, "ta", 0);
                let (model, log) =
                    train_teaching_assistant(&manifests[&DatasetRole::D], &all3, &tc, &cfg.loss)?;
                trainer.record("ta", &model, &log)?;
                Ok(model)
            }),
        )?;
        stages.push("teaching_assistant".to_string());

        // (6a) refine the bootstrapped A labels
        let refined = stage(
            "refine_a",
            timings.time("refine_a", || {
                let dir = run_dir.join("labels/A/refined");
                create_dir(&dir)?;
                let out = a_idx
                    .par_iter()
                    .map(|&i| {
                        let case = &data_a[i];
                        let fm = case.features(&all3)?;
                        let pred = ta_predict(&ta_model, &fm)?;
                        let (labels, rep) =
                            refine_pseudo_with(&labels_a.labels[&case.id], &pred, cfg.refine)?;
                        let path = dir.join(format!("{}.rvol", case.id));
                        rvol::write_labels(&path, &labels)?;
                        Ok((case.id.clone(), path, rep))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut m = boot_a.clone();
                for (id, path, rep) in out {
                    let case = m
                        .cases
                        .iter_mut()
                        .find(|c| c.case_id == id)
                        .expect("case exists");
                    case.set_annotation(kind::SEG, path, Provenance::RefinedPseudo)?;
                    refine_a.insert(id, rep);
                }
                Ok(m)
            }),
        )?;
        stages.push("refine_a".to_string());
        refined_a_manifest = Some(refined);

        if needs_c {
            let man_c = &manifests[&DatasetRole::C];
            let preds = stage(
                "teaching_assistant",
                data_c
                    .par_iter()
                    .enumerate()
                    .map(|(i, case)| {
                        let fm = case.features(&all3)?;
                        let truth = man_c.load_truth(&man_c.cases[i], kind::TA)?;
                        Ok((case.id.clone(), ta_predict(&ta_model, &fm)?, truth))
                    })
                    .collect::<Result<Vec<_>>>(),
            )?;
            for (id, pred, truth) in preds {
                ta_pred_c.insert(id.clone(), pred);
                truth_ta_c.insert(id, truth);
            }
        }
    }

    // cross-validation over the usable A cases
    let folds = {
        let sub = DatasetManifest {
            cases: a_idx.iter().map(|&i| man_a.cases[i].clone()).collect(),
            ..man_a.clone()
        };
        stage(
            "crossval",
            crossval_split(&sub, cfg.evaluation.folds, cfg.seed),
        )?
    };
    let fold_of: BTreeMap<&str, usize> = a_ids.iter().copied().zip(folds.iter().copied()).collect();
    let feats_a3: Vec<FeatureMatrix> = stage(
        "features",
        data_a
            .par_iter()
            .map(|c| c.features(&all3))
            .collect::<Result<Vec<_>>>(),
    )?;
    let feats_c3: Vec<FeatureMatrix> = stage(
        "features",
        data_c
            .par_iter()
            .map(|c| c.features(&all3))
            .collect::<Result<Vec<_>>>(),
    )?;
    let refined_a_labels = match &refined_a_manifest {
        Some(m) => Some(stage(
            "refine_a",
            LabelSet::load(m, &a_ids, Provenance::RefinedPseudo),
        )?),
        None => None,
    };

    let mut per_row: Vec<BTreeMap<String, CaseScore>> = vec![BTreeMap::new(); cfg.ablations.len()];
    let mut pseudo_report = BTreeMap::new();
    let mut ta_effect = Vec::new();
    let mut leakage = Vec::new();
    let mut fresh_init = Vec::new();
    let teacher_hashes = |models: &BTreeMap<String, ModelRecord>| -> BTreeSet<String> {
        models
            .iter()
            .filter(|(k, _)| !k.contains("student"))
            .map(|(_, r)| r.hash.clone())
            .collect()
    };

    for fold in 0..cfg.evaluation.folds {
        let tag = format!("fold{fold}");
        let test: Vec<&CaseData> = a_idx
            .iter()
            .map(|&i| &data_a[i])
            .filter(|c| fold_of[c.id.as_str()] == fold)
            .collect();
        let test_ids: BTreeSet<String> = test.iter().map(|c| c.id.clone()).collect();
        let train_a: Vec<usize> = a_idx
            .iter()
            .copied()
            .filter(|&i| fold_of[data_a[i].id.as_str()] != fold)
            .collect();
        let train_ids: Vec<&str> = train_a.iter().map(|&i| data_a[i].id.as_str()).collect();
        let labels_fold = LabelSet {
            manifest: labels_a.manifest,
            labels: train_ids
                .iter()
                .map(|id| (id.to_string(), labels_a.labels[*id].clone()))
                .collect(),
        };
        let mut fold_models: BTreeMap<String, LinearSoftmaxModel> = BTreeMap::new();

        // (3) teachers on the A training folds; the three-phase one is teacher A
        let mut teacher_phase_sets: Vec<Vec<Phase>> = vec![Phase::ALL.to_vec()];
        for row in &cfg.ablations {
            if let Ablation::Teacher { phases, .. } = row {
                if !teacher_phase_sets.contains(&sorted_phases(phases)) {
                    teacher_phase_sets.push(sorted_phases(phases));
                }
            }
        }
        let teacher_a_needed = needs_c
            || cfg
                .ablations
                .iter()
                .any(|a| matches!(a, Ablation::Teacher { phases, .. } if sorted_phases(phases) == Phase::ALL.to_vec()));
        for phases in &teacher_phase_sets {
            if phases == &Phase::ALL.to_vec() && !teacher_a_needed {
                continue;
            }
            let name = if phases == &Phase::ALL.to_vec() {
                format!("{tag}/teacher_a")
            } else {
                format!(
                    "{tag}/teacher_{}",
                    phases
                        .iter()
                        .map(|p| p.name())
                        .collect::<Vec<_>>()
                        .join("+")
                )
            };
            let model = stage(
                "teacher_a",
                timings.time(&name, || {
                    let fc = FeatureConfig {
                        radius,
                        phases: phases.clone(),
                    };
                    let sub: Vec<&CaseData> = train_a.iter().map(|&i| &data_a[i]).collect();
                    let fms = sub
                        .par_iter()
                        .map(|c| c.features(&fc))
                        .collect::<Result<Vec<_>>>()?;
                    let cases: Vec<TrainingCase<'_>> = sub
                        .iter()
                        .zip(&fms)
                        .map(|(c, fm)| TrainingCase {
                            id: &c.id,
                            features: fm,
                            labels: &labels_fold.labels[&c.id],
                            mask: None,
                        })
                        .collect();
                    let tc = seeded(&cfg.training.teacher_a, cfg.seed, &name, fold);
                    trainer.fit(
                        &name,
                        &seg_task(phases.clone(), radius),
                        &cases,
                        &tc,
                        &cfg.loss,
                    )
                }),
            )?;
            fold_models.insert(name, model);
        }
        stages.push(format!("{tag}/teachers"));
        let teacher_a_name = format!("{tag}/teacher_a");

        // (4) pseudo-label C with the two teachers, (6b) refine with the TA
        let mut pseudo_manifest = None;
        let mut refined_manifest = None;
        if needs_c {
            let man_c = &manifests[&DatasetRole::C];
            let teacher_a = &fold_models[&teacher_a_name];
            let dir = run_dir.join(format!("labels/C/{tag}"));
            let (pm, rm, cases_report, effect) = stage(
                "pseudo_label",
                timings.time(&format!("{tag}/pseudo_label"), || {
                    create_dir(&dir.join("pseudo"))?;
                    if needs_ta {
                        create_dir(&dir.join("refined"))?;
                    }
                    let out = data_c
                        .par_iter()
                        .zip(&feats_c3)
                        .map(|(case, fm3)| {
                            let pa = predict_features(teacher_a, fm3, false)?.probs;
                            let pb = predict_features(&teacher_b, &case.features(&venous)?, false)?
                                .probs;
                            let (pseudo, diag) = make_pseudo_labels(&pa, &pb, &cfg.fusion)?;
                            let ppath = dir.join("pseudo").join(format!("{}.rvol", case.id));
                            rvol::write_labels(&ppath, &pseudo)?;
                            let mut refined = None;
                            if needs_ta {
                                let pred = &ta_pred_c[&case.id];
                                let (labels, rep) = refine_pseudo_with(&pseudo, pred, cfg.refine)?;
                                let rpath = dir.join("refined").join(format!("{}.rvol", case.id));
                                rvol::write_labels(&rpath, &labels)?;
                                let truth = &truth_ta_c[&case.id];
                                let on_vessel = |l: &LabelMap| {
                                    l.data()
                                        .iter()
                                        .zip(truth.data())
                                        .filter(|(&p, &t)| {
                                            p == seg::PANCREAS && ta::VESSELS.contains(&t)
                                        })
                                        .count()
                                };
                                let counts = (
                                    on_vessel(&pseudo),
                                    on_vessel(&labels),
                                    pseudo
                                        .data()
                                        .iter()
                                        .zip(labels.data())
                                        .filter(|(&a, &b)| (a == seg::TUMOR) != (b == seg::TUMOR))
                                        .count(),
                                );
                                refined = Some((rpath, rep, counts));
                            }
                            Ok((case.id.clone(), ppath, diag, refined))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut pm = man_c.clone();
                    let mut rm = needs_ta.then(|| man_c.clone());
                    let mut report = Vec::new();
                    let mut effect = TaEffect {
                        fold,
                        pancreas_on_vessel_before: 0,
                        pancreas_on_vessel_after: 0,
                        tumor_voxels_changed: 0,
                    };
                    for (id, ppath, diag, refined) in out {
                        let case = pm
                            .cases
                            .iter_mut()
                            .find(|c| c.case_id == id)
                            .expect("case exists");
                        case.set_annotation(kind::SEG, ppath.clone(), Provenance::Pseudo)?;
                        let mut refine = None;
                        if let (Some(rm), Some((rpath, rep, counts))) = (rm.as_mut(), refined) {
                            let case = rm
                                .cases
                                .iter_mut()
                                .find(|c| c.case_id == id)
                                .expect("case exists");
                            case.set_annotation(kind::SEG, ppath, Provenance::Pseudo)?;
                            case.set_annotation(kind::SEG, rpath, Provenance::RefinedPseudo)?;
                            effect.pancreas_on_vessel_before += counts.0;
                            effect.pancreas_on_vessel_after += counts.1;
                            effect.tumor_voxels_changed += counts.2;
                            refine = Some(rep);
                        }
                        report.push(PseudoCase {
                            case_id: id,
                            fusion: diag,
                            refine,
                        });
                    }
                    Ok((pm, rm, report, needs_ta.then_some(effect)))
                }),
            )?;
            stages.push(format!("{tag}/pseudo_label"));
            pseudo_report.insert(fold, cases_report);
            ta_effect.extend(effect);
            pseudo_manifest = Some(pm);
            refined_manifest = rm;
        }

        // (7) students from scratch
        for row in &cfg.ablations {
            let Ablation::Student {
                self_learning,
                ta: with_ta,
                ..
            } = row
            else {
                continue;
            };
            let name = format!(
                "{tag}/student{}{}",
                if *self_learning { "_self_learn" } else { "" },
                if *with_ta { "_ta" } else { "" }
            );
            if fold_models.contains_key(&name) {
                continue;
            }
            let model = stage(
                "student",
                timings.time(&name, || {
                    let a_set = if *with_ta {
                        let all = refined_a_labels.as_ref().expect("TA stage ran");
                        LabelSet {
                            manifest: all.manifest,
                            labels: train_ids
                                .iter()
                                .map(|id| (id.to_string(), all.labels[*id].clone()))
                                .collect(),
                        }
                    } else {
                        LabelSet {
                            manifest: labels_fold.manifest,
                            labels: labels_fold.labels.clone(),
                        }
                    };
                    let train_a_data: Vec<&CaseData> =
                        train_a.iter().map(|&i| &data_a[i]).collect();
                    let mut cases: Vec<TrainingCase<'_>> = train_a
                        .iter()
                        .zip(&train_a_data)
                        .map(|(&i, c)| TrainingCase {
                            id: &c.id,
                            features: &feats_a3[i],
                            labels: &a_set.labels[&c.id],
                            mask: None,
                        })
                        .collect();
                    let c_set;
                    if *self_learning {
                        let (m, expected) = if *with_ta {
                            (
                                refined_manifest.as_ref().expect("refined C"),
                                Provenance::RefinedPseudo,
                            )
                        } else {
                            (
                                pseudo_manifest.as_ref().expect("pseudo C"),
                                Provenance::Pseudo,
                            )
                        };
                        c_set = LabelSet::load(m, &m.case_ids(), expected)?;
                        cases.extend(training_cases(&[(&data_c, &feats_c3, &c_set)]));
                    }
                    let tc = seeded(&cfg.training.student, cfg.seed, &name, fold);
                    let model = trainer.fit(
                        &name,
                        &seg_task(Phase::ALL.to_vec(), radius),
                        &cases,
                        &tc,
                        &cfg.loss,
                    )?;
                    Ok(model)
                }),
            )?;
            let record = &trainer.models[&name];
            fresh_init.push(InitAudit {
                model: name.clone(),
                initial_hash: record.initial_hash.clone(),
                zero_initialized: record.initial_zero,
                distinct_from_teachers: !teacher_hashes(&trainer.models)
                    .contains(&record.initial_hash),
            });
            fold_models.insert(name, model);
        }
        stages.push(format!("{tag}/students"));

        // leakage audit
        let mut model_cases = BTreeMap::new();
        for name in fold_models
            .keys()
            .chain(["teacher_b".to_string(), "ta".to_string()].iter())
        {
            if let Some(r) = trainer.models.get(name) {
                let mut ids: Vec<String> =
                    r.train_cases.iter().chain(&r.val_cases).cloned().collect();
                ids.sort();
                model_cases.insert(name.clone(), ids);
            }
        }
        let leak_free = model_cases
            .values()
            .flatten()
            .all(|id| !test_ids.contains(id));
        leakage.push(FoldAudit {
            fold,
            test_cases: test_ids.iter().cloned().collect(),
            model_cases,
            leak_free,
        });
        if !leak_free {
            return Err(Error::DatasetIntegrity {
                case: tag,
                reason: "a held-out A case was used for training".into(),
            }
            .at_stage("audit"));
        }

        // (8) evaluate every row on the held-out fold
        for (r, row) in cfg.ablations.iter().enumerate() {
            let name = match row {
                Ablation::Teacher { phases, .. } => {
                    let p = sorted_phases(phases);
                    if p == Phase::ALL.to_vec() {
                        teacher_a_name.clone()
                    } else {
                        format!(
                            "{tag}/teacher_{}",
                            p.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
                        )
                    }
                }
                Ablation::Student {
                    self_learning,
                    ta: t,
                    ..
                } => format!(
                    "{tag}/student{}{}",
                    if *self_learning { "_self_learn" } else { "" },
                    if *t { "_ta" } else { "" }
                ),
            };
            let scores = stage("evaluate", evaluate(&fold_models[&name], &test, &truths_a))?;
            for (id, tumor, pancreas) in scores {
                per_row[r].insert(
                    id,
                    CaseScore {
                        fold,
                        tumor,
                        pancreas,
                    },
                );
            }
        }
        stages.push(format!("{tag}/evaluate"));
    }

    let mut results = Vec::new();
    let mut table = AblationTable::default();
    for (row, scores) in cfg.ablations.iter().zip(per_row) {
        let tumor: Vec<f64> = scores.values().map(|s| s.tumor).collect();
        let pancreas: Vec<f64> = scores.values().map(|s| s.pancreas).collect();
        let t = stage("evaluate", summarize(&tumor))?;
        let p = stage("evaluate", summarize(&pancreas))?;
        table.rows.push(AblationRow {
            method: row.label(),
            training_data: row.training_data(),
            tumor: t,
            pancreas: p,
        });
        results.push(RowResult {
            method: row.label(),
            ablation: row.clone(),
            per_case: scores,
            tumor: t,
            pancreas: p,
        });
    }
    if let Some(bad) = fresh_init
        .iter()
        .find(|a| !a.distinct_from_teachers || !a.zero_initialized)
    {
        return Err(Error::Provenance(format!(
            "student `{}` starts from teacher weights",
            bad.model
        ))
        .at_stage("audit"));
    }

    Ok(RunReport {
        format_version: RUN_REPORT_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        datasets,
        stages,
        models: trainer.models,
        bootstrap: boot_report,
        refine_a,
        pseudo: pseudo_report,
        ta_effect,
        audits: Audits {
            leakage,
            fresh_init,
        },
        results,
        table,
    })
}
