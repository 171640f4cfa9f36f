use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use selfseg::model::{LrSchedule, TrainConfig};
use selfseg::phantom::{
    generate_all, DatasetRole, GenConfig, OrganSpec, PancreasSpec, PhantomSpec, RoleConfig,
};
use selfseg::pipeline::{
    fold_ids, run_pipeline, Ablation, CaseRecord, PipelineConfig, Provenance, RunReport,
    RUN_REPORT_FILE,
};
use selfseg::Error;

fn small_gen() -> GenConfig {
    let counts = [
        (DatasetRole::A, 6),
        (DatasetRole::B, 4),
        (DatasetRole::C, 4),
        (DatasetRole::D, 3),
    ];
    GenConfig {
        phantom: PhantomSpec {
            dims: [32, 32, 20],
            pancreas: PancreasSpec {
                center_mm: [24.0, 24.0, 30.0],
                length_mm: 36.0,
                ..Default::default()
            },
            organs: OrganSpec {
                count: 1,
                ..Default::default()
            },
            ..Default::default()
        },
        dataset_seed: 3,
        roles: counts
            .into_iter()
            .map(|(r, n)| (r, RoleConfig { n, tumor: None }))
            .collect(),
        ..GenConfig::default()
    }
}

/// Datasets shared by every test in this file.
fn data() -> &'static (tempfile::TempDir, BTreeMap<DatasetRole, PathBuf>) {
    static DATA: OnceLock<(tempfile::TempDir, BTreeMap<DatasetRole, PathBuf>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifests = generate_all(&small_gen(), dir.path(), false).unwrap();
        (dir, manifests)
    })
}

fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::new(data().1.clone());
    cfg.evaluation.folds = 3;
    let fast = TrainConfig {
        epochs: 3,
        steps_per_epoch: 8,
        batch_size: 256,
        schedule: LrSchedule::Constant { lr: 0.5 },
        ..cfg.training.teacher_a.clone()
    };
    cfg.training.teacher_a = fast.clone();
    cfg.training.teacher_b = fast.clone();
    cfg.training.student = fast.clone();
    cfg.training.ta = TrainConfig {
        class_balanced: true,
        ..fast
    };
    cfg
}

fn run(cfg: &PipelineConfig, out: &Path) -> RunReport {
    run_pipeline(cfg, Path::new("."), out).unwrap().report
}

#[test]
fn runs_are_deterministic() {
    let cfg = quick_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(&cfg, Path::new("."), a.path()).unwrap();
    let second = run_pipeline(&cfg, Path::new("."), b.path()).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(&first.run_dir, RUN_REPORT_FILE),
        read(&second.run_dir, RUN_REPORT_FILE)
    );
    assert!(!first.report.models.is_empty());
    for record in first.report.models.values() {
        assert_eq!(
            read(&first.run_dir, &record.file),
            read(&second.run_dir, &record.file)
        );
    }
    assert_eq!(first.report.table.rows.len(), Ablation::table_rows().len());
}

#[test]
fn audits_hold_and_ta_leaves_tumor_alone() {
    let out = tempfile::tempdir().unwrap();
    let report = run(&quick_config(), out.path());

    assert_eq!(report.audits.leakage.len(), 3);
    for audit in &report.audits.leakage {
        assert!(audit.leak_free, "fold {}", audit.fold);
        let test: BTreeSet<&String> = audit.test_cases.iter().collect();
        assert!(!test.is_empty());
        for (model, seen) in &audit.model_cases {
            assert!(
                seen.iter().all(|id| !test.contains(id)),
                "{model} saw a test case"
            );
        }
    }

    assert!(!report.audits.fresh_init.is_empty());
    for init in &report.audits.fresh_init {
        assert!(
            init.zero_initialized && init.distinct_from_teachers,
            "{}",
            init.model
        );
    }

    assert_eq!(report.ta_effect.len(), 3);
    for effect in &report.ta_effect {
        assert_eq!(effect.tumor_voxels_changed, 0, "fold {}", effect.fold);
        assert!(effect.pancreas_on_vessel_after <= effect.pancreas_on_vessel_before);
    }

    // every A case is scored exactly once per row
    for row in &report.results {
        assert_eq!(row.per_case.len(), 6, "{}", row.method);
        assert!(row
            .per_case
            .values()
            .all(|s| (0.0..=1.0).contains(&s.tumor) && (0.0..=1.0).contains(&s.pancreas)));
    }
}

#[test]
fn toggles_change_training_data() {
    let mut cfg = quick_config();
    cfg.ablations = vec![Ablation::Student {
        self_learning: false,
        ta: false,
        label: None,
    }];
    let out = tempfile::tempdir().unwrap();
    let report = run(&cfg, out.path());
    assert!(!report.models.contains_key("ta"));
    assert!(report.ta_effect.is_empty());
    assert!(report.pseudo.is_empty());
    for (name, record) in &report.models {
        if name.contains("student") {
            let seen = record.train_cases.iter().chain(&record.val_cases);
            assert!(seen.into_iter().all(|id| id.starts_with('A')), "{name}");
        }
    }
    assert_eq!(report.table.rows[0].training_data, vec!["A".to_string()]);

    let mut cfg = quick_config();
    cfg.ablations = vec![Ablation::Student {
        self_learning: true,
        ta: false,
        label: None,
    }];
    let out = tempfile::tempdir().unwrap();
    let report = run(&cfg, out.path());
    assert!(!report.models.contains_key("ta"));
    let student = report
        .models
        .iter()
        .find(|(n, _)| n.contains("student"))
        .unwrap()
        .1;
    assert!(student
        .train_cases
        .iter()
        .chain(&student.val_cases)
        .any(|id| id.starts_with('C')));
    for cases in report.pseudo.values() {
        assert!(cases.iter().all(|c| c.refine.is_none()));
    }
}

#[test]
fn rerun_into_same_directory_collides() {
    let cfg = quick_config();
    let out = tempfile::tempdir().unwrap();
    run(&cfg, out.path());
    let err = run_pipeline(&cfg, Path::new("."), out.path()).unwrap_err();
    assert!(matches!(err.root(), Error::Collision(_)), "{err}");
}

#[test]
fn provenance_only_moves_forward() {
    let mut case = CaseRecord::new("C000", DatasetRole::C);
    let p = PathBuf::from("x.rvol");
    case.set_annotation("seg", p.clone(), Provenance::Pseudo)
        .unwrap();
    assert!(case
        .set_annotation("seg", p.clone(), Provenance::Pseudo)
        .is_err());
    case.set_annotation("seg", p.clone(), Provenance::RefinedPseudo)
        .unwrap();
    assert!(case
        .set_annotation("seg", p.clone(), Provenance::Pseudo)
        .is_err());
    assert!(case
        .set_annotation("seg", p.clone(), Provenance::Bootstrapped)
        .is_err());
    assert_eq!(case.provenance("seg"), Some(Provenance::RefinedPseudo));

    let mut manual = CaseRecord::new("A000", DatasetRole::A);
    manual
        .set_annotation("tumor", p.clone(), Provenance::Manual)
        .unwrap();
    for later in [
        Provenance::Bootstrapped,
        Provenance::Pseudo,
        Provenance::RefinedPseudo,
        Provenance::Manual,
    ] {
        assert!(manual.set_annotation("tumor", p.clone(), later).is_err());
    }
}

#[test]
fn fold_sizes_differ_by_at_most_one() {
    for n in 2..40 {
        for k in 2..=n.min(7) {
            let ids = fold_ids(n, k, n as u64 * 31 + k as u64).unwrap();
            let sizes: Vec<usize> = (0..k)
                .map(|f| ids.iter().filter(|&&i| i == f).count())
                .collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "n={n} k={k}: {sizes:?}");
            assert!(*lo > 0);
        }
    }
}
