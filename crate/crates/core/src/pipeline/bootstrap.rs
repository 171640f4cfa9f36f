use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{kind, DatasetManifest, Provenance};
use crate::error::{Error, Result};
use crate::model::{extract_features, predict_features, FeatureConfig, LinearSoftmaxModel, Phase};
use crate::volume::{rvol, seg, ClassTable, LabelMap};

/// Training label for an A-role case: the teacher-B pancreas prediction with
/// the manual tumor written over it. Teacher-B tumor voxels are dropped.
pub fn compose_bootstrap(predicted: &LabelMap, manual_tumor: &LabelMap) -> Result<LabelMap> {
    if predicted.dims() != manual_tumor.dims() {
        return Err(Error::invalid(
            "teacher prediction and manual tumor differ in dims",
        ));
    }
    if predicted.classes() != &ClassTable::seg3() || manual_tumor.classes() != &ClassTable::seg3() {
        return Err(Error::invalid("bootstrapping expects SEG3 label maps"));
    }
    let data = predicted
        .data()
        .iter()
        .zip(manual_tumor.data())
        .map(|(&p, &t)| {
            if t == seg::TUMOR {
                seg::TUMOR
            } else if p == seg::PANCREAS {
                seg::PANCREAS
            } else {
                0
            }
        })
        .collect();
    predicted.with_data(data)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub bootstrapped: Vec<String>,
    /// (case id, reason) for cases left without a training label.
    pub skipped: Vec<(String, String)>,
}

/// Predicts the pancreas of every A-role case with teacher B on its venous
/// image, composes it with the manual tumor and writes the result under
/// `out_dir/<case>.rvol`. Returns a copy of the manifest whose `seg`
/// annotations point at the new files with provenance `bootstrapped`.
///
/// Cases without a venous image are skipped and listed in the report.
pub fn bootstrap_pancreas_labels(
    manifest: &DatasetManifest,
    teacher_b: &LinearSoftmaxModel,
    out_dir: &Path,
) -> Result<(DatasetManifest, BootstrapReport)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let features = FeatureConfig {
        radius: teacher_b.feature_config().radius,
        phases: vec![Phase::Venous],
    };
    if teacher_b.feature_config() != &features {
        return Err(Error::invalid("teacher B must be a venous-only model"));
    }
    let results: Vec<Result<std::path::PathBuf>> = manifest
        .cases
        .par_iter()
        .map(|case| {
            let venous = case
                .phases
                .get(&Phase::Venous)
                .ok_or_else(|| Error::MissingPhase("venous".into()))?;
            let images = [(Phase::Venous, rvol::read_f32(&manifest.resolve(venous))?)]
                .into_iter()
                .collect();
            let fm = extract_features(&images, &features)?;
            let predicted = predict_features(teacher_b, &fm, true)?
                .labels
                .expect("postprocess yields labels");
            let tumor = manifest.load_annotation(case, kind::TUMOR)?;
            let composed = compose_bootstrap(&predicted, &tumor)?;
            let path = out_dir.join(format!("{}.rvol", case.case_id));
            rvol::write_labels(&path, &composed)?;
            Ok(path)
        })
        .collect();

    let mut updated = manifest.clone();
    let mut report = BootstrapReport::default();
    for (case, result) in updated.cases.iter_mut().zip(results) {
        match result {
            Ok(path) => {
                case.set_annotation(kind::SEG, path, Provenance::Bootstrapped)?;
                report.bootstrapped.push(case.case_id.clone());
            }
            Err(e @ (Error::MissingPhase(_) | Error::DatasetIntegrity { .. })) => {
                log::error!("bootstrapping skipped case `{}`: {e}", case.case_id);
                report.skipped.push((case.case_id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((updated, report))
}
