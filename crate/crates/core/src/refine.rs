//! Teaching-assistant refinement: a vessel-aware model trained on the
//! D-role data masks vessel voxels out of pancreas pseudo-labels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    extract_features, predict_features, train, FeatureConfig, FeatureMatrix, LinearSoftmaxModel,
    LossConfig, TrainConfig, TrainLog, TrainTask, TrainingCase,
};
use crate::pipeline::manifest::{kind, DatasetManifest};
use crate::volume::{seg, ta, ClassTable, LabelMap};

/// The TA task: TA6 classes, selection by mean Dice over the four vessels.
pub fn ta_task(features: FeatureConfig) -> TrainTask {
    TrainTask {
        classes: ClassTable::ta6(),
        features,
        selection_classes: (ta::PANCREAS..=ta::TRUNCUS_COELIACUS).collect(),
    }
}

/// Trains the teaching assistant on every case of a D-role manifest.
pub fn train_teaching_assistant(
    manifest: &DatasetManifest,
    features: &FeatureConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(LinearSoftmaxModel, TrainLog)> {
    let loaded = manifest
        .cases
        .par_iter()
        .map(|case| {
            let labels = manifest.load_annotation(case, kind::TA)?;
            if labels.classes() != &ClassTable::ta6() {
                return Err(Error::DatasetIntegrity {
                    case: case.case_id.clone(),
                    reason: "`ta` annotation is not over the TA6 class table".into(),
                });
            }
            let images = manifest.load_images(case)?;
            let fm = extract_features(&images, features)?;
            Ok((case.case_id.clone(), fm, labels))
        })
        .collect::<Result<Vec<(String, FeatureMatrix, LabelMap)>>>()?;
    let cases: Vec<TrainingCase<'_>> = loaded
        .iter()
        .map(|(id, features, labels)| TrainingCase {
            id,
            features,
            labels,
            mask: None,
        })
        .collect();
    train(
        &ta_task(features.clone()),
        None,
        &cases,
        train_cfg,
        loss_cfg,
    )
}

/// Hard TA prediction: argmax only, no largest-component filter, since the
/// vessels are several separate structures.
pub fn ta_predict(model: &LinearSoftmaxModel, features: &FeatureMatrix) -> Result<LabelMap> {
    if model.classes() != &ClassTable::ta6() {
        return Err(Error::invalid("teaching assistant must predict over TA6"));
    }
    let pred = predict_features(model, features, false)?;
    Ok(crate::volume::argmax_labels(&pred.probs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    /// Also mask tumor voxels predicted as vessel.
    pub mask_tumor: bool,
}

/// Voxels removed from the pseudo-label, per vessel class name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineReport {
    pub masked: BTreeMap<String, usize>,
    /// Tumor voxels that lie on predicted vessels (masked only with `mask_tumor`).
    pub tumor_on_vessel: usize,
}

impl RefineReport {
    pub fn total_masked(&self) -> usize {
        self.masked.values().sum()
    }
}

/// Pancreas voxels predicted as a vessel become background; everything else,
/// tumor included, is kept.
pub fn refine_pseudo(pseudo: &LabelMap, ta_pred: &LabelMap) -> Result<LabelMap> {
    refine_pseudo_with(pseudo, ta_pred, RefineOptions::default()).map(|(labels, _)| labels)
}

pub fn refine_pseudo_with(
    pseudo: &LabelMap,
    ta_pred: &LabelMap,
    opts: RefineOptions,
) -> Result<(LabelMap, RefineReport)> {
    if pseudo.dims() != ta_pred.dims() {
        return Err(Error::invalid(format!(
            "pseudo-label dims {:?} differ from TA prediction dims {:?}",
            pseudo.dims(),
            ta_pred.dims()
        )));
    }
    if pseudo.classes() != &ClassTable::seg3() || ta_pred.classes() != &ClassTable::ta6() {
        return Err(Error::invalid(
            "refinement expects SEG3 pseudo-labels and a TA6 prediction",
        ));
    }
    let ta6 = ClassTable::ta6();
    let mut report = RefineReport {
        masked: ta::VESSELS
            .iter()
            .map(|&v| (ta6.name(v).unwrap_or_default().to_string(), 0))
            .collect(),
        tumor_on_vessel: 0,
    };
    let mut masked_by = [0usize; 6];
    let data = pseudo
        .data()
        .iter()
        .zip(ta_pred.data())
        .map(|(&p, &t)| {
            let on_vessel = ta::VESSELS.contains(&t);
            if on_vessel && p == seg::TUMOR {
                report.tumor_on_vessel += 1;
            }
            let maskable = p == seg::PANCREAS || (opts.mask_tumor && p == seg::TUMOR);
            if on_vessel && maskable {
                masked_by[t as usize] += 1;
                0
            } else {
                p
            }
        })
        .collect();
    for v in ta::VESSELS {
        report.masked.insert(
            ta6.name(v).unwrap_or_default().to_string(),
            masked_by[v as usize],
        );
    }
    Ok((pseudo.with_data(data)?, report))
}
