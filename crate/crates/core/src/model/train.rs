//! Mini-batch SGD over sampled voxels with validation-based checkpoint
//! selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{FeatureConfig, FeatureMatrix};
use super::linear::{predict_features, LinearSoftmaxModel, Normalization};
use super::loss::{loss_and_grad, softmax_rows, LossConfig};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::volume::{ClassTable, LabelMap};

/// Stream offset so the split shuffle never shares draws with batch sampling.
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `lr * gamma^(epoch / every)` with 0-based epochs.
    Step {
        lr: f64,
        gamma: f64,
        every: usize,
    },
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Step { lr, gamma, every } => lr * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Voxels per step.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Share of cases held out for checkpoint selection. 0 disables
    /// validation and keeps the last epoch.
    pub validation_fraction: f64,
    pub class_balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 384,
            schedule: LrSchedule::Constant { lr: 0.5 },
            seed: 0,
            validation_fraction: 0.2,
            class_balanced: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "epochs, steps_per_epoch and batch_size must be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0,1)"));
        }
        let lr_ok = match self.schedule {
            LrSchedule::Constant { lr } => lr > 0.0,
            LrSchedule::Step { lr, gamma, every } => lr > 0.0 && gamma > 0.0 && every > 0,
        };
        if !lr_ok {
            return Err(Error::invalid("learning rate schedule must be positive"));
        }
        Ok(())
    }
}

/// What is being trained and how checkpoints are ranked.
#[derive(Clone, Debug)]
pub struct TrainTask {
    pub classes: ClassTable,
    pub features: FeatureConfig,
    /// Checkpoints are ranked by mean validation Dice over these classes.
    pub selection_classes: Vec<u8>,
}

/// One training case: precomputed features, target labels and an optional
/// eligibility mask (voxels marked `false` are never sampled).
#[derive(Clone, Copy, Debug)]
pub struct TrainingCase<'a> {
    pub id: &'a str,
    pub features: &'a FeatureMatrix,
    pub labels: &'a LabelMap,
    pub mask: Option<&'a [bool]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_step_loss: f64,
    /// Loss of the end-of-epoch weights on a fixed probe batch.
    pub probe_loss: f64,
    pub val_dice: BTreeMap<String, f64>,
    pub selection_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub initial_probe_loss: f64,
    /// Content hash of the weights training started from.
    pub initial_model_hash: String,
    pub initial_weights_zero: bool,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were returned.
    pub selected_epoch: usize,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn final_probe_loss(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_probe_loss, |e| e.probe_loss)
    }
}

/// (case index, voxel index)
type VoxelRef = (u32, u32);

/// Splits case indices into (train, validation) with a seeded shuffle.
fn split_cases(n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("no training cases"));
    }
    if cfg.validation_fraction == 0.0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    if n < 2 {
        return Err(Error::invalid(format!(
            "a validation split needs at least 2 cases, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_STREAM));
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

fn check_case(task: &TrainTask, case: &TrainingCase<'_>) -> Result<()> {
    if case.features.n_features() != task.features.count() {
        return Err(Error::invalid(format!(
            "case `{}` has {} features, task expects {}",
            case.id,
            case.features.n_features(),
            task.features.count()
        )));
    }
    if case.labels.classes() != &task.classes {
        return Err(Error::invalid(format!(
            "case `{}` uses a different class table",
            case.id
        )));
    }
    if case.labels.dims() != case.features.dims() {
        return Err(Error::invalid(format!(
            "case `{}` labels and features differ in dims",
            case.id
        )));
    }
    if case.mask.is_some_and(|m| m.len() != case.labels.len()) {
        return Err(Error::invalid(format!(
            "case `{}` mask has the wrong length",
            case.id
        )));
    }
    Ok(())
}

struct Sampler {
    pools: Vec<Vec<VoxelRef>>,
    present: Vec<usize>,
    balanced: bool,
}

impl Sampler {
    fn new(cases: &[TrainingCase<'_>], train_idx: &[usize], k: usize, balanced: bool) -> Self {
        let mut pools = vec![Vec::new(); k];
        for &ci in train_idx {
            let case = &cases[ci];
            for (v, &l) in case.labels.data().iter().enumerate() {
                if case.mask.is_none_or(|m| m[v]) {
                    pools[l as usize].push((ci as u32, v as u32));
                }
            }
        }
        if !balanced {
            let all: Vec<VoxelRef> = pools.concat();
            pools = vec![all];
        }
        let present = (0..pools.len()).filter(|&c| !pools[c].is_empty()).collect();
        Self {
            pools,
            present,
            balanced,
        }
    }

    fn draw(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<VoxelRef> {
        let mut out = Vec::with_capacity(batch);
        if self.balanced {
            let per = batch / self.present.len();
            let extra = batch % self.present.len();
            for (i, &c) in self.present.iter().enumerate() {
                let pool = &self.pools[c];
                for _ in 0..per + (i < extra) as usize {
                    out.push(pool[rng.random_range(0..pool.len())]);
                }
            }
        } else {
            let pool = &self.pools[0];
            for _ in 0..batch {
                out.push(pool[rng.random_range(0..pool.len())]);
            }
        }
        out
    }
}

struct Batch {
    x: Vec<f64>,
    target: Vec<u8>,
}

fn gather(cases: &[TrainingCase<'_>], norm: &Normalization, refs: &[VoxelRef]) -> Batch {
    let f = norm.mean.len();
    let mut x = vec![0.0; refs.len() * f];
    let mut target = Vec::with_capacity(refs.len());
    for (row, &(ci, v)) in x.chunks_exact_mut(f).zip(refs) {
        let case = &cases[ci as usize];
        norm.apply(case.features.row(v as usize), row);
        target.push(case.labels.data()[v as usize]);
    }
    Batch { x, target }
}

/// Batch loss and its gradient with respect to the weight matrix.
fn batch_loss_grad(
    model: &LinearSoftmaxModel,
    batch: &Batch,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let k = model.classes().len();
    let f = model.n_features();
    let n = batch.target.len();
    let mut logits = vec![0.0; n * k];
    for (x, z) in batch.x.chunks_exact(f).zip(logits.chunks_exact_mut(k)) {
        model.logits_into(x, z);
    }
    let probs = softmax_rows(&logits, k);
    let (loss, g) = loss_and_grad(&probs, &batch.target, k, loss_cfg)?;
    let mut grad_w = vec![0.0; k * f];
    for (x, gv) in batch.x.chunks_exact(f).zip(g.chunks_exact(k)) {
        for c in 0..k {
            let gc = gv[c];
            if gc == 0.0 {
                continue;
            }
            let row = &mut grad_w[c * f..(c + 1) * f];
            for j in 0..f {
                row[j] += gc * x[j];
            }
        }
    }
    Ok((loss.total, grad_w))
}

/// Mean per-class Dice over the validation cases, postprocessed like inference.
fn validation_dice(
    model: &LinearSoftmaxModel,
    cases: &[TrainingCase<'_>],
    val_idx: &[usize],
) -> Result<Vec<f64>> {
    let k = model.classes().len();
    let per_case = val_idx
        .par_iter()
        .map(|&ci| {
            let case = &cases[ci];
            let pred = predict_features(model, case.features, true)?;
            let labels = pred.labels.expect("postprocess requested");
            (0..k as u8)
                .map(|c| dice(&labels, case.labels, c))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; k];
    for scores in &per_case {
        for c in 0..k {
            mean[c] += scores[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= per_case.len() as f64);
    Ok(mean)
}

/// Trains a model from `init` (or from zero weights with fresh normalization
/// statistics) on the given cases.
///
/// The returned weights are those of the epoch with the highest validation
/// selection score; ties keep the earlier epoch.
pub fn train(
    task: &TrainTask,
    init: Option<LinearSoftmaxModel>,
    cases: &[TrainingCase<'_>],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(LinearSoftmaxModel, TrainLog)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    task.features.validate()?;
    if task
        .selection_classes
        .iter()
        .any(|&c| !task.classes.contains(c))
    {
        return Err(Error::invalid("selection class outside the class table"));
    }
    cases.iter().try_for_each(|c| check_case(task, c))?;
    let (train_idx, val_idx) = split_cases(cases.len(), cfg)?;
    let k = task.classes.len();
    let f = task.features.count();

    let mut model = match init {
        Some(m) => {
            if m.classes() != &task.classes || m.feature_config() != &task.features {
                return Err(Error::invalid("initial model does not match the task"));
            }
            m
        }
        None => {
            let rows = train_idx.iter().flat_map(|&ci| {
                let case = &cases[ci];
                (0..case.features.n_voxels())
                    .filter(move |&v| case.mask.is_none_or(|m| m[v]))
                    .map(move |v| case.features.row(v))
            });
            let norm = Normalization::fit(f, rows);
            LinearSoftmaxModel::fresh(task.classes.clone(), task.features.clone(), norm)?
        }
    };

    let initial_model_hash = model.content_hash();
    let initial_weights_zero = model.weights().iter().all(|&w| w == 0.0);
    let sampler = Sampler::new(cases, &train_idx, k, cfg.class_balanced);
    if sampler.present.is_empty() {
        return Err(Error::invalid("no eligible training voxels"));
    }
    let mut warnings = Vec::new();
    let mut seen = vec![false; k];
    for &ci in &train_idx {
        for &l in cases[ci].labels.data() {
            seen[l as usize] = true;
        }
    }
    for c in task.classes.ids() {
        if !seen[c as usize] {
            let msg = format!(
                "class `{}` is absent from all training cases",
                task.classes.name(c).unwrap()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = gather(
        cases,
        model.normalization(),
        &sampler.draw(cfg.batch_size, &mut rng),
    );
    let initial_probe_loss = batch_loss_grad(&model, &probe, loss_cfg)?.0;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, LinearSoftmaxModel)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at_epoch(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = gather(
                cases,
                model.normalization(),
                &sampler.draw(cfg.batch_size, &mut rng),
            );
            let (loss, grad) = batch_loss_grad(&model, &batch, loss_cfg)?;
            loss_sum += loss;
            for (w, g) in model.weights_mut().iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        let probe_loss = batch_loss_grad(&model, &probe, loss_cfg)?.0;

        let mut val_dice = BTreeMap::new();
        let mut selection_score = None;
        if !val_idx.is_empty() {
            let scores = validation_dice(&model, cases, &val_idx)?;
            for c in task.classes.ids() {
                val_dice.insert(
                    task.classes.name(c).unwrap().to_string(),
                    scores[c as usize],
                );
            }
            let score = if task.selection_classes.is_empty() {
                0.0
            } else {
                task.selection_classes
                    .iter()
                    .map(|&c| scores[c as usize])
                    .sum::<f64>()
                    / task.selection_classes.len() as f64
            };
            selection_score = Some(score);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch + 1, model.clone()));
            }
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            lr,
            mean_step_loss: loss_sum / cfg.steps_per_epoch as f64,
            probe_loss,
            val_dice,
            selection_score,
        });
    }
    let (selected_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs, model),
    };
    let id = |&i: &usize| cases[i].id.to_string();
    let log = TrainLog {
        train_cases: train_idx.iter().map(id).collect(),
        val_cases: val_idx.iter().map(id).collect(),
        initial_probe_loss,
        initial_model_hash,
        initial_weights_zero,
        epochs,
        selected_epoch,
        warnings,
    };
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let cfg = TrainConfig {
            seed: 3,
            validation_fraction: 0.25,
            ..Default::default()
        };
        let (t1, v1) = split_cases(8, &cfg).unwrap();
        let (t2, v2) = split_cases(8, &cfg).unwrap();
        assert_eq!((t1.clone(), v1.clone()), (t2, v2));
        assert_eq!(v1.len(), 2);
        assert!(t1.iter().all(|i| !v1.contains(i)));
        assert!(split_cases(1, &cfg).is_err());
        let no_val = TrainConfig {
            validation_fraction: 0.0,
            ..cfg
        };
        assert_eq!(split_cases(1, &no_val).unwrap(), (vec![0], vec![]));
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step {
            lr: 1.0,
            gamma: 0.5,
            every: 2,
        };
        assert_eq!(
            [0, 1, 2, 3, 4].map(|e| s.at_epoch(e)),
            [1.0, 1.0, 0.5, 0.5, 0.25]
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
