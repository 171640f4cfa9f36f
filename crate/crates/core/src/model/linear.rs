use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{extract_features, FeatureConfig, FeatureMatrix, PhaseImages};
use crate::error::{Error, Result};
use crate::volume::{argmax_labels, largest_foreground_component, ClassTable, LabelMap, ProbMap};

const FORMAT_NAME: &str = "selfseg-linear-softmax";
const FORMAT_VERSION: u32 = 1;
const MIN_STD: f64 = 1e-12;

/// Per-feature standardization frozen at training time. The trailing bias
/// feature is never rescaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    /// Mean and population std of each non-bias feature over the given rows.
    /// Degenerate features get std 1.
    pub fn fit<'a>(n_features: usize, rows: impl Iterator<Item = &'a [f32]>) -> Self {
        let mut count = 0usize;
        let mut sum = vec![0.0f64; n_features];
        let mut rows_buf: Vec<&[f32]> = Vec::new();
        for row in rows {
            for (s, &x) in sum.iter_mut().zip(row) {
                *s += x as f64;
            }
            count += 1;
            rows_buf.push(row);
        }
        let mut norm = Self::identity(n_features);
        if count == 0 {
            return norm;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; n_features];
        for row in &rows_buf {
            for j in 0..n_features {
                let d = row[j] as f64 - mean[j];
                sq[j] += d * d;
            }
        }
        for j in 0..n_features - 1 {
            let std = (sq[j] / count as f64).sqrt();
            norm.mean[j] = mean[j];
            norm.std[j] = if std > MIN_STD { std } else { 1.0 };
        }
        norm
    }

    #[inline]
    pub fn apply(&self, row: &[f32], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = (row[j] as f64 - self.mean[j]) / self.std[j];
        }
    }
}

/// Per-voxel multinomial logistic regression on [`FeatureMatrix`] rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSoftmaxModel {
    classes: ClassTable,
    features: FeatureConfig,
    norm: Normalization,
    /// Row-major `classes x features`.
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    classes: ClassTable,
    features: FeatureConfig,
    normalization: Normalization,
    weights: Vec<Vec<f64>>,
}

/// Output of [`predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: ProbMap,
    /// Argmax labels reduced to the largest foreground component; present
    /// only when postprocessing was requested.
    pub labels: Option<LabelMap>,
}

impl LinearSoftmaxModel {
    /// A zero-weight model; every voxel gets the uniform distribution.
    pub fn fresh(
        classes: ClassTable,
        features: FeatureConfig,
        norm: Normalization,
    ) -> Result<Self> {
        features.validate()?;
        let f = features.count();
        if norm.mean.len() != f || norm.std.len() != f {
            return Err(Error::invalid(
                "normalization length differs from feature count",
            ));
        }
        let weights = vec![0.0; classes.len() * f];
        Self::from_parts(classes, features, norm, weights)
    }

    pub fn from_parts(
        classes: ClassTable,
        features: FeatureConfig,
        norm: Normalization,
        weights: Vec<f64>,
    ) -> Result<Self> {
        features.validate()?;
        let f = features.count();
        if norm.mean.len() != f || norm.std.len() != f {
            return Err(Error::invalid(
                "normalization length differs from feature count",
            ));
        }
        if norm.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || norm.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::invalid(
                "normalization stats must be finite with std > 0",
            ));
        }
        if weights.len() != classes.len() * f {
            return Err(Error::invalid(format!(
                "{} weights for {} classes x {f} features",
                weights.len(),
                classes.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(Self {
            classes,
            features,
            norm,
            weights,
        })
    }

    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn n_features(&self) -> usize {
        self.features.count()
    }

    /// Logits of one normalized feature row.
    #[inline]
    pub(crate) fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let f = x.len();
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * f..(c + 1) * f];
            *o = w.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn to_json(&self) -> String {
        let f = self.n_features();
        let file = ModelFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            classes: self.classes.clone(),
            features: self.features.clone(),
            normalization: self.norm.clone(),
            weights: self.weights.chunks(f).map(<[f64]>::to_vec).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("model json: {e}")))?;
        if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format `{}` v{}",
                file.format, file.version
            )));
        }
        let f = file.features.count();
        if file.weights.iter().any(|r| r.len() != f) {
            return Err(Error::invalid("weight rows differ from feature count"));
        }
        Self::from_parts(
            file.classes,
            file.features,
            file.normalization,
            file.weights.concat(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-voxel softmax of the model's logits.
pub fn forward(model: &LinearSoftmaxModel, features: &FeatureMatrix) -> Result<ProbMap> {
    let f = model.n_features();
    if features.n_features() != f {
        return Err(Error::invalid(format!(
            "model expects {f} features, got {}",
            features.n_features()
        )));
    }
    let k = model.classes.len();
    let n = features.n_voxels();
    let mut rows = vec![0.0f32; n * k];
    const CHUNK: usize = 4096;
    rows.par_chunks_mut(CHUNK * k)
        .enumerate()
        .for_each(|(chunk, out)| {
            let mut x = vec![0.0; f];
            let mut z = vec![0.0; k];
            let start = chunk * CHUNK;
            for (i, o) in out.chunks_exact_mut(k).enumerate() {
                model.norm.apply(features.row(start + i), &mut x);
                model.logits_into(&x, &mut z);
                softmax_into(&z, o);
            }
        });
    ProbMap::from_rows(
        features.dims(),
        features.spacing(),
        model.classes.clone(),
        &rows,
    )
}

#[inline]
fn softmax_into(z: &[f64], out: &mut [f32]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max).exp() / sum) as f32;
    }
}

/// Probabilities (and optionally postprocessed labels) for one case.
pub fn predict(
    model: &LinearSoftmaxModel,
    images: &PhaseImages,
    postprocess: bool,
) -> Result<Prediction> {
    let features = extract_features(images, &model.features)?;
    predict_features(model, &features, postprocess)
}

pub fn predict_features(
    model: &LinearSoftmaxModel,
    features: &FeatureMatrix,
    postprocess: bool,
) -> Result<Prediction> {
    let probs = forward(model, features)?;
    let labels = postprocess.then(|| largest_foreground_component(&argmax_labels(&probs)));
    Ok(Prediction { probs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::features::Phase;
    use crate::volume::VoxelGrid;

    fn venous_model(weights: Vec<f64>) -> LinearSoftmaxModel {
        let cfg = FeatureConfig::new(vec![Phase::Venous]);
        LinearSoftmaxModel::from_parts(ClassTable::seg3(), cfg, Normalization::identity(4), weights)
            .unwrap()
    }

    fn images(values: Vec<f32>) -> PhaseImages {
        let n = values.len();
        [(
            Phase::Venous,
            VoxelGrid::new([n, 1, 1], [1.0; 3], values).unwrap(),
        )]
        .into_iter()
        .collect()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let m = venous_model(vec![0.0; 12]);
        let p = predict(&m, &images(vec![1.0, -5.0, 30.0]), false).unwrap();
        assert!(p.labels.is_none());
        for v in 0..3 {
            for c in 0..3 {
                assert!((p.probs.prob(v, c) - 1.0 / 3.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn dominant_bias_saturates() {
        let mut w = vec![0.0; 12];
        w[2 * 4 + 3] = 50.0; // bias weight for class 2
        let p = predict(&venous_model(w), &images(vec![0.3, 2.0]), false).unwrap();
        // closed form: 1 / (1 + 2 e^-50)
        let expect = 1.0 / (1.0 + 2.0 * (-50.0f64).exp());
        for v in 0..2 {
            assert!((p.probs.prob(v, 2) as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = venous_model(vec![0.0; 12]);
        let cfg = FeatureConfig::new(vec![Phase::Venous, Phase::Pancreatic]);
        let imgs: PhaseImages = [Phase::Venous, Phase::Pancreatic]
            .into_iter()
            .map(|p| (p, VoxelGrid::filled([2, 1, 1], [1.0; 3], 0.0f32).unwrap()))
            .collect();
        let f = extract_features(&imgs, &cfg).unwrap();
        assert!(forward(&m, &f).is_err());
        assert!(matches!(
            predict(&m, &PhaseImages::new(), false),
            Err(Error::MissingPhase(_))
        ));
    }

    #[test]
    fn postprocess_keeps_one_component() {
        // class 1 wherever raw intensity is high
        let mut w = vec![0.0; 12];
        w[4] = 10.0;
        w[4 + 3] = -5.0;
        let p = predict(&venous_model(w), &images(vec![1.0, 1.0, 0.0, 1.0]), true).unwrap();
        // the radius-1 box features do not enter (zero weight), so raw decides
        assert_eq!(p.labels.unwrap().data(), &[1, 1, 0, 0]);
    }

    #[test]
    fn json_is_versioned() {
        let m = venous_model((0..12).map(|i| i as f64 * 0.1 - 0.3).collect());
        let text = m.to_json();
        assert_eq!(LinearSoftmaxModel::from_json(&text).unwrap(), m);
        let tampered = text.replace(FORMAT_NAME, "other");
        assert!(LinearSoftmaxModel::from_json(&tampered).is_err());
        assert_eq!(m.content_hash().len(), 64);
    }

    #[test]
    fn fit_normalization_clamps_degenerate() {
        let rows: Vec<[f32; 3]> = vec![[1.0, 5.0, 1.0], [3.0, 5.0, 1.0]];
        let n = Normalization::fit(3, rows.iter().map(|r| &r[..]));
        assert_eq!(n.mean, vec![2.0, 5.0, 0.0]);
        assert_eq!(n.std, vec![1.0, 1.0, 1.0]);
    }
}
