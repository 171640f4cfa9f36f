//! The segmenter: per-voxel features, a linear softmax classifier, the
//! combined Dice + cross-entropy loss and its SGD trainer.

mod features;
mod linear;
mod loss;
mod train;

pub use features::{
    extract_features, phase_features, FeatureConfig, FeatureMatrix, Phase, PhaseFeatures,
    PhaseImages, FEATURES_PER_PHASE,
};
pub use linear::{
    forward, predict, predict_features, LinearSoftmaxModel, Normalization, Prediction,
};
pub use loss::{loss_and_grad, loss_and_grad_map, softmax_rows, LossConfig, LossValue};
pub use train::{train, EpochLog, LrSchedule, TrainConfig, TrainLog, TrainTask, TrainingCase};

pub(crate) use linear::hex_digest;
