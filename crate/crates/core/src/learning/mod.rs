//! Parametric pump policy and its training.

pub mod policy;
pub mod train;

pub use policy::{features, Normalizers, PolicyFile, PolicyNet, TrainingHeader, N_FEATURES, N_PARAMS};
pub use train::{batch_gradient, episode_gradient, finetune_safe, mean_loss, train_pure, SafeContext, TrainConfig, TrainReport, UnrollStats};
