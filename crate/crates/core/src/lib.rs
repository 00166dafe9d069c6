//! Training small convolutional classifiers whose confidence tracks input
//! distortion.
//!
//! A Gaussian head conditioned on each sample's blur level is attached to the
//! logits during training and discarded afterwards, leaving the plain network.
//! The crate covers the full pipeline: IDX loading, blur augmentation, the
//! network engine, training, evaluation statistics and median regression.

pub mod augment;
pub mod config;
pub mod eval;
pub mod idx;
pub mod model_file;
pub mod nn;
pub mod quantile;
pub mod rbf;
pub mod tensor;
pub mod train;

pub use augment::{AugmentedDataset, DistortedSample, Scheme};
pub use eval::{EvalRecord, MetricsReport};
pub use idx::{BaseDataset, LabeledImage};
pub use nn::{build_lenet_like, LayerSpec, NetworkModel};
pub use rbf::RbfConfig;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainMode, TrainedModel};
