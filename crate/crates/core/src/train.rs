//! Mini-batch SGD with momentum, with or without the Gaussian head.
//!
//! Both modes share the network; the head is applied to the logits only inside
//! the loss, so a model trained in RBF mode has exactly the layers it started
//! with.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{AugmentedDataset, DistortedSample};
use crate::idx::IMAGE_PIXELS;
use crate::nn::{argmax, softmax_into, Gradients, NetworkModel, NnError, Workspace};
use crate::rbf::{rbf_backward_into, rbf_transform_into, RbfConfig, RbfError};

/// Probability floor inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged: non-finite values in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("update produced non-finite parameters")]
    NonFiniteParameters,
    #[error(transparent)]
    Rbf(#[from] RbfError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain softmax cross-entropy on the logits.
    Baseline,
    /// Logits pass through the distortion-conditioned Gaussian head first.
    Rbf,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Rbf => "rbf",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(TrainMode::Baseline),
            "rbf" => Ok(TrainMode::Rbf),
            other => Err(format!("unknown mode {other:?} (expected baseline or rbf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Rbf,
            epochs: 200,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Percent of samples whose raw-logit argmax matched the label
    /// (measured on the forward pass preceding each update).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: NetworkModel,
    pub mode_trained: TrainMode,
    pub history: Vec<EpochStats>,
    pub train_config: TrainConfig,
    pub rbf_config: RbfConfig,
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<f64, TrainError> {
    let p = probabilities
        .get(label)
        .ok_or(TrainError::LabelOutOfRange {
            label,
            classes: probabilities.len(),
        })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Loss and its gradient w.r.t. the raw logits for one sample.
///
/// In RBF mode the head center is computed from `q` on every call.
pub fn loss_and_logit_gradient(
    logits: &[f64],
    label: usize,
    q: f64,
    mode: TrainMode,
    rbf: &RbfConfig,
    grad: &mut [f64],
) -> Result<f64, TrainError> {
    let k = logits.len();
    if label >= k {
        return Err(TrainError::LabelOutOfRange { label, classes: k });
    }
    let mut probs = vec![0.0; k];
    match mode {
        TrainMode::Baseline => {
            softmax_into(logits, &mut probs);
            let loss = cross_entropy(&probs, label)?;
            grad.copy_from_slice(&probs);
            grad[label] -= 1.0;
            Ok(loss)
        }
        TrainMode::Rbf => {
            let center = rbf.center_for(q)?;
            let mut head = vec![0.0; k];
            rbf_transform_into(logits, center, rbf, &mut head);
            softmax_into(&head, &mut probs);
            let loss = cross_entropy(&probs, label)?;
            probs[label] -= 1.0;
            rbf_backward_into(logits, center, rbf, &probs, grad);
            Ok(loss)
        }
    }
}

/// SGD-with-momentum state plus reusable forward/backward buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
    workspace: Workspace,
    grads: Gradients,
    input: Vec<f64>,
    logit_grad: Vec<f64>,
}

impl OptimizerState {
    pub fn new(model: &NetworkModel, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: model.param_slices().map(|s| vec![0.0; s.len()]).collect(),
            workspace: Workspace::new(model),
            grads: Gradients::zeros_like(model),
            input: vec![0.0; model.input_len()],
            logit_grad: vec![0.0; model.num_classes()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    /// Mean loss over the batch, measured before the update.
    pub loss: f64,
    pub correct: usize,
    pub size: usize,
}

/// One update on a mini-batch: `v <- mu v - lr g; w <- w + v` with `g` the
/// batch-mean gradient.
pub fn train_step(
    model: &mut NetworkModel,
    batch: &[&DistortedSample],
    mode: TrainMode,
    rbf: &RbfConfig,
    state: &mut OptimizerState,
) -> Result<BatchStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if model.input_len() != IMAGE_PIXELS {
        return Err(NnError::ShapeMismatch(format!(
            "model expects {} inputs, samples carry {IMAGE_PIXELS}",
            model.input_len()
        ))
        .into());
    }
    state.grads.clear();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for sample in batch {
        for (dst, &p) in state.input.iter_mut().zip(sample.pixels.iter()) {
            *dst = f64::from(p);
        }
        let logits = state.workspace.forward(model, &state.input)?;
        let label = usize::from(sample.label);
        if argmax(logits) == label {
            correct += 1;
        }
        loss_sum +=
            loss_and_logit_gradient(logits, label, sample.q, mode, rbf, &mut state.logit_grad)?;
        state
            .workspace
            .backward_into(model, &state.logit_grad, &mut state.grads, false)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((w, g), v) in model
        .param_slices_mut()
        .zip(state.grads.slices())
        .zip(state.velocity.iter_mut())
    {
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi - lr * gi * scale;
            *wi += *vi;
        }
        // Rectifiers map NaN to 0, so a blown-up layer can hide behind finite logits.
        if !w.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFiniteParameters);
        }
    }
    Ok(BatchStats {
        loss: loss_sum * scale,
        correct,
        size: batch.len(),
    })
}

pub fn train(
    dataset: &AugmentedDataset,
    net: NetworkModel,
    train_cfg: &TrainConfig,
    rbf_cfg: &RbfConfig,
) -> Result<TrainedModel, TrainError> {
    train_with_observer(dataset, net, train_cfg, rbf_cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with_observer(
    dataset: &AugmentedDataset,
    mut net: NetworkModel,
    train_cfg: &TrainConfig,
    rbf_cfg: &RbfConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel, TrainError> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("training set is empty".into()));
    }
    if train_cfg.mode == TrainMode::Rbf {
        rbf_cfg.validate()?;
        if rbf_cfg.num_classes != net.num_classes() {
            return Err(TrainError::InvalidConfig(format!(
                "head configured for {} classes, network has {}",
                rbf_cfg.num_classes,
                net.num_classes()
            )));
        }
        for s in &dataset.samples {
            rbf_cfg.center_for(s.q)?;
        }
    }

    let mut state = OptimizerState::new(&net, train_cfg.learning_rate, train_cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch: Vec<&DistortedSample> = Vec::with_capacity(train_cfg.batch_size);
    let mut history = Vec::with_capacity(train_cfg.epochs);

    for epoch in 1..=train_cfg.epochs {
        if train_cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(train_cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &dataset.samples[i]));
            let stats =
                train_step(&mut net, &batch, train_cfg.mode, rbf_cfg, &mut state).map_err(|e| {
                    match e {
                        TrainError::NonFiniteParameters | TrainError::Nn(NnError::NonFinite(_)) => {
                            TrainError::Divergence { epoch }
                        }
                        other => other,
                    }
                })?;
            if !stats.loss.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            loss_sum += stats.loss * stats.size as f64;
            correct += stats.correct;
        }
        let n = dataset.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            accuracy: 100.0 * correct as f64 / n,
        };
        on_epoch(&stats);
        history.push(stats);
    }

    // The model file stores 4-byte floats; snapping here makes save/load exact.
    for w in net.param_slices_mut() {
        w.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
    Ok(TrainedModel {
        model: net,
        mode_trained: train_cfg.mode,
        history,
        train_config: train_cfg.clone(),
        rbf_config: *rbf_cfg,
    })
}

/// Percent of samples whose raw-logit argmax equals the label.
pub fn dataset_accuracy(
    model: &NetworkModel,
    dataset: &AugmentedDataset,
) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("empty dataset".into()));
    }
    let mut ws = Workspace::new(model);
    let mut input = vec![0.0; model.input_len()];
    let mut correct = 0usize;
    for s in &dataset.samples {
        for (dst, &p) in input.iter_mut().zip(s.pixels.iter()) {
            *dst = f64::from(p);
        }
        if argmax(ws.forward(model, &input)?) == usize::from(s.label) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}
