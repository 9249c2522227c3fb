//! Masked-image-modeling pretraining: round-robin single-modality batches,
//! AdamW with decoupled weight decay, linear warmup plus cosine decay.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::modality::{ModalityError, ModalityRegistry, ModalitySpec};
use crate::model::{ModelConfig, ModelError, OfaNet};
use crate::rng::{par_map, Key};
use crate::synth::{resize_nearest, SynthGenerator};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Modality(#[from] ModalityError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training data for modality '{0}'")]
    MissingData(String),
    #[error("{0}")]
    Callback(String),
}

/// Pretraining hyperparameters. The reference setting is 100 epochs over
/// 10,000 to 50,000 samples per sensor; defaults here are desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub mask_ratio: f64,
    pub samples_per_modality: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub modalities: Vec<String>,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            mask_ratio: 0.75,
            samples_per_modality: 512,
            batch_size: 16,
            epochs: 30,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            modalities: ["sentinel1", "sentinel2", "gaofen", "naip", "enmap"].map(String::from).to_vec(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        self.model.validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie strictly between 0 and 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.samples_per_modality < self.batch_size {
            return bad("samples_per_modality must be at least batch_size");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.modalities.is_empty() {
            return bad("modality list is empty");
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return Err(TrainError::InvalidConfig(format!("modality '{m}' listed twice")));
            }
        }
        Ok(())
    }

    pub fn steps_per_modality(&self) -> usize {
        self.samples_per_modality / self.batch_size
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_modality() * self.modalities.len()
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }
}

/// Linear warmup from 0 to `base_lr` over `round(warmup_fraction * total)`
/// steps, then cosine decay towards 0.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    let warmup = (config.warmup_fraction * total_steps as f64).round() as usize;
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One mini-batch of the schedule: a single modality and its sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedBatch {
    pub modality: String,
    pub indices: Vec<u64>,
}

/// Batches for one epoch, cycling through modalities in config order. Each
/// modality's samples are reshuffled per epoch; a trailing partial batch is
/// dropped.
pub fn epoch_plan(config: &TrainConfig, epoch: usize) -> Vec<PlannedBatch> {
    let per = config.steps_per_modality();
    let bs = config.batch_size;
    let perms: Vec<Vec<u64>> = config
        .modalities
        .iter()
        .map(|m| {
            let mut p: Vec<u64> = (0..config.samples_per_modality as u64).collect();
            p.shuffle(&mut Key::new(config.seed).str("epoch").str(m).u64(epoch as u64).rng());
            p
        })
        .collect();
    let mut plan = Vec::with_capacity(per * config.modalities.len());
    for b in 0..per {
        for (m, perm) in config.modalities.iter().zip(&perms) {
            plan.push(PlannedBatch { modality: m.clone(), indices: perm[b * bs..(b + 1) * bs].to_vec() });
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Updates applied to this parameter so far.
    pub t: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// Bias-corrected AdamW update of one parameter in place:
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_update(param: &mut [f32], grad: &[f32], state: &mut Moments, lr: f64, weight_decay: f64, hp: AdamWParams) -> Result<(), TrainError> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch { op: "adamw", lhs: vec![param.len()], rhs: vec![grad.len()] }));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    let decay = (1.0 - lr * weight_decay) as f32;
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] as f64 / c1;
        let v_hat = state.v[i] as f64 / c2;
        param[i] = param[i] * decay - (lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
    }
    Ok(())
}

/// Moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub hp: AdamWParams,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(hp: AdamWParams) -> Self {
        Self { hp, step: 0, moments: BTreeMap::new() }
    }

    /// Updates every parameter that received a gradient. Weight decay
    /// applies to matrices only; biases and norm parameters are exempt.
    pub fn step(&mut self, net: &mut OfaNet<f32>, grads: &crate::tensor::Gradients<f32>, lr: f64, weight_decay: f64) -> Result<(), TrainError> {
        self.step += 1;
        let hp = self.hp;
        let moments = &mut self.moments;
        let mut result = Ok(());
        net.visit_params_mut(&mut |name, p| {
            if result.is_err() {
                return;
            }
            let Some(g) = grads.of(p).cloned() else { return };
            let wd = if p.rank() >= 2 { weight_decay } else { 0.0 };
            let state = moments.entry(name.to_string()).or_insert_with(|| Moments::zeros(p.numel()));
            result = adamw_update(p.data_mut(), g.data(), state, lr, wd, hp);
        });
        result
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub modality: String,
    pub loss: f32,
    pub lr: f64,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{:.8e}\t{:.8e}", self.step, self.epoch, self.modality, self.loss, self.lr)
    }
}

/// Where pretraining images come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Generate samples on demand, keyed by `(seed, modality, index)`.
    Synthetic,
    /// Pre-generated unlabeled datasets, one per modality. Images are
    /// resized to the model input size if needed.
    Files(BTreeMap<String, Dataset>),
}

pub struct TrainOutcome {
    pub net: OfaNet<f32>,
    pub log: Vec<LossRecord>,
    pub optimizer: OptimizerState,
}

/// Runs the full pretraining schedule. `on_epoch(epoch, net, log)` fires
/// after every epoch; an error from it aborts training.
pub fn pretrain<F>(config: &TrainConfig, registry: &ModalityRegistry, source: &DataSource, threads: usize, mut on_epoch: F) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(usize, &OfaNet<f32>, &[LossRecord]) -> Result<(), TrainError>,
{
    config.validate()?;
    let specs = registry.select(&config.modalities)?;
    let size = config.model.input_size;
    if let DataSource::Files(sets) = source {
        for spec in &specs {
            let ds = sets.get(&spec.id).ok_or_else(|| TrainError::MissingData(spec.id.clone()))?;
            if ds.len() < config.samples_per_modality || ds.channels != spec.channels {
                return Err(TrainError::InvalidConfig(format!(
                    "dataset for '{}' has {} samples of {} channels, need {} of {}",
                    spec.id,
                    ds.len(),
                    ds.channels,
                    config.samples_per_modality,
                    spec.channels
                )));
            }
        }
    }
    let by_id: BTreeMap<&str, &ModalitySpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut net = OfaNet::<f32>::new(config.model.clone(), &specs, config.seed)?;
    let mut opt = OptimizerState::new(AdamWParams::default());
    let generator = SynthGenerator::new(size);
    let total = config.total_steps();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in epoch_plan(config, epoch) {
            let spec = by_id[batch.modality.as_str()];
            let images = load_batch(source, &generator, spec, config.seed, &batch.indices, size, threads)?;
            let lr = lr_at(step, total, config);
            let tape = Tape::new();
            let mask_key = Key::new(config.seed).str("mask").u64(step as u64);
            let loss = net.mim_forward(&tape, &images, &spec.id, config.mask_ratio, mask_key)?;
            let loss_value = loss.value().item()?;
            let grads = tape.backward(loss)?;
            drop(tape);
            opt.step(&mut net, &grads, lr, config.weight_decay)?;
            log.push(LossRecord { step, epoch, modality: spec.id.clone(), loss: loss_value, lr });
            step += 1;
        }
        on_epoch(epoch, &net, &log)?;
    }
    Ok(TrainOutcome { net, log, optimizer: opt })
}

fn load_batch(
    source: &DataSource,
    generator: &SynthGenerator,
    spec: &ModalitySpec,
    seed: u64,
    indices: &[u64],
    size: usize,
    threads: usize,
) -> Result<Vec<Tensor<f32>>, TrainError> {
    match source {
        DataSource::Synthetic => Ok(par_map(indices.len(), threads, |i| generator.pretrain_sample(spec, seed, indices[i]).image)),
        DataSource::Files(sets) => {
            let ds = sets.get(&spec.id).ok_or_else(|| TrainError::MissingData(spec.id.clone()))?;
            indices
                .iter()
                .map(|&i| {
                    let img = &ds.samples[i as usize].image;
                    if img.shape()[0] == size && img.shape()[1] == size {
                        Ok(img.clone())
                    } else {
                        Ok(resize_nearest(img, size, size)?)
                    }
                })
                .collect()
        }
    }
}

/// Mean loss per modality over the first and last `window` steps that
/// modality received.
pub fn loss_trend(log: &[LossRecord], window: usize) -> BTreeMap<String, (f64, f64)> {
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in log {
        per.entry(r.modality.clone()).or_default().push(r.loss as f64);
    }
    per.into_iter()
        .map(|(m, v)| {
            let w = window.min(v.len()).max(1);
            let first = v[..w].iter().sum::<f64>() / w as f64;
            let last = v[v.len() - w..].iter().sum::<f64>() / w as f64;
            (m, (first, last))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { samples_per_modality: 64, batch_size: 8, epochs: 10, ..TrainConfig::default() }
    }

    #[test]
    fn plan_is_round_robin() {
        let c = cfg();
        let plan = epoch_plan(&c, 0);
        assert_eq!(plan.len(), 40);
        let order: Vec<&str> = plan.iter().take(10).map(|b| b.modality.as_str()).collect();
        assert_eq!(order, ["sentinel1", "sentinel2", "gaofen", "naip", "enmap"].repeat(2));
        for m in &c.modalities {
            let mut seen: Vec<u64> = plan.iter().filter(|b| &b.modality == m).flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..64).collect::<Vec<_>>());
        }
        assert_ne!(epoch_plan(&c, 1), plan);
    }

    #[test]
    fn partial_batches_are_dropped() {
        let c = TrainConfig { samples_per_modality: 70, ..cfg() };
        let plan = epoch_plan(&c, 0);
        assert_eq!(plan.len(), 40);
        assert!(plan.iter().all(|b| b.indices.len() == 8));
    }

    #[test]
    fn schedule_boundaries() {
        let c = cfg();
        let total = 1000;
        assert_eq!(lr_at(0, total, &c), 0.0);
        assert!((lr_at(50, total, &c) - c.base_lr).abs() < 1e-18);
        assert!(lr_at(total - 1, total, &c) < 0.01 * c.base_lr);
        let mid = 50 + (total - 50) / 2;
        assert!((lr_at(mid, total, &c) / c.base_lr - 0.5).abs() < 0.05);
        for s in 1..total {
            if s > 50 {
                assert!(lr_at(s, total, &c) <= lr_at(s - 1, total, &c));
            }
        }
    }

    #[test]
    fn adamw_zero_grad_is_fixed_point() {
        let mut p = vec![0.3f32, -1.0];
        let mut st = Moments::zeros(2);
        adamw_update(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.0, AdamWParams::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
    }

    #[test]
    fn adamw_first_step() {
        let mut p = vec![1.0f32];
        let mut st = Moments::zeros(1);
        adamw_update(&mut p, &[1.0], &mut st, 0.1, 0.0, AdamWParams::default()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_only() {
        let mut p = vec![2.0f32];
        let mut st = Moments::zeros(1);
        adamw_update(&mut p, &[0.0], &mut st, 0.1, 0.5, AdamWParams::default()).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn adamw_rejects_length_mismatch() {
        let mut st = Moments::zeros(2);
        assert!(adamw_update(&mut [0.0, 0.0], &[1.0], &mut st, 0.1, 0.0, AdamWParams::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { mask_ratio: 1.5, ..cfg() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { modalities: vec![], ..cfg() }.validate().is_err());
        assert!(TrainConfig { modalities: vec!["naip".into(), "naip".into()], ..cfg() }.validate().is_err());
    }

    #[test]
    fn log_line_format() {
        let r = LossRecord { step: 3, epoch: 0, modality: "naip".into(), loss: 1.25, lr: 1.5e-4 };
        assert_eq!(r.to_string(), "3\t0\tnaip\t1.25000000e0\t1.50000000e-4");
    }
}
