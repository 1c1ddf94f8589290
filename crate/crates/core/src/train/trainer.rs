//! Epoch loop, evaluation and best-model selection.

use serde::{Deserialize, Serialize};

use crate::data::augment::random_zoom;
use crate::data::dataset::SampleRecord;
use crate::data::PromptStages;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::combined_loss;
use crate::metrics::{metrics, Metrics};
use crate::model::{ModelConfig, PromptMode, SegModel};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;
use crate::train::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub prompt_mode: PromptMode,
    pub guide_decoder_count: usize,
    pub data_fraction: f64,
    pub zoom_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            lr_max: 3e-4,
            lr_min: 1e-6,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            prompt_mode: PromptMode::S123,
            guide_decoder_count: 3,
            data_fraction: 1.0,
            zoom_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("at least one epoch is required".into());
        }
        if !(0.0 < self.lr_min && self.lr_min < self.lr_max) {
            return bad(format!("learning rates must satisfy 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data fraction {} outside (0, 1]", self.data_fraction));
        }
        if !(0.0..=1.0).contains(&self.zoom_prob) {
            return bad(format!("zoom probability {} outside [0, 1]", self.zoom_prob));
        }
        if self.guide_decoder_count > 3 {
            return bad(format!("decoder count {} outside 0..=3", self.guide_decoder_count));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight decay must be non-negative and adam eps positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.betas.0, beta2: self.betas.1, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    /// `base` with this run's decoder count and prompt mode.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig { guide_stages: self.guide_decoder_count, prompt_mode: self.prompt_mode, ..base.clone() }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Stream driving shuffling and augmentation of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::stream(mix64(seed ^ 0x7472_6169_6e69_6e67), epoch as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batch_losses: Vec<f32>,
}

/// Anything that maps an image and prompt to a binary mask.
pub trait Segmenter {
    fn segment(&self, image: &Tensor, prompt: &PromptStages) -> Result<Tensor>;
}

impl Segmenter for SegModel {
    fn segment(&self, image: &Tensor, prompt: &PromptStages) -> Result<Tensor> {
        Ok(self.predict(image, prompt)?.mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub per_sample: Vec<(String, Metrics)>,
}

/// Uniform average of per-sample metrics, without augmentation.
pub fn evaluate(model: &impl Segmenter, samples: &[SampleRecord]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let per_sample = samples
        .iter()
        .map(|s| Ok((s.id.clone(), metrics(&model.segment(&s.image, &s.prompt)?, &s.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<Metrics> = per_sample.iter().map(|(_, m)| *m).collect();
    Ok(EvalReport { metrics: Metrics::mean(&all).expect("non-empty"), per_sample })
}

/// Model, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SegModel,
    pub config: TrainConfig,
    pub opt: AdamWState,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub total_steps: u64,
    pub best_val_dice: Option<f64>,
}

impl Trainer {
    /// Fresh model for a train split of `n_train` samples; the schedule spans
    /// every step of every epoch.
    pub fn new(config: TrainConfig, base: &ModelConfig, n_train: usize) -> Result<Self> {
        config.validate()?;
        if n_train == 0 {
            return Err(Error::Input("training split is empty".into()));
        }
        let model = SegModel::new(config.model_config(base), config.seed)?;
        let opt = AdamWState::new(model.store.tensors());
        let total_steps = (config.epochs * config.steps_per_epoch(n_train)) as u64;
        Ok(Trainer { model, config, opt, epoch: 0, step: 0, total_steps, best_val_dice: None })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Loss and gradients of one sample, gradients scaled by `scale` and
    /// added into `acc`.
    pub fn accumulate(&self, image: &Tensor, mask: &Tensor, prompt: &PromptStages, acc: &mut [Vec<f32>], scale: f32) -> Result<f32> {
        let mut g = Graph::new();
        let b = self.model.store.bind(&mut g);
        let x = g.constant(image.clone());
        let logits = self.model.forward(&mut g, &b, x, prompt)?;
        let probs = g.sigmoid(logits);
        let loss = combined_loss(&mut g, probs, mask)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        g.backward(loss)?;
        b.accumulate_grads(&g, acc, scale);
        Ok(value)
    }

    /// One optimizer step on `batch` using the scheduled learning rate.
    pub fn train_batch(&mut self, batch: &[(Tensor, Tensor, &PromptStages)]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut acc: Vec<Vec<f32>> = self.model.store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0f64;
        for (image, mask, prompt) in batch {
            total += self.accumulate(image, mask, prompt, &mut acc, scale)? as f64;
        }
        let grads = acc
            .into_iter()
            .zip(self.model.store.tensors())
            .map(|(a, p)| Tensor::new(p.shape().to_vec(), a))
            .collect::<Result<Vec<_>>>()?;
        let lr = cosine_lr(self.step.min(self.total_steps), self.total_steps.max(1), self.config.lr_max, self.config.lr_min)?;
        adamw_step(self.model.store.tensors_mut(), &grads, &mut self.opt, lr, &self.config.adamw())?;
        self.step += 1;
        Ok((total / batch.len() as f64) as f32)
    }

    /// Shuffles `train` with the epoch's stream, augments, and steps once per
    /// batch; the last partial batch is kept.
    pub fn train_epoch(&mut self, train: &[SampleRecord]) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut batch_losses = Vec::with_capacity(self.config.steps_per_epoch(train.len()));
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(Tensor, Tensor, &PromptStages)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let (image, mask) = random_zoom(&s.image, &s.mask, &mut rng, self.config.zoom_prob);
                    (image, mask, &s.prompt)
                })
                .collect();
            batch_losses.push(self.train_batch(&batch)?);
        }
        let mean_loss = batch_losses.iter().map(|&l| l as f64).sum::<f64>() / batch_losses.len() as f64;
        let stats = EpochStats { epoch: self.epoch, mean_loss, batch_losses };
        self.epoch += 1;
        Ok(stats)
    }
}
