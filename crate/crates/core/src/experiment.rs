//! Training runs with best-validation selection, and the ablation studies
//! built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{subset, SampleRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{ModelConfig, PromptMode, SegModel};
use crate::train::{evaluate, TrainConfig, Trainer};

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_dice: f64,
    pub val_acc: f64,
    pub val_jaccard: f64,
}

/// Outcome of [`fit`]: the best-validation model seen during this call.
#[derive(Clone, Debug)]
pub struct Fit {
    pub best: Option<SegModel>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

/// Trains until the schedule ends, validating after every epoch.
///
/// `on_epoch` sees the trainer after each epoch and whether validation Dice
/// improved on `trainer.best_val_dice`.
pub fn fit<F>(trainer: &mut Trainer, train: &[SampleRecord], val: &[SampleRecord], mut on_epoch: F) -> Result<Fit>
where
    F: FnMut(&Trainer, &EpochLog, bool) -> Result<()>,
{
    let mut out = Fit { best: None, best_epoch: None, log: Vec::new() };
    while !trainer.finished() {
        let stats = trainer.train_epoch(train)?;
        let v = evaluate(&trainer.model, val)?.metrics;
        let entry = EpochLog {
            epoch: stats.epoch,
            step: trainer.step,
            loss: stats.mean_loss,
            val_dice: v.dice,
            val_acc: v.acc,
            val_jaccard: v.jaccard,
        };
        let improved = trainer.best_val_dice.is_none_or(|b| v.dice > b);
        if improved {
            trainer.best_val_dice = Some(v.dice);
            out.best = Some(trainer.model.clone());
            out.best_epoch = Some(stats.epoch);
        }
        on_epoch(trainer, &entry, improved)?;
        out.log.push(entry);
    }
    Ok(out)
}

/// Test metrics of one configuration, with its config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub acc: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub prompt_mode: PromptMode,
    pub decoders: usize,
    pub data_fraction: f64,
    pub seed: u64,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, metrics: Metrics, config: &TrainConfig) -> Self {
        ReportRow {
            label: label.into(),
            acc: metrics.acc,
            dice: metrics.dice,
            jaccard: metrics.jaccard,
            prompt_mode: config.prompt_mode,
            decoders: config.guide_decoder_count,
            data_fraction: config.data_fraction,
            seed: config.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Decoders,
    Granularity,
    Fraction,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Decoders, Ablation::Granularity, Ablation::Fraction];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Decoders => "decoders",
            Ablation::Granularity => "granularity",
            Ablation::Fraction => "fraction",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected decoders, granularity or fraction)")))
    }
}

pub const FRACTIONS: [f64; 5] = [0.10, 0.15, 0.25, 0.50, 1.00];

/// `base` restricted to a fraction of the training split, with epochs scaled
/// so the run takes about as many optimizer steps as a full-data run.
pub fn with_fraction(base: &TrainConfig, fraction: f64) -> TrainConfig {
    TrainConfig { data_fraction: fraction, epochs: ((base.epochs as f64 / fraction).round() as usize).max(1), ..base.clone() }
}

pub fn text_free(base: &TrainConfig) -> TrainConfig {
    TrainConfig { prompt_mode: PromptMode::None, guide_decoder_count: 0, ..base.clone() }
}

/// Labelled configurations of one ablation study, all derived from `base`
/// with the same seed and step budget.
pub fn ablation_rows(kind: Ablation, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match kind {
        Ablation::Decoders => (0..=3)
            .map(|k| {
                let cfg = if k == 0 { text_free(base) } else { TrainConfig { guide_decoder_count: k, ..base.clone() } };
                (format!("k{k}"), cfg)
            })
            .collect(),
        Ablation::Granularity => PromptMode::ALL
            .into_iter()
            .map(|mode| (mode.to_string(), TrainConfig { prompt_mode: mode, ..base.clone() }))
            .collect(),
        Ablation::Fraction => FRACTIONS
            .iter()
            .map(|&f| (format!("fraction{:.2}", f), with_fraction(base, f)))
            .chain(std::iter::once(("text-free1.00".to_string(), text_free(&with_fraction(base, 1.0)))))
            .collect(),
    }
}

/// Trains `config` on its share of `data.train`, selects the epoch with the
/// best validation Dice, and reports that model's test metrics.
pub fn run_row<F>(label: &str, config: &TrainConfig, base: &ModelConfig, data: &Dataset, on_epoch: F) -> Result<ReportRow>
where
    F: FnMut(&Trainer, &EpochLog, bool) -> Result<()>,
{
    let train = subset(&data.train, config.data_fraction, config.seed)?;
    let mut trainer = Trainer::new(config.clone(), base, train.len())?;
    let fit = fit(&mut trainer, &train, &data.val, on_epoch)?;
    let best = fit.best.expect("at least one epoch ran");
    Ok(ReportRow::new(label, evaluate(&best, &data.test)?.metrics, config))
}
