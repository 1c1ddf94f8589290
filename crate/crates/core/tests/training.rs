mod common;

use langseg::data::scene::SceneConfig;
use langseg::data::{generate, Dataset, GenConfig, PromptStages};
use langseg::encoders::{ImageConfig, TextConfig};
use langseg::metrics::{metrics, Metrics};
use langseg::train::{evaluate, load_checkpoint, save_checkpoint, Segmenter, TrainConfig, Trainer};
use langseg::{Error, ModelConfig, PromptMode, Result, Tensor};

fn small_model() -> ModelConfig {
    ModelConfig {
        image: ImageConfig { widths: vec![4, 8, 16, 32] },
        text: TextConfig { dim: 8, blocks: 1, heads: 2, ffn_dim: 16, max_len: 24 },
        text_tokens: 2,
        decoder_heads: 2,
        ..ModelConfig::default()
    }
}

fn data(n_train: usize, seed: u64) -> Dataset {
    generate(&GenConfig { n_train, n_test: 4, seed, scene: SceneConfig::default() }).unwrap()
}

fn config(batch_size: usize, epochs: usize) -> TrainConfig {
    TrainConfig { batch_size, epochs, seed: 5, zoom_prob: 0.5, ..TrainConfig::default() }
}

fn run(trainer: &mut Trainer, train: &[langseg::data::SampleRecord]) -> Vec<u32> {
    let mut bits = Vec::new();
    while !trainer.finished() {
        bits.extend(trainer.train_epoch(train).unwrap().batch_losses.iter().map(|l| l.to_bits()));
    }
    bits
}

#[test]
fn identical_runs_log_identical_losses() {
    let ds = data(20, 3);
    let mut a = Trainer::new(config(4, 3), &small_model(), ds.train.len()).unwrap();
    let mut b = Trainer::new(config(4, 3), &small_model(), ds.train.len()).unwrap();
    let (la, lb) = (run(&mut a, &ds.train), run(&mut b, &ds.train));
    assert!(la.len() >= 10);
    assert_eq!(la, lb);
    for (x, y) in a.model.store.tensors().iter().zip(b.model.store.tensors()) {
        assert!(x.bitwise_eq(y));
    }
}

#[test]
fn different_seeds_diverge() {
    let ds = data(20, 3);
    let mut a = Trainer::new(config(4, 1), &small_model(), ds.train.len()).unwrap();
    let mut b = Trainer::new(TrainConfig { seed: 6, ..config(4, 1) }, &small_model(), ds.train.len()).unwrap();
    assert_ne!(run(&mut a, &ds.train), run(&mut b, &ds.train));
}

#[test]
fn last_partial_batch_is_kept() {
    let ds = data(13, 1);
    assert_eq!(ds.train.len(), 10);
    let mut t = Trainer::new(config(4, 2), &small_model(), ds.train.len()).unwrap();
    assert_eq!(t.total_steps, 6);
    let stats = t.train_epoch(&ds.train).unwrap();
    assert_eq!(stats.batch_losses.len(), 3);
    assert_eq!(t.step, 3);
    t.train_epoch(&ds.train).unwrap();
    assert_eq!(t.step, t.total_steps);
    assert!(t.finished());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let ds = data(15, 9);
    let cfg = config(5, 3);
    let mut whole = Trainer::new(cfg.clone(), &small_model(), ds.train.len()).unwrap();
    let expected = run(&mut whole, &ds.train);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let mut first = Trainer::new(cfg, &small_model(), ds.train.len()).unwrap();
    let mut got: Vec<u32> = first.train_epoch(&ds.train).unwrap().batch_losses.iter().map(|l| l.to_bits()).collect();
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed.epoch, 1);
    got.extend(run(&mut resumed, &ds.train));
    assert_eq!(got, expected);
    for (x, y) in whole.model.store.tensors().iter().zip(resumed.model.store.tensors()) {
        assert!(x.bitwise_eq(y));
    }
}

#[test]
fn training_reduces_loss() {
    let ds = data(40, 2);
    let mut t = Trainer::new(TrainConfig { lr_max: 2e-3, ..config(8, 12) }, &small_model(), ds.train.len()).unwrap();
    let first = t.train_epoch(&ds.train).unwrap().mean_loss;
    let mut last = first;
    while !t.finished() {
        last = t.train_epoch(&ds.train).unwrap().mean_loss;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn overfits_a_single_batch() {
    let ds = data(10, 4);
    let batch: Vec<_> = ds.train.iter().take(8).map(|s| (s.image.clone(), s.mask.clone(), &s.prompt)).collect();
    // The head predicts one value per 4×4 block, so pixel-exact masks have a
    // nonzero loss floor; training should reach it.
    let floor = ds.train.iter().take(8).map(|s| common::block_loss_floor(&s.mask)).sum::<f32>() / 8.0;
    let cfg = TrainConfig { batch_size: 8, epochs: 500, lr_max: 2e-3, seed: 1, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg, &ModelConfig::default(), 8).unwrap();
    let mut loss = f32::INFINITY;
    for _ in 0..500 {
        loss = t.train_batch(&batch).unwrap();
        if loss < floor + 0.01 {
            break;
        }
    }
    assert!(loss < floor + 0.01, "final loss {loss} after {} steps, floor {floor}", t.step);
}

struct Fixed(Vec<Tensor>);

impl Segmenter for Fixed {
    fn segment(&self, image: &Tensor, _: &PromptStages) -> Result<Tensor> {
        let i = image.data()[0] as usize;
        Ok(self.0[i].clone())
    }
}

fn record(index: usize, mask: &[f32]) -> langseg::data::SampleRecord {
    let image = Tensor::full([1, 2, 2], index as f32);
    let prompt = PromptStages { stage1: "a".into(), stage2: "b".into(), stage3: "c".into() };
    langseg::data::SampleRecord { id: format!("r{index}"), image, mask: Tensor::new([1, 2, 2], mask.to_vec()).unwrap(), prompt }
}

#[test]
fn evaluation_averages_per_sample_metrics() {
    let preds = vec![
        Tensor::new([1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
        Tensor::new([1, 2, 2], vec![0.0; 4]).unwrap(),
        Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
    ];
    let samples = vec![record(0, &[1.0, 0.0, 0.0, 0.0]), record(1, &[0.0; 4]), record(2, &[0.0, 1.0, 0.0, 0.0])];
    let report = evaluate(&Fixed(preds.clone()), &samples).unwrap();
    // dice: 2/3, 1 (empty/empty), 0
    assert!((report.metrics.dice - (2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
    assert!((report.metrics.jaccard - (0.5 + 1.0) / 3.0).abs() < 1e-12);
    assert!((report.metrics.acc - (0.75 + 1.0 + 0.5) / 3.0).abs() < 1e-12);
    let recomputed: Vec<Metrics> = preds.iter().zip(&samples).map(|(p, s)| metrics(p, &s.mask).unwrap()).collect();
    assert_eq!(report.per_sample.iter().map(|(_, m)| *m).collect::<Vec<_>>(), recomputed);
    assert!(matches!(evaluate(&Fixed(preds), &[]), Err(Error::Input(_))));
}

#[test]
fn evaluation_of_a_trained_model_is_repeatable() {
    let ds = data(10, 8);
    let mut t = Trainer::new(TrainConfig { prompt_mode: PromptMode::S3, ..config(4, 1) }, &small_model(), ds.train.len()).unwrap();
    t.train_epoch(&ds.train).unwrap();
    assert_eq!(evaluate(&t.model, &ds.test).unwrap(), evaluate(&t.model, &ds.test).unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr_min: 1e-3, lr_max: 1e-4, ..TrainConfig::default() },
        TrainConfig { data_fraction: 0.0, ..TrainConfig::default() },
        TrainConfig { guide_decoder_count: 4, ..TrainConfig::default() },
    ] {
        assert!(matches!(Trainer::new(cfg, &ModelConfig::default(), 8), Err(Error::Config(_))));
    }
}
