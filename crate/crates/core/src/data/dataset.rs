//! In-memory samples, the train/val/test split and the on-disk layout.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::pgm::{read_pgm, write_pgm};
use crate::data::prompt::{gen_prompt, PromptStages};
use crate::data::render::render_sample;
use crate::data::scene::{gen_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
/// Share of the train pool kept for training; the rest is validation.
pub const TRAIN_SHARE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `1×S×S` in `[0,1]`.
    pub image: Tensor,
    /// `1×S×S` in `{0,1}`.
    pub mask: Tensor,
    pub prompt: PromptStages,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Size of the train pool before the train/val split.
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

/// Sample `index` of the stream for `seed`; independent of every other index.
pub fn generate_sample(seed: u64, index: usize, scene: &SceneConfig) -> Result<SampleRecord> {
    let mut rng = Rng::stream(seed, index as u64);
    let spec = gen_scene(&mut rng, scene)?;
    let (image, mask) = render_sample(&spec);
    Ok(SampleRecord { id: format!("s{index:05}"), image, mask, prompt: gen_prompt(&spec)? })
}

/// Generates the train pool (indices `0..n_train`), splits it, then
/// generates the test pool from the following indices.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.n_train == 0 {
        return Err(Error::Config("the train pool must hold at least one sample".into()));
    }
    let pool = (0..cfg.n_train).map(|i| generate_sample(cfg.seed, i, &cfg.scene)).collect::<Result<Vec<_>>>()?;
    let (train, val) = split_dataset(pool, cfg.seed);
    let test = (cfg.n_train..cfg.n_train + cfg.n_test)
        .map(|i| generate_sample(cfg.seed, i, &cfg.scene))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, val, test })
}

/// Seeded 80/20 partition; both parts keep the pool's relative order.
pub fn split_dataset<T>(pool: Vec<T>, seed: u64) -> (Vec<T>, Vec<T>) {
    let n = pool.len();
    let n_train = (n as f64 * TRAIN_SHARE).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::named(seed, "split").shuffle(&mut order);
    let mut is_train = vec![false; n];
    order[..n_train].iter().for_each(|&i| is_train[i] = true);
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (item, t) in pool.into_iter().zip(is_train) {
        if t {
            train.push(item)
        } else {
            val.push(item)
        }
    }
    (train, val)
}

/// Deterministic subset holding `fraction` of `items` (at least one).
pub fn subset<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data fraction {fraction} outside (0, 1]")));
    }
    let keep = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len().max(1));
    let mut order: Vec<usize> = (0..items.len()).collect();
    Rng::named(seed, "subset").shuffle(&mut order);
    let mut chosen = order[..keep.min(items.len())].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| items[i].clone()).collect())
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub stage1: String,
    pub stage2: String,
    pub stage3: String,
    pub split: Split,
}

/// Writes `images/`, `masks/` and the manifest (train, then val, then test).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = Vec::new();
    for (split, items) in [(Split::Train, &data.train), (Split::Val, &data.val), (Split::Test, &data.test)] {
        for s in items {
            let entry = ManifestEntry {
                id: s.id.clone(),
                image: format!("images/{}.pgm", s.id),
                mask: format!("masks/{}.pgm", s.id),
                stage1: s.prompt.stage1.clone(),
                stage2: s.prompt.stage2.clone(),
                stage3: s.prompt.stage3.clone(),
                split,
            };
            fs::write(dir.join(&entry.image), write_pgm(&s.image)?)?;
            fs::write(dir.join(&entry.mask), write_pgm(&s.mask)?)?;
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.write_all(b"\n")?;
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut ids = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("{MANIFEST} line {}: {e}", n + 1)))?;
        if !ids.insert(entry.id.clone()) {
            return Err(Error::Input(format!("{MANIFEST} line {}: duplicate id {:?}", n + 1, entry.id)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut data = Dataset::default();
    for e in read_manifest(dir)? {
        let image = read_pgm(&fs::read(dir.join(&e.image))?)?;
        let mask = read_pgm(&fs::read(dir.join(&e.mask))?)?;
        if image.shape() != mask.shape() {
            return Err(Error::Input(format!("sample {}: image {:?} and mask {:?} differ", e.id, image.shape(), mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("sample {}: mask is not binary", e.id)));
        }
        let record = SampleRecord {
            id: e.id,
            image,
            mask,
            prompt: PromptStages { stage1: e.stage1, stage2: e.stage2, stage3: e.stage3 },
        };
        match e.split {
            Split::Train => data.train.push(record),
            Split::Val => data.val.push(record),
            Split::Test => data.test.push(record),
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_item_pool_splits_eighty_twenty() {
        let (train, val) = split_dataset((0..100).collect::<Vec<_>>(), 3);
        assert_eq!((train.len(), val.len()), (80, 20));
        let mut all: Vec<_> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_dataset((0..100).collect::<Vec<_>>(), 3), (train, val));
    }

    #[test]
    fn subset_sizes() {
        let items: Vec<usize> = (0..512).collect();
        assert_eq!(subset(&items, 0.25, 1).unwrap().len(), 128);
        assert_eq!(subset(&items, 1.0, 1).unwrap(), items);
        assert_eq!(subset(&items[..3], 0.1, 1).unwrap().len(), 1);
        assert!(subset(&items, 0.0, 1).is_err());
        assert!(subset(&items, 1.5, 1).is_err());
    }

    #[test]
    fn samples_are_independent_of_pool_size() {
        let cfg = SceneConfig::default();
        let a = generate(&GenConfig { n_train: 5, n_test: 0, seed: 2, scene: cfg.clone() }).unwrap();
        let b = generate_sample(2, 3, &cfg).unwrap();
        assert!(a.train.iter().chain(&a.val).any(|s| *s == b));
    }

    #[test]
    fn empty_pool_rejected() {
        let cfg = GenConfig { n_train: 0, n_test: 4, seed: 0, scene: SceneConfig::default() };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
