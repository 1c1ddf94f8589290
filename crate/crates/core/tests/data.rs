use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use langseg::data::augment::random_zoom;
use langseg::data::dataset::{read_manifest, subset};
use langseg::data::prompt::{describe, gen_prompt, GRAMMAR};
use langseg::data::render::render_sample;
use langseg::data::scene::{gen_scene, Anchor, SceneConfig};
use langseg::data::{generate, load_dataset, write_dataset, GenConfig};
use langseg::encoders::{build_vocab, tokenize, UNK};
use langseg::{Error, Rng};
use proptest::prelude::*;

fn anchors_named_in(stage3: &str) -> BTreeSet<Anchor> {
    let body = stage3.strip_prefix("located at ").expect("stage3 prefix");
    body.split(", ")
        .map(|name| *Anchor::ALL.iter().find(|a| a.name() == name).unwrap_or_else(|| panic!("unknown region {name}")))
        .collect()
}

#[test]
fn all_fifteen_anchor_subsets_are_faithful_and_in_vocabulary() {
    let vocab = build_vocab(GRAMMAR).unwrap();
    for bits in 1u8..16 {
        let set: Vec<Anchor> = Anchor::ALL.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, a)| *a).collect();
        let p = describe(&set);
        assert_eq!(anchors_named_in(&p.stage3), set.iter().copied().collect());
        let both = set.iter().any(|a| a.is_left()) && set.iter().any(|a| !a.is_left());
        assert_eq!(p.stage1.starts_with("bilateral"), both);
        for s in [&p.stage1, &p.stage2, &p.stage3] {
            assert!(!tokenize(s, &vocab, 24).unwrap().ids.contains(&UNK), "{s}");
        }
    }
}

#[test]
fn generated_prompts_name_exactly_the_infected_anchors() {
    let cfg = SceneConfig::default();
    for seed in 0..500 {
        let scene = gen_scene(&mut Rng::new(seed), &cfg).unwrap();
        let p = gen_prompt(&scene).unwrap();
        assert_eq!(anchors_named_in(&p.stage3), scene.infected_anchors().into_iter().collect());
        let n = scene.infected.len();
        assert_eq!(p.stage2, format!("{} infected areas", ["one", "two", "three"][n - 1]));
    }
}

#[test]
fn empty_infected_set_is_contract_error() {
    let mut scene = gen_scene(&mut Rng::new(1), &SceneConfig::default()).unwrap();
    scene.infected.clear();
    assert!(matches!(gen_prompt(&scene), Err(Error::Contract(_))));
}

#[test]
fn ambiguity_guarantee() {
    let cfg = SceneConfig::default();
    let mut with_distractor = 0;
    for seed in 0..100 {
        let scene = gen_scene(&mut Rng::new(seed), &cfg).unwrap();
        let (_, mask) = render_sample(&scene);
        if scene.distractors().next().is_some() {
            with_distractor += 1;
        }
        for blob in scene.distractors() {
            for r in 0..64 {
                for c in 0..64 {
                    if blob.rho2(r, c) <= 1.0 {
                        assert_eq!(mask.data()[r * 64 + c], 0.0);
                    }
                }
            }
        }
    }
    assert!(with_distractor >= 30, "{with_distractor} of 100 scenes have a distractor");
}

#[test]
fn infected_and_distractor_intensities_match() {
    let cfg = SceneConfig::default();
    let (mut inf, mut dis) = (Vec::new(), Vec::new());
    for seed in 0..100 {
        let scene = gen_scene(&mut Rng::new(seed), &cfg).unwrap();
        let (image, _) = render_sample(&scene);
        for (i, blob) in scene.blobs.iter().enumerate() {
            let bucket = if scene.infected.contains(&i) { &mut inf } else { &mut dis };
            for r in 0..64 {
                for c in 0..64 {
                    if blob.rho2(r, c) <= 1.0 {
                        bucket.push(image.data()[r * 64 + c] as f64);
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!inf.is_empty() && !dis.is_empty());
    assert!((mean(&inf) - mean(&dis)).abs() < 0.02, "{} vs {}", mean(&inf), mean(&dis));
}

fn gen_cfg(n_train: usize, n_test: usize, seed: u64) -> GenConfig {
    GenConfig { n_train, n_test, seed, scene: SceneConfig::default() }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let mut entries: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        out.extend(entries.into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap())));
    }
    out
}

#[test]
fn disk_round_trip_and_byte_identical_regeneration() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let data = generate(&gen_cfg(20, 5, 7)).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (16, 4, 5));
    write_dataset(a.path(), &data).unwrap();
    write_dataset(b.path(), &generate(&gen_cfg(20, 5, 7)).unwrap()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    let loaded = load_dataset(a.path()).unwrap();
    for (x, y) in data.train.iter().chain(&data.val).chain(&data.test).zip(loaded.train.iter().chain(&loaded.val).chain(&loaded.test)) {
        assert_eq!(x.id, y.id);
        assert!(x.image.bitwise_eq(&y.image), "images are quantized at render time");
        assert!(x.mask.bitwise_eq(&y.mask));
        assert_eq!(x.prompt, y.prompt);
    }
}

#[test]
fn manifest_schema() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate(&gen_cfg(10, 2, 1)).unwrap()).unwrap();
    let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["id", "image", "mask", "stage1", "stage2", "stage3", "split"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let entries = read_manifest(dir.path()).unwrap();
    assert_eq!(entries.len(), 12);
    assert!(entries.iter().all(|e| e.image == format!("images/{}.pgm", e.id)));
}

#[test]
fn missing_files_and_bad_manifests_fail() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate(&gen_cfg(4, 0, 1)).unwrap()).unwrap();
    let first = read_manifest(dir.path()).unwrap().remove(0);
    fs::remove_file(dir.path().join(&first.mask)).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io(_))));

    fs::write(dir.path().join("manifest.jsonl"), "{\"id\": 1}\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Input(_))));
}

#[test]
fn test_pool_is_disjoint_from_train_pool() {
    let data = generate(&gen_cfg(30, 10, 3)).unwrap();
    let ids: BTreeSet<&str> = data.train.iter().chain(&data.val).chain(&data.test).map(|s| s.id.as_str()).collect();
    assert_eq!(ids.len(), 40);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zoom_keeps_shape_and_binary_mask(seed in 0u64..1000, p in 0.0f64..=1.0) {
        let data = langseg::data::dataset::generate_sample(seed, 0, &SceneConfig::default()).unwrap();
        let (image, mask) = random_zoom(&data.image, &data.mask, &mut Rng::new(seed), p);
        prop_assert_eq!(image.shape(), &[1, 64, 64]);
        prop_assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn subsets_are_deterministic_and_sized(n in 1usize..200, frac in 0.01f64..=1.0, seed in 0u64..50) {
        let items: Vec<usize> = (0..n).collect();
        let a = subset(&items, frac, seed).unwrap();
        prop_assert_eq!(&a, &subset(&items, frac, seed).unwrap());
        prop_assert_eq!(a.len(), ((n as f64 * frac).round() as usize).max(1));
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
