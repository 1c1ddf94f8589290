use langseg::data::prompt::{describe, GRAMMAR};
use langseg::data::scene::Anchor;
use langseg::encoders::{build_vocab, tokenize, ImageConfig, ImageEncoder, TextConfig, TextEncoder, PAD, UNK};
use langseg::gradcheck::grad_check;
use langseg::{Error, Graph, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn all_prompts() -> Vec<String> {
    let mut out = Vec::new();
    for bits in 1u8..16 {
        let anchors: Vec<Anchor> = Anchor::ALL.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, a)| *a).collect();
        let p = describe(&anchors);
        out.extend([p.stage1, p.stage2, p.stage3]);
    }
    out
}

fn encode_image(enc: &ImageEncoder, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>, Error> {
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let feats = enc.encode(&mut g, &b, x)?;
    Ok(feats.iter().map(|&f| g.value(f).clone()).collect())
}

#[test]
fn every_generated_sentence_tokenizes_without_unk() {
    let v = build_vocab(GRAMMAR).unwrap();
    for s in all_prompts() {
        let t = tokenize(&s, &v, 24).unwrap();
        assert!(!t.ids.contains(&UNK), "{s}");
        assert!(t.real_len() < 24, "{s} does not fit");
    }
}

#[test]
fn stage_three_round_trips_through_vocab() {
    let v = build_vocab(GRAMMAR).unwrap();
    let s = describe(&[Anchor::LeftLower, Anchor::RightUpper, Anchor::RightLower]).stage3;
    let t = tokenize(&s, &v, 24).unwrap();
    let words: Vec<&str> = t.ids[1..t.real_len()].iter().map(|&i| v.word(i).unwrap()).collect();
    let expected: Vec<&str> = s.split([' ', ',']).filter(|w| !w.is_empty()).collect();
    assert_eq!(words, expected);
    assert!(t.ids[t.real_len()..].iter().all(|&i| i == PAD));
}

#[test]
fn pyramid_shapes_at_desk_scale() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, 1, "image", ImageConfig::default()).unwrap();
    let image = Tensor::uniform([1, 64, 64], 1.0, &mut Rng::new(0));
    let shapes: Vec<Vec<usize>> = encode_image(&enc, &store, &image).unwrap().iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4], vec![128, 2, 2]]);
}

#[test]
fn pyramid_is_deterministic() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, 1, "image", ImageConfig::default()).unwrap();
    let image = Tensor::uniform([1, 64, 64], 1.0, &mut Rng::new(3));
    let a = encode_image(&enc, &store, &image).unwrap();
    let b = encode_image(&enc, &store, &image).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
}

#[test]
fn pyramid_rejects_bad_sides() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, 1, "image", ImageConfig::default()).unwrap();
    for shape in [[1, 48, 48], [1, 64, 32], [2, 64, 64]] {
        let err = encode_image(&enc, &store, &Tensor::zeros(shape)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{shape:?}");
    }
}

#[test]
fn widths_must_increase() {
    let mut store = ParamStore::new();
    let err = ImageEncoder::new(&mut store, 1, "image", ImageConfig { widths: vec![16, 16] }).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn stem_weight_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, 5, "image", ImageConfig::default()).unwrap();
    let stem = store.id("image.stage0.down.weight").unwrap();
    let mut rng = Rng::new(8);
    let image = Tensor::from_fn([1, 64, 64], |_| rng.uniform_f32(0.0, 1.0));
    let f = |g: &mut Graph, v: &[langseg::Var]| {
        let b = store.bind_overriding(g, &[(stem, v[0])]);
        let x = g.constant(image.clone());
        let feats = enc.encode(g, &b, x)?;
        Ok(g.sum(feats[3]))
    };
    let report = grad_check(f, &[("stem".into(), store.get(stem).clone())], 1e-3, 1e-3).unwrap();
    assert!(report.passed(), "{report:?}");
}

fn text_encoder(max_len: usize) -> (ParamStore, TextEncoder) {
    let v = build_vocab(GRAMMAR).unwrap();
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(&mut store, 2, "text", v.len(), TextConfig { max_len, ..TextConfig::default() }).unwrap();
    (store, enc)
}

#[test]
fn text_features_have_one_row_per_token() {
    let (store, enc) = text_encoder(24);
    let v = build_vocab(GRAMMAR).unwrap();
    let t = tokenize("bilateral pulmonary infection", &v, 24).unwrap();
    assert_eq!(enc.encode_tensor(&store, &t).unwrap().shape(), &[24, 32]);
}

#[test]
fn pad_tail_content_does_not_reach_real_tokens() {
    let (store, enc) = text_encoder(24);
    let v = build_vocab(GRAMMAR).unwrap();
    let t = tokenize("two infected areas", &v, 24).unwrap();
    let mut other = t.clone();
    for id in &mut other.ids[t.real_len()..] {
        *id = UNK;
    }
    let a = enc.encode_tensor(&store, &t).unwrap();
    let b = enc.encode_tensor(&store, &other).unwrap();
    let n = t.real_len() * 32;
    assert!(a.data()[..n].iter().zip(&b.data()[..n]).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn extra_padding_leaves_real_tokens_unchanged(subset in 1u8..16, extra in 1usize..12) {
        let (store, enc) = text_encoder(24);
        let v = build_vocab(GRAMMAR).unwrap();
        let anchors: Vec<Anchor> = Anchor::ALL.iter().enumerate().filter(|(i, _)| subset >> i & 1 == 1).map(|(_, a)| *a).collect();
        let p = describe(&anchors);
        let text = format!("{}, {}, {}", p.stage1, p.stage2, p.stage3);
        let short = tokenize(&text, &v, 24).unwrap();
        let long = tokenize(&text, &v, 24 + extra).unwrap();
        let a = enc.encode_tensor(&store, &short).unwrap();
        let b = enc.encode_tensor(&store, &long).unwrap();
        let n = short.real_len() * 32;
        let diff = a.data()[..n].iter().zip(&b.data()[..n]).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(diff <= 1e-5, "max diff {}", diff);
    }

    #[test]
    fn strides_hold_for_any_valid_side(mult in 1usize..4) {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, 1, "image", ImageConfig { widths: vec![4, 6, 8, 10] }).unwrap();
        let side = 32 * mult;
        let feats = encode_image(&enc, &store, &Tensor::full([1, side, side], 0.5)).unwrap();
        for (t, stride) in feats.iter().zip([4, 8, 16, 32]) {
            prop_assert_eq!(t.shape()[1], side / stride);
            prop_assert_eq!(t.shape()[2], side / stride);
        }
    }
}
