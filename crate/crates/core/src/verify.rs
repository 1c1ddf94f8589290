//! Finite-difference verification of every layer type and a reduced
//! end-to-end model.

use serde::Serialize;

use crate::data::prompt::describe;
use crate::data::scene::Anchor;
use crate::decoder::{cross_fuse, decode_merge, evolve_visual, guide_decoder_forward, project_text, GuideDecoderParams, StageDims, StageInput};
use crate::encoders::{build_vocab, tokenize, ImageConfig, ImageEncoder, TextConfig, TextEncoder};
use crate::error::Result;
use crate::gradcheck::{analytic_grads, compare_gradients, ParamCheck};
use crate::graph::{Graph, Var};
use crate::loss::{bce_loss, combined_loss, dice_loss};
use crate::model::{ModelConfig, PromptMode, SegModel};
use crate::nn::{linear, mhca, mhsa, LinearParams, MhaParams};
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub eps: f32,
    pub tol: f64,
    pub components: Vec<ComponentCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<(String, Tensor)>,
    f: Objective,
}

/// Names of the checked components, in report order.
pub fn component_names() -> Vec<&'static str> {
    cases(0).map(|c| c.into_iter().map(|c| c.name).collect()).unwrap_or_default()
}

/// Runs every component check. `fault` names a component whose analytic
/// gradient is deliberately scaled before comparison, to exercise failure
/// reporting.
pub fn gradcheck_suite(seed: u64, fault: Option<&str>) -> Result<SuiteReport> {
    let mut components = Vec::new();
    for case in cases(seed)? {
        let mut analytic = analytic_grads(&case.f, &case.params)?;
        if fault == Some(case.name) {
            for t in &mut analytic {
                t.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 1e-2);
            }
        }
        let report = compare_gradients(&case.f, &case.params, &analytic, EPS, TOL)?;
        components.push(ComponentCheck {
            component: case.name.to_string(),
            max_rel_error: report.max_rel_error(),
            passed: report.passed(),
            params: report.params,
        });
    }
    Ok(SuiteReport { seed, eps: EPS, tol: TOL, components })
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(g.shape(out).to_vec(), 1.0, &mut Rng::named(seed, "probe"));
    let r = g.constant(r);
    let y = g.mul(out, r)?;
    Ok(g.sum(y))
}

fn store_params(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
}

fn rand(shape: &[usize], bound: f32, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), bound, rng)
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn small_stage(store: &mut ParamStore, seed: u64, alpha: f32) -> Result<GuideDecoderParams> {
    let dims = StageDims {
        channels: 8,
        skip_channels: 4,
        out_channels: 4,
        grid: 2,
        text_dim: 8,
        text_len: 5,
        text_tokens: 2,
        heads: 2,
    };
    let p = GuideDecoderParams::new(store, seed, "stage", dims)?;
    *store.get_mut(p.alpha) = Tensor::scalar(alpha);
    Ok(p)
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = Rng::named(seed, "gradcheck");
    let mut out: Vec<Case> = Vec::new();

    out.push(Case {
        name: "matmul",
        params: named(vec![("a", rand(&[3, 4], 1.0, &mut rng)), ("b", rand(&[4, 2], 1.0, &mut rng))]),
        f: Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, seed)
        }),
    });

    out.push(Case {
        name: "conv2d",
        params: named(vec![
            ("x", rand(&[2, 5, 5], 1.0, &mut rng)),
            ("weight", rand(&[3, 2, 3, 3], 0.5, &mut rng)),
            ("bias", rand(&[3], 0.5, &mut rng)),
        ]),
        f: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(g, y, seed)
        }),
    });

    out.push(Case {
        name: "layer_norm",
        params: named(vec![
            ("x", rand(&[3, 6], 2.0, &mut rng)),
            ("gamma", rand(&[6], 1.0, &mut rng)),
            ("beta", rand(&[6], 1.0, &mut rng)),
        ]),
        f: Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, seed)
        }),
    });

    out.push(Case {
        name: "softmax",
        params: named(vec![("x", rand(&[3, 5], 2.0, &mut rng))]),
        f: Box::new(move |g, v| {
            let y = g.softmax(v[0], 1)?;
            probe(g, y, seed)
        }),
    });

    out.push(Case {
        name: "upsample",
        params: named(vec![("x", rand(&[2, 2, 3], 1.0, &mut rng))]),
        f: Box::new(move |g, v| {
            let y = g.upsample_nearest2x(v[0])?;
            probe(g, y, seed)
        }),
    });

    {
        let mut store = ParamStore::new();
        let lin = LinearParams::new(&mut store, seed, "linear", 5, 3, true)?;
        let x = rand(&[4, 5], 1.0, &mut rng);
        out.push(Case {
            name: "linear",
            params: store_params(&store),
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let xv = g.constant(x.clone());
                let y = linear(g, &b, xv, &lin)?;
                probe(g, y, seed)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let attn = MhaParams::new(&mut store, seed, "mhsa", 8, 2)?;
        let x = rand(&[5, 8], 1.0, &mut rng);
        let mask = vec![true, true, true, false, true];
        out.push(Case {
            name: "mhsa",
            params: store_params(&store),
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let xv = g.constant(x.clone());
                let y = mhsa(g, &b, xv, &attn, Some(&mask))?;
                probe(g, y, seed)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let attn = MhaParams::new(&mut store, seed, "mhca", 8, 2)?;
        let q = rand(&[4, 8], 1.0, &mut rng);
        let kv = rand(&[3, 8], 1.0, &mut rng);
        out.push(Case {
            name: "mhca",
            params: store_params(&store),
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
                let y = mhca(g, &b, qv, kvv, &attn, None)?;
                probe(g, y, seed)
            }),
        });
    }

    let target = Tensor::from_fn([1, 3, 3], |i| (i * 7 + seed as usize).is_multiple_of(3) as u8 as f32);
    let probs = Tensor::from_fn([1, 3, 3], |_| rng.uniform_f32(0.1, 0.9));
    for (name, which) in [("dice_loss", 0), ("bce_loss", 1), ("combined_loss", 2)] {
        let target = target.clone();
        out.push(Case {
            name,
            params: named(vec![("probs", probs.clone())]),
            f: Box::new(move |g, v| match which {
                0 => dice_loss(g, v[0], &target),
                1 => bce_loss(g, v[0], &target),
                _ => combined_loss(g, v[0], &target),
            }),
        });
    }

    // One guide stage at a 2×2 token grid, with its gate open.
    let text = rand(&[5, 8], 1.0, &mut rng);
    let mask = vec![true, true, true, false, false];
    let visual = rand(&[4, 8], 1.0, &mut rng);
    let skip = rand(&[4, 4, 4], 1.0, &mut rng);
    for name in ["project_text", "evolve_visual", "cross_fuse", "decode_merge", "guide_decoder"] {
        let mut store = ParamStore::new();
        let p = small_stage(&mut store, seed, 0.7)?;
        let (text, mask, visual, skip) = (text.clone(), mask.clone(), visual.clone(), skip.clone());
        out.push(Case {
            name,
            params: store_params(&store),
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let t = g.constant(text.clone());
                let vis = g.constant(visual.clone());
                let sk = g.constant(skip.clone());
                let y = match name {
                    "project_text" => project_text(g, &b, t, &mask, &p)?,
                    "evolve_visual" => evolve_visual(g, &b, vis, &p)?,
                    "cross_fuse" => {
                        let ft = project_text(g, &b, t, &mask, &p)?;
                        cross_fuse(g, &b, vis, ft, &p)?
                    }
                    "decode_merge" => decode_merge(g, &b, vis, sk, &p.merge, &p.dims)?,
                    _ => guide_decoder_forward(g, &b, StageInput { visual: vis, text: t, text_mask: &mask, skip: sk }, &p)?,
                };
                probe(g, y, seed)
            }),
        });
    }

    {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, seed, "image", ImageConfig { widths: vec![4, 8] })?;
        let image = Tensor::from_fn([1, 8, 8], |_| rng.uniform_f32(0.0, 1.0));
        out.push(Case {
            name: "image_encoder",
            params: store_params(&store),
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let x = g.constant(image.clone());
                let feats = enc.encode(g, &b, x)?;
                let deepest = *feats.last().expect("two stages");
                probe(g, deepest, seed)
            }),
        });
    }

    {
        let vocab = build_vocab(crate::data::prompt::GRAMMAR)?;
        let mut store = ParamStore::new();
        let cfg = TextConfig { dim: 8, blocks: 1, heads: 2, ffn_dim: 12, max_len: 6 };
        let enc = TextEncoder::new(&mut store, seed, "text", vocab.len(), cfg)?;
        let tokens = tokenize("left upper lung", &vocab, 6)?;
        out.push(Case {
            name: "text_encoder",
            params: store_params(&store),
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let y = enc.encode(g, &b, &tokens)?;
                probe(g, y, seed)
            }),
        });
    }

    {
        let model = reduced_model(seed)?;
        let image = Tensor::from_fn([1, 8, 8], |_| rng.uniform_f32(0.0, 1.0));
        let target = Tensor::from_fn([1, 8, 8], |i| (i % 3 == 0) as u8 as f32);
        let prompt = describe(&[Anchor::LeftUpper, Anchor::RightLower]);
        let params = store_params(&model.store);
        out.push(Case {
            name: "end_to_end",
            params,
            f: Box::new(move |g, v| {
                let b = Binding::from_vars(v.to_vec());
                let x = g.constant(image.clone());
                let logits = model.forward(g, &b, x, &prompt)?;
                let probs = g.sigmoid(logits);
                combined_loss(g, probs, &target)
            }),
        });
    }
    Ok(out)
}

/// One guide stage over a two-stage encoder on 8×8 images, gates open.
pub fn reduced_model(seed: u64) -> Result<SegModel> {
    let config = ModelConfig {
        image_side: 8,
        image: ImageConfig { widths: vec![4, 8] },
        text: TextConfig { dim: 8, blocks: 1, heads: 2, ffn_dim: 12, max_len: 12 },
        text_tokens: 2,
        decoder_heads: 2,
        guide_stages: 1,
        prompt_mode: PromptMode::S123,
    };
    let mut model = SegModel::new(config, seed)?;
    for id in model.alphas() {
        *model.store.get_mut(id) = Tensor::scalar(0.7);
    }
    Ok(model)
}
