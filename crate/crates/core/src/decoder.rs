//! Text-guided decoder stage and its text-free counterpart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv, linear, mhca, mhsa, norm, posenc2d, ConvParams, LinearParams, MhaParams, NormParams, PosEnc2D};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Shape of one decoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDims {
    /// Incoming visual width.
    pub channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
    /// Incoming token grid side (the grid is square).
    pub grid: usize,
    pub text_dim: usize,
    pub text_len: usize,
    /// Number of text tokens after projection.
    pub text_tokens: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct GuideDecoderParams {
    pub dims: StageDims,
    pub text_proj: LinearParams,
    pub token_reduce: ConvParams,
    pub self_attn: MhaParams,
    pub cross_attn: MhaParams,
    pub ln_sa: NormParams,
    pub ln_ca: NormParams,
    pub alpha: ParamId,
    pub merge: ConvParams,
    pub posenc: PosEnc2D,
}

impl GuideDecoderParams {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dims: StageDims) -> Result<Self> {
        if dims.text_tokens == 0 || dims.text_tokens >= dims.text_len {
            return Err(Error::Config(format!(
                "projected token count {} must lie in [1, {})",
                dims.text_tokens, dims.text_len
            )));
        }
        let c = dims.channels;
        Ok(GuideDecoderParams {
            text_proj: LinearParams::new(store, seed, &format!("{name}.text_proj"), dims.text_dim, c, false)?,
            token_reduce: ConvParams::new(store, seed, &format!("{name}.token_reduce"), dims.text_len, dims.text_tokens, 1, 1, 0)?,
            self_attn: MhaParams::new(store, seed, &format!("{name}.self_attn"), c, dims.heads)?,
            cross_attn: MhaParams::new(store, seed, &format!("{name}.cross_attn"), c, dims.heads)?,
            ln_sa: NormParams::new(store, &format!("{name}.ln_sa"), c)?,
            ln_ca: NormParams::new(store, &format!("{name}.ln_ca"), c)?,
            alpha: store.init_const(&format!("{name}.alpha"), &[1], 0.0)?,
            merge: ConvParams::new(store, seed, &format!("{name}.merge"), c + dims.skip_channels, dims.out_channels, 3, 1, 1)?,
            posenc: posenc2d(dims.grid, dims.grid, c)?,
            dims,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PlainDecoderParams {
    pub dims: StageDims,
    pub merge: ConvParams,
}

impl PlainDecoderParams {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dims: StageDims) -> Result<Self> {
        let merge = ConvParams::new(store, seed, &format!("{name}.merge"), dims.channels + dims.skip_channels, dims.out_channels, 3, 1, 1)?;
        Ok(PlainDecoderParams { dims, merge })
    }
}

/// Inputs of one stage: visual tokens `[(H·W)×C]`, text features `[L×D]`
/// with their PAD mask, and the skip map `[C_skip×2H×2W]`.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a> {
    pub visual: Var,
    pub text: Var,
    pub text_mask: &'a [bool],
    pub skip: Var,
}

/// `C×H×W` map to `(H·W)×C` tokens.
pub fn to_tokens(g: &mut Graph, map: Var) -> Result<Var> {
    let (c, h, w) = g.value(map).dims3()?;
    let flat = g.reshape(map, &[c, h * w])?;
    g.transpose(flat)
}

/// `(H·W)×C` tokens back to a `C×side×side` map.
pub fn from_tokens(g: &mut Graph, tokens: Var, side: usize) -> Result<Var> {
    let (n, c) = g.value(tokens).dims2()?;
    if n != side * side {
        return Err(Error::dim(format!("{n} tokens do not form a {side}×{side} grid")));
    }
    let t = g.transpose(tokens)?;
    g.reshape(t, &[c, side, side])
}

/// Per-token linear projection of the text, a 1×1 convolution across the
/// token axis reducing `L` rows to `M`, then ReLU. PAD rows are zeroed first.
pub fn project_text(g: &mut Graph, b: &Binding, text: Var, mask: &[bool], p: &GuideDecoderParams) -> Result<Var> {
    let (l, d) = g.value(text).dims2()?;
    if l != p.dims.text_len || d != p.dims.text_dim || mask.len() != l {
        return Err(Error::dim(format!(
            "text features {:?} with mask of {} do not match {}×{}",
            g.shape(text),
            mask.len(),
            p.dims.text_len,
            p.dims.text_dim
        )));
    }
    let keep = g.constant(Tensor::from_fn([l, d], |i| if mask[i / d] { 1.0 } else { 0.0 }));
    let text = g.mul(text, keep)?;
    let projected = linear(g, b, text, &p.text_proj)?;
    let c = p.dims.channels;
    let as_map = g.reshape(projected, &[l, 1, c])?;
    let reduced = conv(g, b, as_map, &p.token_reduce)?;
    let reduced = g.reshape(reduced, &[p.dims.text_tokens, c])?;
    Ok(g.relu(reduced))
}

/// Adds the positional encoding, then a residual normalized self-attention.
pub fn evolve_visual(g: &mut Graph, b: &Binding, visual: Var, p: &GuideDecoderParams) -> Result<Var> {
    if g.shape(visual) != p.posenc.table.shape() {
        return Err(Error::dim(format!(
            "visual tokens {:?} do not match the {}×{} positional grid of width {}",
            g.shape(visual),
            p.posenc.height,
            p.posenc.width,
            p.posenc.channels
        )));
    }
    let pos = g.constant(p.posenc.table.clone());
    let encoded = g.add(visual, pos)?;
    let attended = mhsa(g, b, encoded, &p.self_attn, None)?;
    let normed = norm(g, b, attended, &p.ln_sa)?;
    g.add(encoded, normed)
}

/// Gated residual cross-attention from visual tokens to projected text.
pub fn cross_fuse(g: &mut Graph, b: &Binding, visual: Var, text: Var, p: &GuideDecoderParams) -> Result<Var> {
    let (_, cv) = g.value(visual).dims2()?;
    let (_, ct) = g.value(text).dims2()?;
    if cv != p.dims.channels || ct != p.dims.channels {
        return Err(Error::dim(format!("cross attention widths {cv} and {ct} differ from {}", p.dims.channels)));
    }
    let attended = mhca(g, b, visual, text, &p.cross_attn, None)?;
    let normed = norm(g, b, attended, &p.ln_ca)?;
    let gated = g.scalar_mul(b.var(p.alpha), normed)?;
    g.add(visual, gated)
}

/// Reshape tokens to a map, upsample ×2, concatenate the skip after it on
/// the channel axis, then convolve and ReLU.
pub fn decode_merge(g: &mut Graph, b: &Binding, tokens: Var, skip: Var, merge: &ConvParams, dims: &StageDims) -> Result<Var> {
    let (_, sh, sw) = g.value(skip).dims3()?;
    if sh != 2 * dims.grid || sw != 2 * dims.grid {
        return Err(Error::dim(format!(
            "skip map {:?} must be twice the {}×{} token grid",
            g.shape(skip),
            dims.grid,
            dims.grid
        )));
    }
    let map = from_tokens(g, tokens, dims.grid)?;
    let up = g.upsample_nearest2x(map)?;
    let cat = g.concat(&[up, skip], 0)?;
    let out = conv(g, b, cat, merge)?;
    Ok(g.relu(out))
}

pub fn guide_decoder_forward(g: &mut Graph, b: &Binding, io: StageInput<'_>, p: &GuideDecoderParams) -> Result<Var> {
    let text = project_text(g, b, io.text, io.text_mask, p)?;
    let evolved = evolve_visual(g, b, io.visual, p)?;
    let fused = cross_fuse(g, b, evolved, text, p)?;
    decode_merge(g, b, fused, io.skip, &p.merge, &p.dims)
}

pub fn plain_decoder_forward(g: &mut Graph, b: &Binding, visual: Var, skip: Var, p: &PlainDecoderParams) -> Result<Var> {
    decode_merge(g, b, visual, skip, &p.merge, &p.dims)
}
