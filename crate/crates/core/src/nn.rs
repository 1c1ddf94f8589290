//! Linear, convolution, normalization, attention and positional-encoding blocks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

/// `x·W (+ b)` with `W[in×out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = store.init_uniform(seed, &format!("{name}.weight"), &[in_dim, out_dim], in_dim)?;
        let bias = if bias {
            Some(store.init_uniform(seed, &format!("{name}.bias"), &[out_dim], in_dim)?)
        } else {
            None
        };
        Ok(LinearParams { weight, bias, in_dim, out_dim })
    }
}

pub fn linear(g: &mut Graph, b: &Binding, x: Var, p: &LinearParams) -> Result<Var> {
    let (_, d) = g.value(x).dims2()?;
    if d != p.in_dim {
        return Err(Error::dim(format!("linear expects {} input features, got {:?}", p.in_dim, g.shape(x))));
    }
    let y = g.matmul(x, b.var(p.weight))?;
    match p.bias {
        Some(bias) => g.add_row_bias(y, b.var(bias)),
        None => Ok(y),
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = store.init_uniform(seed, &format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in)?;
        let bias = Some(store.init_uniform(seed, &format!("{name}.bias"), &[cout], fan_in)?);
        Ok(ConvParams { weight, bias, stride, pad })
    }
}

pub fn conv(g: &mut Graph, b: &Binding, x: Var, p: &ConvParams) -> Result<Var> {
    g.conv2d(x, b.var(p.weight), p.bias.map(|id| b.var(id)), p.stride, p.pad)
}

/// Affine of a layer norm.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.init_const(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.init_const(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }
}

pub fn norm(g: &mut Graph, b: &Binding, x: Var, p: &NormParams) -> Result<Var> {
    g.layer_norm(x, b.var(p.gamma), b.var(p.beta), LN_EPS)
}

/// Layer norm over the channel axis of a `C×H×W` map.
pub fn channel_norm(g: &mut Graph, b: &Binding, x: Var, p: &NormParams) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[c, h * w])?;
    let tokens = g.transpose(flat)?;
    let normed = norm(g, b, tokens, p)?;
    let back = g.transpose(normed)?;
    g.reshape(back, &[c, h, w])
}

/// Multi-head attention weights: four square projections of the model width.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub heads: usize,
    pub head_dim: usize,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide model width {dim}")));
        }
        let mut proj = |which: &str| LinearParams::new(store, seed, &format!("{name}.{which}"), dim, dim, true);
        Ok(MhaParams {
            heads,
            head_dim: dim / heads,
            query: proj("query")?,
            key: proj("key")?,
            value: proj("value")?,
            output: proj("output")?,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Attention result plus the per-head `N×M` weight matrices.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention of `queries[N×C]` over `context[M×C]`.
/// Keys with `mask[j] == false` receive zero weight.
pub fn attention(
    g: &mut Graph,
    b: &Binding,
    queries: Var,
    context: Var,
    p: &MhaParams,
    mask: Option<&[bool]>,
) -> Result<Attended> {
    let (_, cq) = g.value(queries).dims2()?;
    let (m, ck) = g.value(context).dims2()?;
    if cq != p.dim() || ck != p.dim() {
        return Err(Error::dim(format!(
            "attention width {} vs queries {:?} and context {:?}",
            p.dim(),
            g.shape(queries),
            g.shape(context)
        )));
    }
    let all_keys;
    let mask = match mask {
        Some(mask) => mask,
        None => {
            all_keys = vec![true; m];
            &all_keys
        }
    };
    let q = linear(g, b, queries, &p.query)?;
    let k = linear(g, b, context, &p.key)?;
    let v = linear(g, b, context, &p.value)?;
    let scale = 1.0 / (p.head_dim as f32).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (start, len) = (h * p.head_dim, p.head_dim);
        let qh = g.narrow(q, 1, start, len)?;
        let kh = g.narrow(k, 1, start, len)?;
        let vh = g.narrow(v, 1, start, len)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let w = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let output = linear(g, b, joined, &p.output)?;
    Ok(Attended { output, weights })
}

/// Multi-head self-attention over the rows of `x[N×C]`.
pub fn mhsa(g: &mut Graph, b: &Binding, x: Var, p: &MhaParams, mask: Option<&[bool]>) -> Result<Var> {
    Ok(attention(g, b, x, x, p, mask)?.output)
}

/// Multi-head cross-attention: queries from `q[N×C]`, keys and values from `kv[M×C]`.
pub fn mhca(g: &mut Graph, b: &Binding, q: Var, kv: Var, p: &MhaParams, kv_mask: Option<&[bool]>) -> Result<Var> {
    Ok(attention(g, b, q, kv, p, kv_mask)?.output)
}

/// Fixed 2-D sinusoidal positional encoding for an `H×W` token grid.
///
/// The first `C/2` channels encode the row and the last `C/2` the column,
/// each as interleaved `(sin, cos)` pairs at frequencies `10000^(-k/(C/4))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEnc2D {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(H·W)×C`, row-major over the grid.
    pub table: Tensor,
}

pub fn posenc2d(height: usize, width: usize, channels: usize) -> Result<PosEnc2D> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Config(format!("positional encoding width {channels} is not a multiple of 4")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("positional encoding grid must be non-empty".into()));
    }
    let pairs = channels / 4;
    let half = channels / 2;
    let mut data = vec![0.0f32; height * width * channels];
    for r in 0..height {
        for c in 0..width {
            let row = &mut data[(r * width + c) * channels..][..channels];
            for k in 0..pairs {
                let freq = 10000f64.powf(-(k as f64) / pairs as f64);
                let (ar, ac) = (r as f64 * freq, c as f64 * freq);
                row[2 * k] = ar.sin() as f32;
                row[2 * k + 1] = ar.cos() as f32;
                row[half + 2 * k] = ac.sin() as f32;
                row[half + 2 * k + 1] = ac.cos() as f32;
            }
        }
    }
    Ok(PosEnc2D { height, width, channels, table: Tensor::new([height * width, channels], data)? })
}

/// 1-D sinusoidal encoding `[len×dim]` for token sequences (`dim` even).
pub fn posenc1d(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("sequence encoding width {dim} is not even")));
    }
    let pairs = dim / 2;
    Tensor::new(
        [len, dim],
        (0..len * dim)
            .map(|i| {
                let (pos, ch) = (i / dim, i % dim);
                let freq = 10000f64.powf(-((ch / 2) as f64) / pairs as f64);
                let a = pos as f64 * freq;
                (if ch % 2 == 0 { a.sin() } else { a.cos() }) as f32
            })
            .collect(),
    )
}
