//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: an op can only consume vars that exist when it is
//! recorded. [`Graph::backward`] walks the tape once in reverse, so each node
//! is visited exactly once and fan-out gradients are summed before a node
//! propagates further.
//!
//! A graph and its values belong to one worker; independent graphs can be
//! built concurrently from shared read-only parameters.

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, split_axis, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities inside binary cross-entropy.
pub const BCE_CLAMP: f32 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScalarMul { scalar: Var, x: Var },
    AddRowBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f32> },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Upsample2x(Var),
    Reshape(Var),
    Transpose(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Dice { p: Var, target: Vec<f32>, eps: f32 },
    Bce { p: Var, target: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`backward`](Self::backward). `None` when the
    /// leaf does not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the var, zeros when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Hash of which side of every non-differentiable point each input lies
    /// on: ReLU input signs and BCE clamp regions. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bit: u64| h = (h ^ bit).wrapping_mul(0x0100_0000_01b3);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|&v| feed((v > 0.0) as u64)),
                Op::Bce { p, .. } => self.value(*p).data().iter().for_each(|&v| {
                    feed(if v < BCE_CLAMP { 2 } else if v > 1.0 - BCE_CLAMP { 3 } else { 4 })
                }),
                _ => {}
            }
        }
        h
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = map(self.value(x), |v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiplication by a single-element var (broadcast).
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::dim(format!(
                "scalar_mul expects a single-element scalar, got {:?}",
                self.shape(scalar)
            )));
        }
        let s = self.value(scalar).item();
        let value = map(self.value(x), |v| s * v);
        Ok(self.push(value, Op::ScalarMul { scalar, x }, &[scalar, x]))
    }

    /// `x[N×C] + bias[C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "bias {:?} does not match rows of width {c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    /// 2-D convolution of `x[cin×h×w]` with `w[cout×cin×kh×kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let (cout, cin2, kh, kw) = self.value(w).dims4()?;
        if cin != cin2 {
            return Err(Error::dim(format!(
                "conv2d input channels {cin} do not match kernel {:?}",
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("conv bias {:?} expected [{cout}]", self.shape(b))));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, ho, wo };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.cols();
        let mut out = vec![0.0; cout * p];
        gemm(cout, geom.rows(), p, self.value(w).data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            for (row, bb) in out.chunks_mut(p).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
        let value = Tensor::new([cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, &inputs))
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = map(self.value(x), sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f64;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e as f64;
                }
                let inv = (1.0 / total) as f32;
                for j in 0..len {
                    out[at(j)] *= inv;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis of `x[N×M]` where only keys with
    /// `mask[j] == true` participate; masked keys get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if mask.len() != m {
            return Err(Error::dim(format!("mask length {} for {m} keys", mask.len())));
        }
        if !mask.iter().any(|&k| k) {
            return Err(Error::Contract("every key is masked".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for (row, dst) in src.chunks(m).zip(out.chunks_mut(m)) {
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for ((d, v), &k) in dst.iter_mut().zip(row).zip(mask) {
                if k {
                    *d = (v - max).exp();
                    total += *d as f64;
                }
            }
            let inv = (1.0 / total) as f32;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, Op::MaskedSoftmax(x), &[x]))
    }

    /// Normalizes over the last dimension, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "layer_norm over {c} channels with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = inv as f32;
            for j in 0..c {
                let xh = ((row[j] as f64 - mean) * inv) as f32;
                xhat[r * c + j] = xh;
                out[r * c + j] = gm[j] * xh + bt[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Nearest-neighbour ×2 upsampling of `x[C×H×W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[(ch * h + y / 2) * w..][..w];
                let drow = &mut out[(ch * h2 + y) * w2..][..w2];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        let value = Tensor::new([c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Transpose of a rank-2 var.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Index(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Index(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat along {axis}: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len() × D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} out of range for table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean(x), &[x])
    }

    /// Soft Dice loss `1 − (2Σpt + eps)/(Σp + Σt + eps)` over all elements.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor, eps: f32) -> Result<Var> {
        self.check_target("dice_loss", p, target)?;
        let (inter, total) = dice_sums(self.value(p).data(), target.data());
        let loss = 1.0 - (2.0 * inter + eps as f64) / (total + eps as f64);
        let op = Op::Dice { p, target: target.data().to_vec(), eps };
        Ok(self.push(Tensor::scalar(loss as f32), op, &[p]))
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[BCE_CLAMP, 1 − BCE_CLAMP]`.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        self.check_target("bce_loss", p, target)?;
        let pd = self.value(p).data();
        let n = pd.len() as f64;
        let total: f64 = pd
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
                let t = t as f64;
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let op = Op::Bce { p, target: target.data().to_vec() };
        Ok(self.push(Tensor::scalar((total / n) as f32), op, &[p]))
    }

    fn check_target(&self, what: &str, p: Var, target: &Tensor) -> Result<()> {
        if self.shape(p) != target.shape() {
            return Err(Error::dim(format!(
                "{what}: prediction {:?} vs target {:?}",
                self.shape(p),
                target.shape()
            )));
        }
        Ok(())
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every `requires_grad` leaf reachable from
    /// `loss`. Previous gradients are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract("loss does not depend on any parameter".into()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backprop(&self.nodes, &mut self.grads, i, &g);
        }
        Ok(())
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let val = |v: Var| nodes[v.0].value.data();
    let wants = |v: Var| nodes[v.0].requires_grad;
    let out = nodes[i].value.data();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if wants(*a) {
                gemm(m, n, k, g, false, val(*b), true, slot(grads, nodes, *a), true);
            }
            if wants(*b) {
                gemm(k, m, n, val(*a), true, g, false, slot(grads, nodes, *b), true);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(v) {
                    add_into(slot(grads, nodes, v), g);
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let (bv, da) = (val(*b), slot(grads, nodes, *a));
                da.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b);
            }
            if wants(*b) {
                let (av, db) = (val(*a), slot(grads, nodes, *b));
                db.iter_mut().zip(g).zip(av).for_each(|((d, g), a)| *d += g * a);
            }
        }
        Op::Scale(x, c) => {
            if wants(*x) {
                slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::ScalarMul { scalar, x } => {
            let s = val(*scalar)[0];
            if wants(*scalar) {
                let acc: f64 = g.iter().zip(val(*x)).map(|(g, x)| (*g as f64) * (*x as f64)).sum();
                slot(grads, nodes, *scalar)[0] += acc as f32;
            }
            if wants(*x) {
                slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
            }
        }
        Op::AddRowBias { x, bias } => {
            if wants(*x) {
                add_into(slot(grads, nodes, *x), g);
            }
            if wants(*bias) {
                let db = slot(grads, nodes, *bias);
                let c = db.len();
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let cout = nodes[w.0].value.shape()[0];
            let (k, p) = (geom.rows(), geom.cols());
            if wants(*w) {
                gemm(cout, p, k, g, false, cols, true, slot(grads, nodes, *w), true);
            }
            if let Some(b) = b {
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                        *d += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                }
            }
            if wants(*x) {
                if geom.is_pointwise() {
                    gemm(k, cout, p, val(*w), true, g, false, slot(grads, nodes, *x), true);
                } else {
                    let mut dcols = vec![0.0; k * p];
                    gemm(k, cout, p, val(*w), true, g, false, &mut dcols, false);
                    col2im_add(&dcols, geom, slot(grads, nodes, *x));
                }
            }
        }
        Op::Relu(x) => {
            if wants(*x) {
                let dx = slot(grads, nodes, *x);
                for ((d, g), y) in dx.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if wants(*x) {
                let dx = slot(grads, nodes, *x);
                dx.iter_mut().zip(g).zip(out).for_each(|((d, g), y)| *d += g * y * (1.0 - y));
            }
        }
        Op::Softmax { x, axis } => {
            if wants(*x) {
                let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis);
                let dx = slot(grads, nodes, *x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: f32 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            if wants(*x) {
                let m = nodes[i].value.shape()[1];
                let dx = slot(grads, nodes, *x);
                for ((d, gr), y) in dx.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let dot: f32 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        d[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = nodes[gamma.0].value.numel();
            if wants(*gamma) {
                let dg = slot(grads, nodes, *gamma);
                for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += gr[j] * xh[j];
                    }
                }
            }
            if wants(*beta) {
                let db = slot(grads, nodes, *beta);
                for gr in g.chunks(c) {
                    add_into(db, gr);
                }
            }
            if wants(*x) {
                let gm = val(*gamma);
                let dx = slot(grads, nodes, *x);
                for (r, ((d, gr), xh)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                    let mut sum = 0.0f64;
                    let mut sum_xh = 0.0f64;
                    for j in 0..c {
                        let dxh = (gr[j] * gm[j]) as f64;
                        sum += dxh;
                        sum_xh += dxh * xh[j] as f64;
                    }
                    let (mean, mean_xh) = (sum / c as f64, sum_xh / c as f64);
                    for j in 0..c {
                        let dxh = (gr[j] * gm[j]) as f64;
                        d[j] += (rstd[r] as f64 * (dxh - mean - xh[j] as f64 * mean_xh)) as f32;
                    }
                }
            }
        }
        Op::Upsample2x(x) => {
            if wants(*x) {
                let (c, h, w) = {
                    let s = nodes[x.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let w2 = 2 * w;
                let dx = slot(grads, nodes, *x);
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let base = (ch * 2 * h + 2 * y) * w2 + 2 * xx;
                            dx[(ch * h + y) * w + xx] += g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if wants(*x) {
                add_into(slot(grads, nodes, *x), g);
            }
        }
        Op::Transpose(x) => {
            if wants(*x) {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let dx = slot(grads, nodes, *x);
                for ii in 0..r {
                    for j in 0..c {
                        dx[ii * c + j] += g[j * r + ii];
                    }
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            if wants(*x) {
                let (outer, dim, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                let dx = slot(grads, nodes, *x);
                for o in 0..outer {
                    let dst = &mut dx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(nodes[i].value.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].value.shape()[*axis];
                if wants(v) {
                    let dx = slot(grads, nodes, v);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut dx[o * len * inner..(o + 1) * len * inner], src);
                    }
                }
                offset += len;
            }
        }
        Op::GatherRows { table, ids } => {
            if wants(*table) {
                let d = nodes[table.0].value.shape()[1];
                let dt = slot(grads, nodes, *table);
                for (row, &id) in g.chunks(d).zip(ids) {
                    add_into(&mut dt[id * d..(id + 1) * d], row);
                }
            }
        }
        Op::Sum(x) => {
            if wants(*x) {
                slot(grads, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if wants(*x) {
                let dx = slot(grads, nodes, *x);
                let s = g[0] / dx.len() as f32;
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Dice { p, target, eps } => {
            if wants(*p) {
                let (inter, total) = dice_sums(val(*p), target);
                let denom = total + *eps as f64;
                let numer = 2.0 * inter + *eps as f64;
                let dp = slot(grads, nodes, *p);
                for (d, t) in dp.iter_mut().zip(target) {
                    let grad = -(2.0 * *t as f64 * denom - numer) / (denom * denom);
                    *d += (grad * g[0] as f64) as f32;
                }
            }
        }
        Op::Bce { p, target } => {
            if wants(*p) {
                let pv = val(*p);
                let n = pv.len() as f64;
                let dp = slot(grads, nodes, *p);
                for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                    if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                        let (p, t) = (p as f64, t as f64);
                        let grad = (-t / p + (1.0 - t) / (1.0 - p)) / n;
                        *d += (grad * g[0] as f64) as f32;
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated as zeros on first touch.
fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn dice_sums(p: &[f32], t: &[f32]) -> (f64, f64) {
    let mut inter = 0.0f64;
    let mut total = 0.0f64;
    for (&p, &t) in p.iter().zip(t) {
        inter += p as f64 * t as f64;
        total += p as f64 + t as f64;
    }
    (inter, total)
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
