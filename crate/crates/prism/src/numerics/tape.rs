//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every primitive runs eagerly, records the node, and validates that its
//! output is finite (NaN/Inf aborts with the op name). Inputs always precede
//! outputs on the tape, so a single reverse sweep is a valid reverse
//! topological order.

use std::collections::HashMap;

use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f32),
    Matmul { m: usize, k: usize, n: usize },
    /// a[m,k] @ b[n,k]^T -> [m,n]
    MatmulNt { m: usize, k: usize, n: usize },
    Conv2d { stride: usize, pad: usize },
    AddChanBias,
    AddRowBias,
    GroupNorm { groups: usize, stats: Vec<(f32, f32)> },
    LayerNormRows { stats: Vec<(f32, f32)> },
    SoftmaxRows,
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
    Reshape,
    Sum,
    Mean,
    MeanRows,
    GlobalAvgPool,
    AvgPool2,
    Upsample2,
    ConcatChan,
    StackRows,
    SplitHeads { heads: usize },
    MergeHeads,
    Gather { ids: Vec<usize> },
    L2NormalizeRows { norms: Vec<f32> },
    CrossEntropyRows { targets: Vec<usize>, probs: Vec<f32> },
    Attention { scale: f32, probs: Vec<f32>, overridden: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChanBias => "add_chan_bias",
            Op::AddRowBias => "add_row_bias",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::SoftmaxRows => "softmax_rows",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::AvgPool2 => "avg_pool2",
            Op::Upsample2 => "upsample2",
            Op::ConcatChan => "concat_chan",
            Op::StackRows => "stack_rows",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads => "merge_heads",
            Op::Gather { .. } => "gather",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// A captured cross-attention map: softmax probabilities of shape
/// `[heads, n_q, n_k]`, recorded before any override was applied.
#[derive(Debug, Clone)]
pub struct CapturedAttention {
    pub tag: String,
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub probs: Vec<f32>,
}

/// Replacement of selected key columns of an attention map with columns
/// recorded under another prompt. `column_map` pairs (this-pass column,
/// recorded column).
#[derive(Debug, Clone)]
pub struct AttentionOverride {
    pub probs: Vec<f32>,
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub column_map: Vec<(usize, usize)>,
}

/// Gradients produced by a backward sweep, indexed by tape position.
pub struct Gradients {
    by_node: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zero-filled when the leaf did not participate.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f32> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    capture_attention: bool,
    captured: Vec<CapturedAttention>,
    overrides: HashMap<String, AttentionOverride>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn enable_capture(&mut self, on: bool) {
        self.capture_attention = on;
    }

    pub fn set_override(&mut self, tag: impl Into<String>, ov: AttentionOverride) {
        self.overrides.insert(tag.into(), ov);
    }

    pub fn captured(&self) -> &[CapturedAttention] {
        &self.captured
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name().into(), phase: "forward" });
        }
        let needs_grad = match op {
            Op::Leaf => false, // set by leaf()
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { op, inputs, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, vec![], t.clone())?;
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add, vec![a.0, b.0], Tensor::raw(shape, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub, vec![a.0, b.0], Tensor::raw(shape, data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul, vec![a.0, b.0], Tensor::raw(shape, data))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(Op::Scale(c), vec![a.0], value)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(Op::Silu, vec![a.0], value)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(gelu);
        self.push(Op::Gelu, vec![a.0], value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid, vec![a.0], value)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(softplus);
        self.push(Op::Softplus, vec![a.0], value)
    }

    // ---- matmul ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mat_mul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        self.push(Op::Matmul { m, k, n }, vec![a.0, b.0], Tensor::raw(vec![m, n], out))
    }

    /// a[m,k] @ b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{:?} @ {:?}^T", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = mat_mul_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        self.push(Op::MatmulNt { m, k, n }, vec![a.0, b.0], Tensor::raw(vec![m, n], out))
    }

    // ---- convolution ----

    /// 2-D convolution. x: [Cin,H,W], w: [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(self.nodes[x.0].value.data(), cin, h, wd, kh, kw, stride, pad, hout, wout);
        let out = mat_mul(
            self.nodes[w.0].value.data(),
            &cols,
            cout,
            cin * kh * kw,
            hout * wout,
        );
        self.push(
            Op::Conv2d { stride, pad },
            vec![x.0, w.0],
            Tensor::raw(vec![cout, hout, wout], out),
        )
    }

    /// x: [C,H,W] + b: [C] broadcast over spatial positions.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sb != vec![sx[0]] {
            return Err(Error::shape("add_chan_bias", format!("x {:?}, b {:?}", sx, sb)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xs = self.nodes[x.0].value.data();
        let bs = self.nodes[b.0].value.data();
        let mut out = xs.to_vec();
        for ci in 0..c {
            for p in 0..h * w {
                out[ci * h * w + p] += bs[ci];
            }
        }
        self.push(Op::AddChanBias, vec![x.0, b.0], Tensor::raw(sx, out))
    }

    /// x: [n,d] + b: [d] broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != vec![sx[1]] {
            return Err(Error::shape("add_row_bias", format!("x {:?}, b {:?}", sx, sb)));
        }
        let (n, d) = (sx[0], sx[1]);
        let xs = self.nodes[x.0].value.data();
        let bs = self.nodes[b.0].value.data();
        let mut out = xs.to_vec();
        for r in 0..n {
            for j in 0..d {
                out[r * d + j] += bs[j];
            }
        }
        self.push(Op::AddRowBias, vec![x.0, b.0], Tensor::raw(sx, out))
    }

    // ---- normalization ----

    /// Group normalization over [C,H,W] with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[0] % groups != 0 {
            return Err(Error::shape("group_norm", format!("x {:?}, groups {}", sx, groups)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", "gamma/beta must be [C]".to_string()));
        }
        let eps = 1e-5;
        let cpg = c / groups;
        let gsize = (cpg * h * w) as f32;
        let xs = self.nodes[x.0].value.data();
        let gs = self.nodes[gamma.0].value.data();
        let bs = self.nodes[beta.0].value.data();
        let mut out = vec![0.0f32; xs.len()];
        let mut stats = Vec::with_capacity(groups);
        for g in 0..groups {
            let lo = g * cpg * h * w;
            let hi = lo + cpg * h * w;
            let mean: f32 = xs[lo..hi].iter().sum::<f32>() / gsize;
            let var: f32 = xs[lo..hi].iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / gsize;
            let istd = 1.0 / (var + eps).sqrt();
            stats.push((mean, istd));
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                for p in 0..h * w {
                    let i = ch * h * w + p;
                    out[i] = gs[ch] * (xs[i] - mean) * istd + bs[ch];
                }
            }
        }
        self.push(
            Op::GroupNorm { groups, stats },
            vec![x.0, gamma.0, beta.0],
            Tensor::raw(sx, out),
        )
    }

    /// Per-row normalization of [n,d] with per-feature affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("layer_norm_rows", format!("x {:?}", sx)));
        }
        let (n, d) = (sx[0], sx[1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm_rows", "gamma/beta must be [d]".to_string()));
        }
        let eps = 1e-5;
        let xs = self.nodes[x.0].value.data();
        let gs = self.nodes[gamma.0].value.data();
        let bs = self.nodes[beta.0].value.data();
        let mut out = vec![0.0f32; xs.len()];
        let mut stats = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean: f32 = row.iter().sum::<f32>() / d as f32;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + eps).sqrt();
            stats.push((mean, istd));
            for j in 0..d {
                out[r * d + j] = gs[j] * (row[j] - mean) * istd + bs[j];
            }
        }
        self.push(
            Op::LayerNormRows { stats },
            vec![x.0, gamma.0, beta.0],
            Tensor::raw(sx, out),
        )
    }

    // ---- softmax / losses ----

    /// Softmax along the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("softmax_rows", "rank 0".to_string()))?;
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xs.len()];
        for r in 0..xs.len() / d {
            softmax_row(&xs[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        self.push(Op::SoftmaxRows, vec![x.0], Tensor::raw(sx, out))
    }

    /// Mean over rows of (logsumexp(row) - row[target]).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("logits {:?}, {} targets", sx, targets.len()),
            ));
        }
        let (n, m) = (sx[0], sx[1]);
        if targets.iter().any(|&t| t >= m) {
            return Err(Error::InvalidArg("cross_entropy target out of range".into()));
        }
        let xs = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0f32; xs.len()];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &xs[r * m..(r + 1) * m];
            softmax_row(row, &mut probs[r * m..(r + 1) * m]);
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| ((v - mx) as f64).exp()).sum::<f64>().ln() as f32;
            loss += (lse - row[targets[r]]) as f64;
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        self.push(
            Op::CrossEntropyRows { targets: targets.to_vec(), probs },
            vec![logits.0],
            value,
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        self.push(Op::Reshape, vec![x.0], value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel() as f32;
        let s: f32 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Mean, vec![x.0], Tensor::scalar(s / n))
    }

    /// [n,d] -> [d], mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("mean_rows", format!("x {:?}", sx)));
        }
        let (n, d) = (sx[0], sx[1]);
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; d];
        for r in 0..n {
            for j in 0..d {
                out[j] += xs[r * d + j];
            }
        }
        for v in &mut out {
            *v /= n as f32;
        }
        self.push(Op::MeanRows, vec![x.0], Tensor::raw(vec![d], out))
    }

    /// [C,H,W] -> [C], mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("x {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; c];
        for ci in 0..c {
            out[ci] = xs[ci * h * w..(ci + 1) * h * w].iter().sum::<f32>() / (h * w) as f32;
        }
        self.push(Op::GlobalAvgPool, vec![x.0], Tensor::raw(vec![c], out))
    }

    /// 2x2 average pooling, stride 2. H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] % 2 != 0 || sx[2] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("x {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; c * ho * wo];
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += xs[ci * h * w + (2 * i + di) * w + 2 * j + dj];
                        }
                    }
                    out[ci * ho * wo + i * wo + j] = s * 0.25;
                }
            }
        }
        self.push(Op::AvgPool2, vec![x.0], Tensor::raw(vec![c, ho, wo], out))
    }

    /// Nearest-neighbor 2x upsample.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("upsample2", format!("x {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h * 2, w * 2);
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; c * ho * wo];
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ci * ho * wo + i * wo + j] = xs[ci * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.push(Op::Upsample2, vec![x.0], Tensor::raw(vec![c, ho, wo], out))
    }

    /// Concatenate two [C,H,W] tensors along channels.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_chan", format!("{:?} vs {:?}", sa, sb)));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        self.push(Op::ConcatChan, vec![a.0, b.0], Tensor::raw(shape, data))
    }

    /// Stack [d] vectors into [n,d].
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidArg("stack_rows: empty input".into()));
        }
        let d = self.shape(rows[0]).to_vec();
        if d.len() != 1 {
            return Err(Error::shape("stack_rows", format!("row shape {:?}", d)));
        }
        let mut data = Vec::with_capacity(rows.len() * d[0]);
        for &r in rows {
            if self.shape(r) != d.as_slice() {
                return Err(Error::shape("stack_rows", "inconsistent row shapes".to_string()));
            }
            data.extend_from_slice(self.nodes[r.0].value.data());
        }
        let shape = vec![rows.len(), d[0]];
        self.push(Op::StackRows, rows.iter().map(|v| v.0).collect(), Tensor::raw(shape, data))
    }

    /// [n, heads*d] -> [heads, n, d]
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] % heads != 0 {
            return Err(Error::shape("split_heads", format!("x {:?}, heads {}", sx, heads)));
        }
        let (n, hd) = (sx[0], sx[1]);
        let d = hd / heads;
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xs.len()];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..d {
                    out[h * n * d + i * d + j] = xs[i * hd + h * d + j];
                }
            }
        }
        self.push(Op::SplitHeads { heads }, vec![x.0], Tensor::raw(vec![heads, n, d], out))
    }

    /// [heads, n, d] -> [n, heads*d]
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("merge_heads", format!("x {:?}", sx)));
        }
        let (heads, n, d) = (sx[0], sx[1], sx[2]);
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xs.len()];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..d {
                    out[i * heads * d + h * d + j] = xs[h * n * d + i * d + j];
                }
            }
        }
        self.push(Op::MergeHeads, vec![x.0], Tensor::raw(vec![n, heads * d], out))
    }

    /// Row lookup: table [V,d], ids -> [len(ids), d].
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", st)));
        }
        let (v, d) = (st[0], st[1]);
        if ids.iter().any(|&i| i >= v) {
            return Err(Error::InvalidArg("gather: id out of range".into()));
        }
        let ts = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&ts[i * d..(i + 1) * d]);
        }
        let shape = vec![ids.len(), d];
        self.push(Op::Gather { ids: ids.to_vec() }, vec![table.0], Tensor::raw(shape, out))
    }

    /// L2-normalize each row of [n,d] (or a single [d] vector).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("l2_normalize_rows", "rank 0".to_string()))?;
        let xs = self.nodes[x.0].value.data();
        let n = xs.len() / d;
        let mut out = vec![0.0f32; xs.len()];
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            norms.push(norm);
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        self.push(Op::L2NormalizeRows { norms }, vec![x.0], Tensor::raw(sx, out))
    }

    /// Scaled dot-product attention. q: [h,nq,d], k: [h,nk,d], v: [h,nk,dv].
    /// Softmax maps may be captured under `tag` and overridden per tag for
    /// attention-controlled editing; an overridden node cannot be
    /// differentiated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tag: Option<&str>) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3
            || sk.len() != 3
            || sv.len() != 3
            || sq[0] != sk[0]
            || sq[0] != sv[0]
            || sq[2] != sk[2]
            || sk[1] != sv[1]
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", sq, sk, sv),
            ));
        }
        let (heads, nq, d) = (sq[0], sq[1], sq[2]);
        let (nk, dv) = (sk[1], sv[2]);
        let scale = 1.0 / (d as f32).sqrt();
        let qs = self.nodes[q.0].value.data();
        let ks = self.nodes[k.0].value.data();
        let mut probs = vec![0.0f32; heads * nq * nk];
        for h in 0..heads {
            for i in 0..nq {
                let mut scores = vec![0.0f32; nk];
                for j in 0..nk {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += qs[h * nq * d + i * d + c] * ks[h * nk * d + j * d + c];
                    }
                    scores[j] = s * scale;
                }
                softmax_row(&scores, &mut probs[h * nq * nk + i * nk..h * nq * nk + (i + 1) * nk]);
            }
        }
        if self.capture_attention {
            if let Some(tag) = tag {
                self.captured.push(CapturedAttention {
                    tag: tag.to_string(),
                    heads,
                    n_q: nq,
                    n_k: nk,
                    probs: probs.clone(),
                });
            }
        }
        let mut overridden = false;
        if let Some(tag) = tag {
            if let Some(ov) = self.overrides.get(tag) {
                if ov.heads != heads || ov.n_q != nq || ov.n_k != nk {
                    return Err(Error::shape("attention", "override map shape mismatch".to_string()));
                }
                for h in 0..heads {
                    for i in 0..nq {
                        for &(ec, oc) in &ov.column_map {
                            probs[h * nq * nk + i * nk + ec] = ov.probs[h * nq * nk + i * nk + oc];
                        }
                    }
                }
                overridden = true;
            }
        }
        let vs = self.nodes[v.0].value.data();
        let mut out = vec![0.0f32; heads * nq * dv];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            let vh = &vs[h * nk * dv..(h + 1) * nk * dv];
            let o = mat_mul(p, vh, nq, nk, dv);
            out[h * nq * dv..(h + 1) * nq * dv].copy_from_slice(&o);
        }
        self.push(
            Op::Attention { scale, probs, overridden },
            vec![q.0, k.0, v.0],
            Tensor::raw(vec![heads, nq, dv], out),
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss to every participating node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lnode = &self.nodes[loss.0];
        if !lnode.value.is_scalar() {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be scalar, got shape {:?}",
                lnode.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name().into(), phase: "backward" });
            }
            self.backprop_node(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], idx: usize, contrib: &[f32]) {
        match &mut grads[idx] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => grads[idx] = Some(contrib.to_vec()),
        }
    }

    fn accumulate_if_needed(&self, grads: &mut [Option<Vec<f32>>], idx: usize, contrib: Vec<f32>) {
        if self.nodes[idx].needs_grad {
            match &mut grads[idx] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                None => grads[idx] = Some(contrib),
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut Vec<Option<Vec<f32>>>) -> Result<()> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.accumulate_if_needed(grads, ins[0], g.to_vec());
                self.accumulate_if_needed(grads, ins[1], g.to_vec());
            }
            Op::Sub => {
                self.accumulate_if_needed(grads, ins[0], g.to_vec());
                self.accumulate_if_needed(grads, ins[1], g.iter().map(|v| -v).collect());
            }
            Op::Mul => {
                let a = self.nodes[ins[0]].value.data();
                let b = self.nodes[ins[1]].value.data();
                self.accumulate_if_needed(grads, ins[0], g.iter().zip(b).map(|(x, y)| x * y).collect());
                self.accumulate_if_needed(grads, ins[1], g.iter().zip(a).map(|(x, y)| x * y).collect());
            }
            Op::Scale(c) => {
                self.accumulate_if_needed(grads, ins[0], g.iter().map(|v| v * c).collect());
            }
            Op::Matmul { m, k, n } => {
                let a = self.nodes[ins[0]].value.data();
                let b = self.nodes[ins[1]].value.data();
                if self.nodes[ins[0]].needs_grad {
                    // dA = g @ B^T
                    let da = mat_mul_nt(g, b, *m, *n, *k);
                    Self::accumulate(grads, ins[0], &da);
                }
                if self.nodes[ins[1]].needs_grad {
                    // dB = A^T @ g
                    let db = mat_mul_tn(a, g, *k, *m, *n);
                    Self::accumulate(grads, ins[1], &db);
                }
            }
            Op::MatmulNt { m, k, n } => {
                // out = A[m,k] @ B[n,k]^T
                let a = self.nodes[ins[0]].value.data();
                let b = self.nodes[ins[1]].value.data();
                if self.nodes[ins[0]].needs_grad {
                    // dA = g[m,n] @ B[n,k]
                    let da = mat_mul(g, b, *m, *n, *k);
                    Self::accumulate(grads, ins[0], &da);
                }
                if self.nodes[ins[1]].needs_grad {
                    // dB = g^T[n,m] @ A[m,k]
                    let db = mat_mul_tn(g, a, *n, *m, *k);
                    Self::accumulate(grads, ins[1], &db);
                }
            }
            Op::Conv2d { stride, pad } => {
                let sx = self.nodes[ins[0]].value.shape();
                let sw = self.nodes[ins[1]].value.shape();
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let hout = (h + 2 * pad - kh) / stride + 1;
                let wout = (w + 2 * pad - kw) / stride + 1;
                let q = cin * kh * kw;
                let p = hout * wout;
                if self.nodes[ins[1]].needs_grad {
                    let cols =
                        im2col(self.nodes[ins[0]].value.data(), cin, h, w, kh, kw, *stride, *pad, hout, wout);
                    // dW = g[cout,p] @ cols[q,p]^T
                    let dw = mat_mul_nt(g, &cols, cout, p, q);
                    Self::accumulate(grads, ins[1], &dw);
                }
                if self.nodes[ins[0]].needs_grad {
                    // dcols = W^T[q,cout] @ g[cout,p]
                    let dcols = mat_mul_tn(self.nodes[ins[1]].value.data(), g, q, cout, p);
                    let dx = col2im(&dcols, cin, h, w, kh, kw, *stride, *pad, hout, wout);
                    Self::accumulate(grads, ins[0], &dx);
                }
            }
            Op::AddChanBias => {
                let sx = self.nodes[ins[0]].value.shape();
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                self.accumulate_if_needed(grads, ins[0], g.to_vec());
                if self.nodes[ins[1]].needs_grad {
                    let mut db = vec![0.0f32; c];
                    for ci in 0..c {
                        db[ci] = g[ci * hw..(ci + 1) * hw].iter().sum();
                    }
                    Self::accumulate(grads, ins[1], &db);
                }
            }
            Op::AddRowBias => {
                let sx = self.nodes[ins[0]].value.shape();
                let (n, d) = (sx[0], sx[1]);
                self.accumulate_if_needed(grads, ins[0], g.to_vec());
                if self.nodes[ins[1]].needs_grad {
                    let mut db = vec![0.0f32; d];
                    for r in 0..n {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    Self::accumulate(grads, ins[1], &db);
                }
            }
            Op::GroupNorm { groups, stats, .. } => {
                let sx = self.nodes[ins[0]].value.shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let cpg = c / groups;
                let gsize = (cpg * h * w) as f32;
                let xs = self.nodes[ins[0]].value.data();
                let gammas = self.nodes[ins[1]].value.data();
                let mut dx = vec![0.0f32; xs.len()];
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for grp in 0..*groups {
                    let (mean, istd) = stats[grp];
                    let lo = grp * cpg * h * w;
                    let hi = lo + cpg * h * w;
                    let mut sum_u = 0.0f32;
                    let mut sum_ux = 0.0f32;
                    for i in lo..hi {
                        let ch = i / (h * w);
                        let xhat = (xs[i] - mean) * istd;
                        let u = g[i] * gammas[ch];
                        sum_u += u;
                        sum_ux += u * xhat;
                        dgamma[ch] += g[i] * xhat;
                        dbeta[ch] += g[i];
                    }
                    let mu = sum_u / gsize;
                    let mux = sum_ux / gsize;
                    for i in lo..hi {
                        let ch = i / (h * w);
                        let xhat = (xs[i] - mean) * istd;
                        dx[i] = istd * (g[i] * gammas[ch] - mu - xhat * mux);
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
                self.accumulate_if_needed(grads, ins[1], dgamma);
                self.accumulate_if_needed(grads, ins[2], dbeta);
            }
            Op::LayerNormRows { stats, .. } => {
                let sx = self.nodes[ins[0]].value.shape();
                let (n, d) = (sx[0], sx[1]);
                let xs = self.nodes[ins[0]].value.data();
                let gammas = self.nodes[ins[1]].value.data();
                let mut dx = vec![0.0f32; xs.len()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for r in 0..n {
                    let (mean, istd) = stats[r];
                    let mut sum_u = 0.0f32;
                    let mut sum_ux = 0.0f32;
                    for j in 0..d {
                        let i = r * d + j;
                        let xhat = (xs[i] - mean) * istd;
                        let u = g[i] * gammas[j];
                        sum_u += u;
                        sum_ux += u * xhat;
                        dgamma[j] += g[i] * xhat;
                        dbeta[j] += g[i];
                    }
                    let mu = sum_u / d as f32;
                    let mux = sum_ux / d as f32;
                    for j in 0..d {
                        let i = r * d + j;
                        let xhat = (xs[i] - mean) * istd;
                        dx[i] = istd * (g[i] * gammas[j] - mu - xhat * mux);
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
                self.accumulate_if_needed(grads, ins[1], dgamma);
                self.accumulate_if_needed(grads, ins[2], dbeta);
            }
            Op::SoftmaxRows => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Silu => {
                let xs = self.nodes[ins[0]].value.data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Gelu => {
                let xs = self.nodes[ins[0]].value.data();
                let dx = g.iter().zip(xs).map(|(gv, &x)| gv * gelu_deriv(x)).collect();
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Sigmoid => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Softplus => {
                let xs = self.nodes[ins[0]].value.data();
                let dx = g.iter().zip(xs).map(|(gv, &x)| gv * sigmoid(x)).collect();
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Reshape => {
                self.accumulate_if_needed(grads, ins[0], g.to_vec());
            }
            Op::Sum => {
                let n = self.nodes[ins[0]].value.numel();
                self.accumulate_if_needed(grads, ins[0], vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.nodes[ins[0]].value.numel();
                self.accumulate_if_needed(grads, ins[0], vec![g[0] / n as f32; n]);
            }
            Op::MeanRows => {
                let sx = self.nodes[ins[0]].value.shape();
                let (n, d) = (sx[0], sx[1]);
                let mut dx = vec![0.0f32; n * d];
                for r in 0..n {
                    for j in 0..d {
                        dx[r * d + j] = g[j] / n as f32;
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::GlobalAvgPool => {
                let sx = self.nodes[ins[0]].value.shape();
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                let mut dx = vec![0.0f32; c * hw];
                for ci in 0..c {
                    let gv = g[ci] / hw as f32;
                    for p in 0..hw {
                        dx[ci * hw + p] = gv;
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::AvgPool2 => {
                let sx = self.nodes[ins[0]].value.shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = g[ci * ho * wo + i * wo + j] * 0.25;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    dx[ci * h * w + (2 * i + di) * w + 2 * j + dj] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Upsample2 => {
                let sx = self.nodes[ins[0]].value.shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (ho, wo) = (h * 2, w * 2);
                let mut dx = vec![0.0f32; c * h * w];
                for ci in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[ci * h * w + (i / 2) * w + j / 2] += g[ci * ho * wo + i * wo + j];
                        }
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::ConcatChan => {
                let na = self.nodes[ins[0]].value.numel();
                self.accumulate_if_needed(grads, ins[0], g[..na].to_vec());
                self.accumulate_if_needed(grads, ins[1], g[na..].to_vec());
            }
            Op::StackRows => {
                let d = self.nodes[ins[0]].value.numel();
                for (r, &i) in ins.iter().enumerate() {
                    self.accumulate_if_needed(grads, i, g[r * d..(r + 1) * d].to_vec());
                }
            }
            Op::SplitHeads { heads } => {
                let sx = self.nodes[ins[0]].value.shape();
                let (n, hd) = (sx[0], sx[1]);
                let d = hd / heads;
                let mut dx = vec![0.0f32; n * hd];
                for h in 0..*heads {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * hd + h * d + j] = g[h * n * d + i * d + j];
                        }
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::MergeHeads => {
                let sx = self.nodes[ins[0]].value.shape();
                let (heads, n, d) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0f32; heads * n * d];
                for h in 0..heads {
                    for i in 0..n {
                        for j in 0..d {
                            dx[h * n * d + i * d + j] = g[i * heads * d + h * d + j];
                        }
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::Gather { ids } => {
                let st = self.nodes[ins[0]].value.shape();
                let (v, d) = (st[0], st[1]);
                let mut dt = vec![0.0f32; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dt);
            }
            Op::L2NormalizeRows { norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..norms.len() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dx);
            }
            Op::CrossEntropyRows { targets, probs } => {
                let n = targets.len();
                let m = probs.len() / n;
                let mut dl = vec![0.0f32; probs.len()];
                let gv = g[0] / n as f32;
                for r in 0..n {
                    for j in 0..m {
                        let ind = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * m + j] = (probs[r * m + j] - ind) * gv;
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dl);
            }
            Op::Attention { scale, probs, overridden } => {
                if *overridden {
                    return Err(Error::InvalidArg(
                        "backward through an overridden attention node".into(),
                    ));
                }
                let sq = self.nodes[ins[0]].value.shape();
                let sv = self.nodes[ins[2]].value.shape();
                let (heads, nq, d) = (sq[0], sq[1], sq[2]);
                let (nk, dv) = (sv[1], sv[2]);
                let qs = self.nodes[ins[0]].value.data();
                let ks = self.nodes[ins[1]].value.data();
                let vs = self.nodes[ins[2]].value.data();
                let mut dq = vec![0.0f32; qs.len()];
                let mut dk = vec![0.0f32; ks.len()];
                let mut dvv = vec![0.0f32; vs.len()];
                for h in 0..heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let gh = &g[h * nq * dv..(h + 1) * nq * dv];
                    let vh = &vs[h * nk * dv..(h + 1) * nk * dv];
                    // dV += P^T @ g
                    let dvh = mat_mul_tn(p, gh, nk, nq, dv);
                    for (a, b) in dvv[h * nk * dv..(h + 1) * nk * dv].iter_mut().zip(&dvh) {
                        *a += b;
                    }
                    // dP = g @ V^T
                    let dp = mat_mul_nt(gh, vh, nq, dv, nk);
                    // dS = softmax backward rows of P
                    let mut ds = vec![0.0f32; nq * nk];
                    for i in 0..nq {
                        let pr = &p[i * nk..(i + 1) * nk];
                        let dpr = &dp[i * nk..(i + 1) * nk];
                        let dot: f32 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                        for j in 0..nk {
                            ds[i * nk + j] = pr[j] * (dpr[j] - dot) * scale;
                        }
                    }
                    // dQ = dS @ K ; dK = dS^T @ Q
                    let qh = &qs[h * nq * d..(h + 1) * nq * d];
                    let kh = &ks[h * nk * d..(h + 1) * nk * d];
                    let dqh = mat_mul(&ds, kh, nq, nk, d);
                    for (a, b) in dq[h * nq * d..(h + 1) * nq * d].iter_mut().zip(&dqh) {
                        *a += b;
                    }
                    let dkh = mat_mul_tn(&ds, qh, nk, nq, d);
                    for (a, b) in dk[h * nk * d..(h + 1) * nk * d].iter_mut().zip(&dkh) {
                        *a += b;
                    }
                }
                self.accumulate_if_needed(grads, ins[0], dq);
                self.accumulate_if_needed(grads, ins[1], dk);
                self.accumulate_if_needed(grads, ins[2], dvv);
            }
        }
        Ok(())
    }

    // ---- composed helpers ----

    /// mean((a - b)^2)
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// a[m,k] @ b[k,n]
pub(crate) fn mat_mul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// a[m,k] @ b[n,k]^T
fn mat_mul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// a[k,m]^T @ b[k,n] -> [m,n]  (a stored as [k,m]... note: first dim of result)
/// Computes out[m,n] = sum_p a[p*m + i] * b[p*n + j] where a is [k_rows, m].
fn mat_mul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    // a: [k, m], b: [k, n], out: [m, n]
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f32> {
    let mut cols = vec![0.0f32; cin * kh * kw * hout * wout];
    let p = hout * wout;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let q = (c * kh + ki) * kw + kj;
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wout {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[q * p + oi * wout + oj] = x[c * h * w + ii as usize * w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; cin * h * w];
    let p = hout * wout;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let q = (c * kh + ki) * kw + kj;
                for oi in 0..hout {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wout {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[c * h * w + ii as usize * w + jj as usize] += dcols[q * p + oi * wout + oj];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]), true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_participating_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2]), true).unwrap();
        let y = tape.leaf(&Tensor::zeros(vec![2]), true).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(y, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_accumulation_is_linear() {
        // grad of (f+g) == grad(f) + grad(g)
        let data = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let run = |mode: u8| -> Vec<f32> {
            let mut tape = Tape::new();
            let x = tape.leaf(&data, true).unwrap();
            let f = tape.sum(x).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let g = tape.mean(sq).unwrap();
            let loss = match mode {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().to_vec()
        };
        let (gf, gg, gfg) = (run(0), run(1), run(2));
        for i in 0..4 {
            assert!((gfg[i] - (gf[i] + gg[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap(), false)
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        for r in 0..2 {
            let s: f32 = out[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_known_values() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(&Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let b = tape
            .leaf(&Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap(), false)
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn attention_capture_does_not_perturb_output() {
        let mut rng = crate::numerics::rng(7);
        let q = Tensor::randn(vec![2, 4, 8], 1.0, &mut rng);
        let k = Tensor::randn(vec![2, 5, 8], 1.0, &mut rng);
        let v = Tensor::randn(vec![2, 5, 8], 1.0, &mut rng);
        let run = |capture: bool| -> Vec<f32> {
            let mut tape = Tape::new();
            tape.enable_capture(capture);
            let qv = tape.leaf(&q, false).unwrap();
            let kv = tape.leaf(&k, false).unwrap();
            let vv = tape.leaf(&v, false).unwrap();
            let o = tape.attention(qv, kv, vv, Some("x")).unwrap();
            tape.value(o).data().to_vec()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn nan_input_fails_fast_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2], 1e30), false).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "mul"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    use crate::Error;
}
