//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a [`Node`] holding its output
//! value and the [`Op`] that produced it. Inputs always precede outputs on
//! the tape, so [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    TransposeLast2,
    SwapAxes01,
    Reshape,
    Softmax,
    LayerNorm,
    Gelu,
    Relu,
    Embedding,
    Conv2d,
    Upsample2x,
    CrossEntropy,
    ConcatRows,
    SliceLast,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::TransposeLast2,
        OpKind::SwapAxes01,
        OpKind::Reshape,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Embedding,
        OpKind::Conv2d,
        OpKind::Upsample2x,
        OpKind::CrossEntropy,
        OpKind::ConcatRows,
        OpKind::SliceLast,
        OpKind::Sum,
        OpKind::Mean,
    ];

    /// Snake-case name, e.g. `layer_norm`.
    pub fn name(self) -> String {
        let mut out = String::new();
        for (i, c) in format!("{self:?}").chars().enumerate() {
            if c.is_ascii_uppercase() && i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        }
        out
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    TransposeLast2(Var),
    SwapAxes01(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::TransposeLast2(_) => OpKind::TransposeLast2,
            Op::SwapAxes01(_) => OpKind::SwapAxes01,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Confined to one worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    fault: Option<OpKind>,
}

/// C = A·B over row-major buffers; `ta`/`tb` read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the row-major buffers, whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    // x - x is 0 for finite x and NaN otherwise; the sum vectorizes
    if values.iter().map(|v| v - v).sum::<f64>() == 0.0 {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `small` broadcasts over `big` when it equals a trailing suffix of it.
fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < k {
        return None;
    }
    Some((size + 2 * pad - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if y >= 0 && xx >= 0 && (y as usize) < self.h && (xx as usize) < self.w {
                                x[(c * self.h + y as usize) * self.w + xx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && (xx as usize) < self.w {
                                dx[(c * self.h + y as usize) * self.w + xx as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Negates the upstream gradient of every node of `kind` during backward.
    /// Exists so the gradient checker can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone()).expect("node shape is consistent")
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, shape, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t.data().to_vec(), t.shape().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {} values", data.len())));
        }
        self.push("constant", data, shape.to_vec(), Op::Leaf, false)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_broadcast(sa, sb) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} and {sb:?}")))
        }
    }

    /// a + b, where b may broadcast over a's leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        if !bv.is_empty() {
            for chunk in out.chunks_mut(bv.len()) {
                chunk.iter_mut().zip(bv).for_each(|(o, x)| *o += x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("add", out, shape, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        if !bv.is_empty() {
            for chunk in out.chunks_mut(bv.len()) {
                chunk.iter_mut().zip(bv).for_each(|(o, x)| *o -= x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("sub", out, shape, Op::Sub(a, b), rg)
    }

    /// Elementwise product, b may broadcast over a's leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        if !bv.is_empty() {
            for chunk in out.chunks_mut(bv.len()) {
                chunk.iter_mut().zip(bv).for_each(|(o, x)| *o *= x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", out, shape, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("scale", out, shape, Op::Scale(a, c), rg)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Either operand may be
    /// rank 2, in which case it is shared across the other's batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be at least rank 2: {sa:?}, {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(Error::shape("matmul", format!("batch axes not broadcastable: {sa:?} x {sb:?}")));
        };
        let batch = numel(&batch_shape);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                let ai = if ba.is_empty() { 0 } else { i };
                let bi = if bb.is_empty() { 0 } else { i };
                gemm(
                    m,
                    k,
                    n,
                    &av[ai * m * k..(ai + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, shape, Op::MatMul(a, b), rg)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose_last2", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        for bi in 0..batch {
            let src = &av[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(a);
        self.push("transpose_last2", out, shape, Op::TransposeLast2(a), rg)
    }

    /// `[p, q, r] -> [q, p, r]`.
    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("swap_axes01", format!("expected rank 3, got {s:?}")));
        }
        let (p, q, r) = (s[0], s[1], s[2]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        for i in 0..p {
            for j in 0..q {
                out[(j * p + i) * r..(j * p + i + 1) * r].copy_from_slice(&av[(i * q + j) * r..(i * q + j + 1) * r]);
            }
        }
        let rg = self.rg(a);
        self.push("swap_axes01", out, vec![q, p, r], Op::SwapAxes01(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push("reshape", out, shape.to_vec(), Op::Reshape(a), rg)
    }

    /// Softmax over the last axis. With `causal`, entry (i, j) of each
    /// trailing matrix is forced to exactly zero when `j > i + (cols - rows)`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("softmax", "rank 0 input"));
        }
        let cols = s[s.len() - 1];
        let rows_per = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        if cols > 0 {
            for (r, (src, dst)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                let visible = if causal {
                    let i = r % rows_per.max(1);
                    (i + 1 + cols.saturating_sub(rows_per)).min(cols)
                } else {
                    cols
                };
                let max = src[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..visible {
                    let e = (src[j] - max).exp();
                    dst[j] = e;
                    sum += e;
                }
                for v in &mut dst[..visible] {
                    *v /= sum;
                }
            }
        }
        let rg = self.rg(x);
        self.push("softmax", out, s, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {s:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push("layer_norm", out, s, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        let s = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("gelu", out, s, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let s = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("relu", out, s, Op::Relu(x), rg)
    }

    /// Row gather: `table[V, d]`, ids -> `[n, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IdOutOfRange { id: bad, size: v });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push("embedding", out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Cross-correlation of `x[B, C, H, W]` with `w[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (g, b, o) = self.conv_geom(x, w, bias, stride, pad)?;
        let hw = g.ho * g.wo;
        let kdim = g.c * g.kh * g.kw;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = vec![0.0; b * o * hw];
        let mut cols = vec![0.0; kdim * hw];
        for bi in 0..b {
            g.im2col(&xv[bi * g.c * g.h * g.w..(bi + 1) * g.c * g.h * g.w], &mut cols);
            gemm(o, kdim, hw, wv, false, &cols, false, &mut out[bi * o * hw..(bi + 1) * o * hw], false);
        }
        if let Some(bias) = bias {
            let bv = &self.nodes[bias.0].value;
            for bi in 0..b {
                for oc in 0..o {
                    let base = (bi * o + oc) * hw;
                    out[base..base + hw].iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|v| self.rg(v));
        self.push("conv2d", out, vec![b, o, g.ho, g.wo], Op::Conv2d { x, w, bias, stride, pad }, rg)
    }

    fn conv_geom(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<(ConvGeom, usize, usize)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernels {sw:?}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} kernels", self.shape(bv), sw[0])));
            }
        }
        let (ho, wo) = match (conv_out(sx[2], sw[2], stride, pad), conv_out(sx[3], sw[3], stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {sx:?} incompatible with kernel {sw:?}, stride {stride}, pad {pad}"),
                ))
            }
        };
        let g = ConvGeom { c: sx[1], h: sx[2], w: sx[3], kh: sw[2], kw: sw[3], ho, wo, stride, pad };
        Ok((g, sx[0], sw[0]))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push("upsample2x", out, vec![s[0], s[1], 2 * h, 2 * w], Op::Upsample2x(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IdOutOfRange { id: bad, size: v });
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[targets[r]];
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            vec![loss],
            vec![],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Concatenation along axis 0; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", out, shape, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `x[..., start..end]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::shape("slice_last", "rank 0 input"))?;
        if start > end || end > cols {
            return Err(Error::shape("slice_last", format!("range {start}..{end} of {cols}")));
        }
        let xv = &self.nodes[x.0].value;
        let width = end - start;
        let mut out = Vec::with_capacity(xv.len() / cols.max(1) * width);
        if cols > 0 {
            for row in xv.chunks(cols) {
                out.extend_from_slice(&row[start..end]);
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        let rg = self.rg(x);
        self.push("slice_last", out, shape, Op::SliceLast { x, start }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push("sum", vec![v], vec![], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let v = xv.iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push("mean", vec![v], vec![], Op::Mean(x), rg)
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. The tape may be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.nodes[loss.0].shape.is_empty() {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let len_of = |v: Var| nodes[v.0].value.len();
        let wants = |v: Var| nodes[v.0].requires_grad;
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    slot(grads, *a, len_of(*a)).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if wants(*b) {
                    let n = len_of(*b);
                    let db = slot(grads, *b, n);
                    if n > 0 {
                        for chunk in g.chunks(n) {
                            db.iter_mut().zip(chunk).for_each(|(d, x)| *d += sign * x);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let n = bv.len();
                if wants(*a) {
                    let da = slot(grads, *a, av.len());
                    if n > 0 {
                        for (dc, gc) in da.chunks_mut(n).zip(g.chunks(n)) {
                            for j in 0..n {
                                dc[j] += gc[j] * bv[j];
                            }
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, n);
                    if n > 0 {
                        for (ac, gc) in av.chunks(n).zip(g.chunks(n)) {
                            for j in 0..n {
                                db[j] += gc[j] * ac[j];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    slot(grads, *a, len_of(*a)).iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let a_shared = sa.len() == 2 && sb.len() > 2;
                let b_shared = sb.len() == 2 && sa.len() > 2;
                let batch = numel(&node.shape[..node.shape.len() - 2]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let da = slot(grads, *a, av.len());
                    for bi in 0..batch {
                        let ai = if a_shared { 0 } else { bi };
                        let bj = if b_shared { 0 } else { bi };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv[bj * k * n..(bj + 1) * k * n],
                            true,
                            &mut da[ai * m * k..(ai + 1) * m * k],
                            true,
                        );
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, bv.len());
                    for bi in 0..batch {
                        let ai = if a_shared { 0 } else { bi };
                        let bj = if b_shared { 0 } else { bi };
                        gemm(
                            k,
                            m,
                            n,
                            &av[ai * m * k..(ai + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut db[bj * k * n..(bj + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::TransposeLast2(a) => {
                if wants(*a) {
                    let s = &nodes[a.0].shape;
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let da = slot(grads, *a, len_of(*a));
                    let batch = numel(&s[..s.len() - 2]);
                    for bi in 0..batch {
                        let off = bi * r * c;
                        for i2 in 0..r {
                            for j in 0..c {
                                da[off + i2 * c + j] += g[off + j * r + i2];
                            }
                        }
                    }
                }
            }
            Op::SwapAxes01(a) => {
                if wants(*a) {
                    let s = &nodes[a.0].shape;
                    let (p, q, r) = (s[0], s[1], s[2]);
                    let da = slot(grads, *a, len_of(*a));
                    for i2 in 0..p {
                        for j in 0..q {
                            for t in 0..r {
                                da[(i2 * q + j) * r + t] += g[(j * p + i2) * r + t];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    slot(grads, *a, len_of(*a)).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let cols = *node.shape.last().unwrap();
                    let dx = slot(grads, *x, y.len());
                    if cols > 0 {
                        for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for (xr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let db = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, *x, xhat.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let dx = slot(grads, *x, xv.len());
                    for j in 0..xv.len() {
                        dx[j] += g[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let dx = slot(grads, *x, xv.len());
                    for j in 0..xv.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.0].shape[1];
                    let dt = slot(grads, *table, len_of(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let (geom, b, o) = self.conv_geom(*x, *w, *bias, *stride, *pad).expect("validated in forward");
                let hw = geom.ho * geom.wo;
                let kdim = geom.c * geom.kh * geom.kw;
                let plane = geom.c * geom.h * geom.w;
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if let Some(bv) = bias {
                    if wants(*bv) {
                        let db = slot(grads, *bv, o);
                        for bi in 0..b {
                            for oc in 0..o {
                                let base = (bi * o + oc) * hw;
                                db[oc] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let mut cols = vec![0.0; kdim * hw];
                if wants(*w) {
                    let dw = slot(grads, *w, wv.len());
                    for bi in 0..b {
                        geom.im2col(&xv[bi * plane..(bi + 1) * plane], &mut cols);
                        gemm(o, hw, kdim, &g[bi * o * hw..(bi + 1) * o * hw], false, &cols, true, dw, true);
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, *x, xv.len());
                    for bi in 0..b {
                        gemm(kdim, o, hw, wv, true, &g[bi * o * hw..(bi + 1) * o * hw], false, &mut cols, false);
                        geom.col2im(&cols, &mut dx[bi * plane..(bi + 1) * plane]);
                    }
                }
            }
            Op::Upsample2x(x) => {
                if wants(*x) {
                    let s = &nodes[x.0].shape;
                    let (h, w) = (s[2], s[3]);
                    let dx = slot(grads, *x, len_of(*x));
                    for p in 0..s[0] * s[1] {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let n = targets.len();
                    let v = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len_of(*p);
                    if wants(*p) {
                        slot(grads, *p, n).iter_mut().zip(&g[off..off + n]).for_each(|(d, x)| *d += x);
                    }
                    off += n;
                }
            }
            Op::SliceLast { x, start } => {
                if wants(*x) {
                    let cols = *nodes[x.0].shape.last().unwrap();
                    let width = *node.shape.last().unwrap();
                    let dx = slot(grads, *x, len_of(*x));
                    if width > 0 {
                        for (r, gr) in g.chunks(width).enumerate() {
                            for j in 0..width {
                                dx[r * cols + start + j] += gr[j];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    slot(grads, *x, len_of(*x)).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = len_of(*x);
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0] / n as f64);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0])).unwrap();
        let eye = tape.constant(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), tape.value(a));

        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(&t(&[2, 1], &[1.0, 1.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        let a = tape.constant(&Tensor::zeros(&[2, 2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[4, 3, 1])).unwrap();
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_grad_of_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let r = finite_diff_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                t.sum(c)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
        let r = finite_diff_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let c = t.mul(c, v[2])?;
                t.sum(c)
            },
            &[a, b, w],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(&Tensor::full(&[3], 1.0)).unwrap();
        let b = tape.constant(&Tensor::zeros(&[3])).unwrap();
        let c = tape.constant(&Tensor::full(&[1, 3], 4.2)).unwrap();
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));

        let x = tape.constant(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (got, want) in tape.value(y).iter().zip(expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);

        let l = tape.constant(&t(&[1, 3], &[800.0, 0.0, -5.0])).unwrap();
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(tape.scalar(loss) < 1e-300);

        let l = tape.constant(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert!(matches!(tape.softmax_cross_entropy(l, &[2]), Err(Error::IdOutOfRange { id: 2, size: 2 })));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.param(&t(&[2, 3], &[0.1, 0.7, -0.3, 2.0, 0.0, 1.0])).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[1, 2]).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(logits).unwrap().to_vec();
        let mut t2 = Tape::new();
        let l2 = t2.constant(&t(&[2, 3], &[0.1, 0.7, -0.3, 2.0, 0.0, 1.0])).unwrap();
        let p = t2.softmax(l2, false).unwrap();
        let probs = t2.value(p);
        for r in 0..2 {
            for j in 0..3 {
                let onehot = if j == [1, 2][r] { 1.0 } else { 0.0 };
                let want = (probs[r * 3 + j] - onehot) / 2.0;
                assert!((grad[r * 3 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        // 1x1 kernels mapping channel c -> c with weight 1
        let w = tape.constant(&t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), x.data());

        let x4 = tape.constant(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let k2 = tape.constant(&Tensor::zeros(&[3, 1, 2, 2])).unwrap();
        let y = tape.conv2d(x4, k2, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 2, 2]);

        let k5 = tape.constant(&Tensor::zeros(&[1, 1, 5, 5])).unwrap();
        assert!(tape.conv2d(x4, k5, None, 1, 0).is_err());
    }

    #[test]
    fn conv_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let proj = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
        let r = finite_diff_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let y = t.mul(y, v[3])?;
                t.sum(y)
            },
            &[x, w, b, proj],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let table = Tensor::from_fn(&[5, 3], |i| i as f64);
        let mut tape = Tape::new();
        let tv = tape.param(&table).unwrap();
        let rows = tape.embedding(tv, &[2, 2, 4]).unwrap();
        assert_eq!(&tape.value(rows)[..3], table.row(2));
        let s = tape.sum(rows).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(tv).unwrap();
        assert_eq!(&g[6..9], &[2.0, 2.0, 2.0]);
        assert_eq!(&g[12..15], &[1.0, 1.0, 1.0]);
        assert_eq!(&g[0..3], &[0.0, 0.0, 0.0]);
        assert!(matches!(tape.embedding(tv, &[5]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::full(&[2, 2], 3.0)).unwrap();
        let unused = tape.param(&Tensor::full(&[2], 1.0)).unwrap();
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        assert!(tape.grad(unused).is_none());
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(&[3, 3], |i| i as f64 * 0.1)).unwrap();
        let p = tape.softmax(x, true).unwrap();
        let v = tape.value(p);
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_values_surface() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2], 1e300)).unwrap();
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn zero_size_operands() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(&[2, 3, 0])).unwrap();
        let k = tape.constant(&Tensor::zeros(&[2, 0, 4])).unwrap();
        let s = tape.matmul(q, k).unwrap();
        assert_eq!(tape.shape(s), &[2, 3, 4]);
        assert!(tape.value(s).iter().all(|v| *v == 0.0));
        let empty = tape.constant(&Tensor::zeros(&[1, 0])).unwrap();
        let p = tape.softmax(empty, false).unwrap();
        assert_eq!(tape.shape(p), &[1, 0]);
    }
}
