//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes once, in reverse execution order,
//! accumulating adjoints. Parameters enter the tape through
//! [`Tape::param`], which remembers the [`ParamId`] so that
//! [`Grads::param_grads`] can route gradients back to the store.
//!
//! A tape is single-threaded; independent samples use independent tapes.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for [`Tape::custom`]: `(inputs, output, upstream) -> input adjoints`.
pub type CustomBackward = Arc<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    LeakyRelu { x: Var, slope: f64 },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    SegmentSoftmax { x: Var, segments: Arc<Vec<usize>> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { x: Var },
    MeanRows { x: Var },
    Reshape { x: Var },
    Gather { x: Var, index: Arc<Vec<usize>> },
    IndexAdd { x: Var, index: Arc<Vec<usize>> },
    MulRows { x: Var, scale: Var },
    ConcatCols { parts: Vec<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, g: ConvGeometry },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Grads {
    /// Adjoint of `v`, if the loss depends on it.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients in store order. Parameters that appear on the
    /// tape more than once receive the sum of their adjoints; unreachable
    /// parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.zeros_like();
        for (node, pid) in self.params.iter().enumerate() {
            let (Some(pid), Some(g)) = (pid, &self.grads[node]) else {
                continue;
            };
            for (dst, src) in out[pid.index()].data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
        out
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn shape_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient but is not tied to a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Records a parameter by name.
    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        Ok(self.param(store, id))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, needs))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// `x[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let cols = *sx.last().unwrap_or(&1);
        if sx.len() != 2 || self.value(bias).numel() != cols {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// `x` where positive, `slope·x` otherwise. The derivative at exactly
    /// zero is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope >= 0.0) {
            return Err(Error::config(format!("leaky_relu slope must be >= 0, got {slope}")));
        }
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        Ok(self.push(value, Op::LeakyRelu { x, slope }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0).expect("slope 0 is valid")
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, len, inner) = shape_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, needs))
    }

    /// Softmax over groups of elements of a flat vector: element `i` belongs to
    /// group `segments[i]`.
    pub fn segment_softmax(&mut self, x: Var, segments: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(x).data();
        if segments.len() != src.len() {
            return Err(Error::shape("segment_softmax", self.shape(x), &[segments.len()]));
        }
        let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&s, &v) in segments.iter().zip(src) {
            max[s] = max[s].max(v);
        }
        let mut out: Vec<f64> = segments.iter().zip(src).map(|(&s, &v)| (v - max[s]).exp()).collect();
        let mut total = vec![0.0; groups];
        for (&s, &e) in segments.iter().zip(&out) {
            total[s] += e;
        }
        for (&s, o) in segments.iter().zip(out.iter_mut()) {
            *o /= total[s];
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SegmentSoftmax { x, segments }, needs))
    }

    /// Row-wise layer normalization of `x[rows×d]` with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        let d = sx[1];
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(sx[0] * d);
        let mut rstd = Vec::with_capacity(sx[0]);
        let mut out = Vec::with_capacity(sx[0] * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    /// Mean over the rows of `x[n×d]`, giving `[1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::contract(format!("mean_rows expects a matrix, got {sx:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Tensor::new(vec![1, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MeanRows { x }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gather { x, index }, needs))
    }

    /// `out.flat[index[i]] += x.flat[i]` into a zero tensor of `shape`.
    pub fn index_add(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let numel: usize = shape.iter().product();
        if index.len() != src.len() || index.iter().any(|&i| i >= numel) {
            return Err(Error::shape("index_add", self.shape(x), shape));
        }
        let mut out = vec![0.0; numel];
        for (&i, &v) in index.iter().zip(src) {
            out[i] += v;
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::IndexAdd { x, index }, needs))
    }

    /// Scales row `r` of `x[rows×c]` by `scale[r]`.
    pub fn mul_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.value(scale).numel() != sx[0] {
            return Err(Error::shape("mul_rows", &sx, self.shape(scale)));
        }
        let c = sx[1];
        let s = self.value(scale).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .zip(s)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let value = Tensor::new(sx, data)?;
        let needs = self.needs(x) || self.needs(scale);
        Ok(self.push(value, Op::MulRows { x, scale }, needs))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero parts"))?;
        let rows = self.shape(*first)[0];
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, needs))
    }

    /// 2-D cross-correlation of `x[Cin×H×W]` with `w[Cout×Cin×k×k]`, plus an
    /// optional per-channel bias `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (cin, h, wd, cout, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(Error::config(format!(
                "conv2d kernel {k} exceeds padded input {}x{} (padding {padding})",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (wd + 2 * padding - k) / stride + 1;
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let g = ConvGeometry { cin, h, w: wd, cout, k, stride, padding, ho, wo };
        let mut out = vec![0.0; cout * ho * wo];
        conv_forward(self.value(x).data(), self.value(w).data(), &mut out, &g);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, needs))
    }

    /// Mean cross-entropy of `logits[B×C]` against class `labels`, computed
    /// with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / batch as f64);
        let needs = self.needs(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, needs))
    }

    /// Records an operation whose value was computed by the caller, with a
    /// caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let needs = inputs.iter().any(|v| self.needs(*v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, needs)
    }

    // ---- composite helpers -------------------------------------------------

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose expects a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let index: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, Arc::new(index), &[c, r])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::contract(format!("slice_cols {start}+{len} out of range for {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let index: Vec<usize> = (0..r).flat_map(|i| (start..start + len).map(move |j| i * c + j)).collect();
        self.gather(x, Arc::new(index), &[r, len])
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("gather_rows expects a matrix, got {s:?}")));
        }
        let c = s[1];
        let index: Vec<usize> = rows.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
        self.gather(x, Arc::new(index), &[rows.len(), c])
    }

    /// Sums rows of `x[m×c]` into `n` output rows: row `i` goes to `targets[i]`.
    pub fn scatter_add_rows(&mut self, x: Var, targets: &[usize], n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("scatter_add_rows", &s, &[targets.len()]));
        }
        let c = s[1];
        let index: Vec<usize> = targets.iter().flat_map(|&t| (0..c).map(move |j| t * c + j)).collect();
        self.index_add(x, Arc::new(index), &[n, c])
    }

    /// `x · wᵀ (+ b)` with `w` stored as `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Floating-point operations recorded so far: `2mnk` per matrix product
    /// and `2·Cout·Cin·k²·H″·W″` per convolution. Elementwise work is not
    /// counted.
    pub fn flops(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::MatMul { m, k, n, .. } => 2 * (m * k * n) as u64,
                Op::Conv2d { g, .. } => 2 * (g.cout * g.cin * g.k * g.k * g.ho * g.wo) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), contrib).expect("adjoint shape"))
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = gd[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let av = self.value(*a).data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *d += aip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, gd.to_vec());
                let cols = self.value(*bias).numel();
                let mut db = vec![0.0; cols];
                for row in gd.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                self.accumulate(grads, *bias, db);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * factor).collect());
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..*len).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                        for i in 0..*len {
                            dx[idx(i)] = y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SegmentSoftmax { x, segments } => {
                let y = node.value.data();
                let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; groups];
                for ((&s, gv), yv) in segments.iter().zip(gd).zip(y) {
                    dot[s] += gv * yv;
                }
                let dx = segments
                    .iter()
                    .zip(gd)
                    .zip(y)
                    .map(|((&s, gv), yv)| yv * (gv - dot[s]))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let grow = &gd[r * d..(r + 1) * d];
                    let xrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xrow[j];
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dx[r * d + j] = rs * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, vec![gd[0]; self.value(*x).numel()]);
            }
            Op::MeanRows { x } => {
                let s = self.shape(*x);
                let n = s[0] as f64;
                let dx = (0..s[0]).flat_map(|_| gd.iter().map(|v| v / n)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, gd.to_vec()),
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&i, v) in index.iter().zip(gd) {
                    dx[i] += v;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::IndexAdd { x, index } => {
                self.accumulate(grads, *x, index.iter().map(|&i| gd[i]).collect());
            }
            Op::MulRows { x, scale } => {
                let sv = self.value(*scale).data();
                let xv = self.value(*x).data();
                let c = self.shape(*x)[1];
                let dx = gd
                    .chunks(c)
                    .zip(sv)
                    .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
                    .collect();
                self.accumulate(grads, *x, dx);
                let ds = gd
                    .chunks(c)
                    .zip(xv.chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                self.accumulate(grads, *scale, ds);
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    let dp = (0..rows)
                        .flat_map(|r| gd[r * total + offset..r * total + offset + w].iter().copied())
                        .collect();
                    self.accumulate(grads, *p, dp);
                    offset += w;
                }
            }
            Op::Conv2d { x, w, b, g: geo } => {
                let (dx, dw) = conv_backward(self.value(*x).data(), self.value(*w).data(), gd, geo);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let db = gd.chunks(geo.ho * geo.wo).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let batch = labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * gd[0] / batch).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * classes + l] -= gd[0] / batch;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let adj = backward(&ins, &node.value, g);
                for (v, a) in inputs.iter().zip(adj) {
                    self.accumulate(grads, *v, a.into_data());
                }
            }
        }
    }
}

/// Unrolls `x` into `[Cin·k·k × Ho·Wo]`, zero where the window hits padding.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ConvGeometry { cin, h, w: wd, k, stride, padding, ho, wo, .. } = *g;
    let mut cols = vec![0.0; cin * k * k * ho * wo];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[ci * h * wd + iy as usize * wd..][..wd];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < wd as isize {
                            row[oy * wo + ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ConvGeometry { cin, h, w: wd, k, stride, padding, ho, wo, .. } = *g;
    let mut x = vec![0.0; cin * h * wd];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut x[ci * h * wd + iy as usize * wd..][..wd];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < wd as isize {
                            xrow[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward(x: &[f64], w: &[f64], out: &mut [f64], g: &ConvGeometry) {
    let cols = im2col(x, g);
    matmul_kernel(w, &cols, out, g.cout, g.cin * g.k * g.k, g.ho * g.wo);
}

fn conv_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let (r, n) = (g.cin * g.k * g.k, g.ho * g.wo);
    let cols = im2col(x, g);
    // dW = G · colsᵀ,  dcols = Wᵀ · G
    let mut dw = vec![0.0; g.cout * r];
    let mut dcols = vec![0.0; r * n];
    for co in 0..g.cout {
        let grow = &gout[co * n..(co + 1) * n];
        for j in 0..r {
            let crow = &cols[j * n..(j + 1) * n];
            dw[co * r + j] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
            let wv = w[co * r + j];
            if wv != 0.0 {
                for (d, gv) in dcols[j * n..(j + 1) * n].iter_mut().zip(grow) {
                    *d += wv * gv;
                }
            }
        }
    }
    (col2im(&dcols, g), dw)
}
