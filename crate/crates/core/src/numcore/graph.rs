use std::sync::Arc;

use super::tensor::numel;
use super::{Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Scale { x: Var, c: S },
    AddScalar { x: Var },
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, rstd: Vec<S> },
    Gelu { x: Var },
    Silu { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    ExpandMid { x: Var, n: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    Sse { a: Var, b: Var },
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Tape of primitive ops for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order, so
/// [`Graph::backward`] simply walks the tape in reverse. A graph is meant to
/// be built, differentiated and dropped by a single thread.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn shape_err<T>(msg: String) -> Result<T, TensorError> {
    Err(TensorError::Shape(msg))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    // 0.5 (1 + tanh u) = sigmoid(2u)
    let u = c * (x + a * x * x * x);
    x * sigmoid(u + u)
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let sg = sigmoid(u + u);
    // d/du sigmoid(2u) = 2 sg (1 - sg)
    sg + x * S::lit(2.0) * sg * (S::one() - sg) * c * (S::one() + S::lit(3.0) * a * x * x)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu_scalar<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var, TensorError> {
        value.check_finite(op_name(&op))?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are only accumulated for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf backed by a shared buffer, avoiding a copy of large
    /// parameter tensors.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] x b[k, n] -> [..., n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product over identical leading dims:
    /// `a[..., m, k] x b[..., k, n]`, or `b[..., n, k]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return shape_err(format!("bmm {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return shape_err(format!("bmm inner dims {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let groups = numel(&sa[..r - 2]);
        let mut out = vec![S::zero(); groups * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for g in 0..groups {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    &ad[g * m * k..(g + 1) * m * k],
                    k as isize,
                    1,
                    &bd[g * k * n..(g + 1) * k * n],
                    rsb,
                    csb,
                    S::zero(),
                    &mut out[g * m * n..(g + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        self.push(Tensor::from_parts(shape, out), Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let vb = self.value(b);
        Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    fn map(&self, x: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    /// Adds `b[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return shape_err(format!("add_bias {sx:?} + {sb:?}"));
        }
        let n = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        self.push(Tensor::from_parts(sx, data), Op::AddBias { x, b }, &[x, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = S::lit(c);
        let out = self.map(x, |v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = S::lit(c);
        let out = self.map(x, |v| v + c);
        self.push(out, Op::AddScalar { x }, &[x])
    }

    /// Softmax along `axis`, stabilised by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = around(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x])
    }

    /// Row softmax of attention scores `x[B, H, m, n]` restricted to keys with
    /// `key_mask[b * n + j] == true`. Excluded keys receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || key_mask.len() != shape[0] * shape[3] {
            return shape_err(format!(
                "masked_softmax {shape:?} with mask of {}",
                key_mask.len()
            ));
        }
        let (b, h, m, n) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for bi in 0..b {
            let mask = &key_mask[bi * n..(bi + 1) * n];
            for r in 0..h * m {
                let off = (bi * h * m + r) * n;
                let row = &src[off..off + n];
                let mut mx = S::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if mask[j] {
                        mx = mx.max(v);
                    }
                }
                if mx == S::neg_infinity() {
                    continue;
                }
                let dst = &mut out[off..off + n];
                let mut sum = S::zero();
                for j in 0..n {
                    if mask[j] {
                        let e = (row[j] - mx).exp();
                        dst[j] = e;
                        sum += e;
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d / sum;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::MaskedSoftmax { x }, &[x])
    }

    /// Normalises each row of the last axis to zero mean and unit variance.
    /// No affine parameters; modulation is applied by the caller.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Shape("layer_norm on scalar".into()))?;
        if d < 2 {
            return shape_err(format!("layer_norm needs last dim >= 2, got {shape:?}"));
        }
        let eps = S::lit(eps);
        let dn = S::lit(d as f64);
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut out = vec![S::zero(); src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, rstd }, &[x])
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.map(x, gelu_scalar);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.map(x, silu_scalar);
        self.push(out, Op::Silu { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, &[x])
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("permute {shape:?} by {axes:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for_each_permuted(&shape, axes, |o, i| out[o] = src[i]);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, axes: axes.to_vec() },
            &[x],
        )
    }

    /// `x[B, d] -> [B, n, d]` by repeating each row `n` times.
    pub fn expand_mid(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || n == 0 {
            return shape_err(format!("expand_mid {shape:?} x{n}"));
        }
        let (b, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            for _ in 0..n {
                out.extend_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        self.push(Tensor::from_parts(vec![b, n, d], out), Op::ExpandMid { x, n }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { axis, rank: base.len() });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!("concat {base:?} with {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { xs: xs.to_vec(), axis },
            xs,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return shape_err(format!("narrow {shape:?} axis {axis} [{start}, {})", start + len));
        }
        let (outer, full, inner) = around(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(Tensor::from_parts(oshape, out), Op::Narrow { x, axis, start }, &[x])
    }

    /// Selects entries along axis 0.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return shape_err(format!("gather_rows {shape:?} at {idx:?}"));
        }
        let inner = numel(&shape[1..]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        self.push(
            Tensor::from_parts(oshape, out),
            Op::GatherRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::lit(v.numel() as f64);
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Mean { x }, &[x])
    }

    /// Sum of squared differences, `sum((a - b)^2)`.
    pub fn sse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sse")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>();
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sse { a, b }, &[a, b])
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut adj: Vec<Option<Vec<S>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                g.check_finite("gradient")?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k;
                if rg(a) {
                    with_adj(adj, *a, va.numel(), |da| {
                        // dA += dC . B^T
                        S::gemm(m, n, k, S::one(), g, n as isize, 1, vb.data(), 1, n as isize, S::one(), da, k as isize, 1);
                    });
                }
                if rg(b) {
                    with_adj(adj, *b, vb.numel(), |db| {
                        // dB += A^T . dC
                        S::gemm(k, m, n, S::one(), va.data(), 1, k as isize, g, n as isize, 1, S::one(), db, n as isize, 1);
                    });
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let r = va.rank();
                let (m, k) = (va.shape()[r - 2], va.shape()[r - 1]);
                let n = out.shape()[r - 1];
                let groups = va.numel() / (m * k);
                if rg(a) {
                    with_adj(adj, *a, va.numel(), |da| {
                        for gi in 0..groups {
                            let gg = &g[gi * m * n..(gi + 1) * m * n];
                            let bb = &vb.data()[gi * k * n..(gi + 1) * k * n];
                            let dd = &mut da[gi * m * k..(gi + 1) * m * k];
                            // dA = dC . B^T ; B^T is [n, k]
                            let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                            S::gemm(m, n, k, S::one(), gg, n as isize, 1, bb, rs, cs, S::one(), dd, k as isize, 1);
                        }
                    });
                }
                if rg(b) {
                    with_adj(adj, *b, vb.numel(), |db| {
                        for gi in 0..groups {
                            let gg = &g[gi * m * n..(gi + 1) * m * n];
                            let aa = &va.data()[gi * m * k..(gi + 1) * m * k];
                            let dd = &mut db[gi * k * n..(gi + 1) * k * n];
                            if *trans_b {
                                // B stored [n, k]: dB = dC^T . A
                                S::gemm(n, m, k, S::one(), gg, 1, n as isize, aa, k as isize, 1, S::one(), dd, k as isize, 1);
                            } else {
                                S::gemm(k, m, n, S::one(), aa, 1, k as isize, gg, n as isize, 1, S::one(), dd, n as isize, 1);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if rg(v) {
                        with_adj(adj, *v, g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(a) {
                    with_adj(adj, *a, g.len(), |d| add_into(d, g));
                }
                if rg(b) {
                    with_adj(adj, *b, g.len(), |d| {
                        for (x, &y) in d.iter_mut().zip(g) {
                            *x -= y;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                if rg(a) {
                    with_adj(adj, *a, g.len(), |d| {
                        for ((x, &y), &o) in d.iter_mut().zip(g).zip(vb) {
                            *x += y * o;
                        }
                    });
                }
                if rg(b) {
                    with_adj(adj, *b, g.len(), |d| {
                        for ((x, &y), &o) in d.iter_mut().zip(g).zip(va) {
                            *x += y * o;
                        }
                    });
                }
            }
            Op::AddBias { x, b } => {
                if rg(x) {
                    with_adj(adj, *x, g.len(), |d| add_into(d, g));
                }
                if rg(b) {
                    let n = nodes[b.0].value.numel();
                    with_adj(adj, *b, n, |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if rg(x) {
                    with_adj(adj, *x, g.len(), |d| {
                        for (x, &y) in d.iter_mut().zip(g) {
                            *x += y * *c;
                        }
                    });
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if rg(x) {
                    with_adj(adj, *x, g.len(), |d| add_into(d, g));
                }
            }
            Op::Softmax { x, axis } => {
                if rg(x) {
                    let y = out.data();
                    let (outer, len, inner) = around(out.shape(), *axis);
                    with_adj(adj, *x, g.len(), |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = S::zero();
                                for j in 0..len {
                                    dot += g[base + j * inner] * y[base + j * inner];
                                }
                                for j in 0..len {
                                    let p = base + j * inner;
                                    d[p] += y[p] * (g[p] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax { x } => {
                if rg(x) {
                    let y = out.data();
                    let n = *out.shape().last().unwrap();
                    with_adj(adj, *x, g.len(), |d| {
                        for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                            let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, rstd } => {
                if rg(x) {
                    let xhat = out.data();
                    let dim = *out.shape().last().unwrap();
                    let dn = S::lit(dim as f64);
                    with_adj(adj, *x, g.len(), |d| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * dim..(r + 1) * dim];
                            let xr = &xhat[r * dim..(r + 1) * dim];
                            let mg = gr.iter().copied().sum::<S>() / dn;
                            let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>() / dn;
                            for j in 0..dim {
                                d[r * dim + j] += rs * (gr[j] - mg - xr[j] * mgx);
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } | Op::Silu { x } => {
                if rg(x) {
                    let is_gelu = matches!(nodes[i].op, Op::Gelu { .. });
                    let xv = nodes[x.0].value.data();
                    with_adj(adj, *x, g.len(), |d| {
                        for ((dd, &gg), &v) in d.iter_mut().zip(g).zip(xv) {
                            let dv = if is_gelu {
                                gelu_grad(v)
                            } else {
                                let s = sigmoid(v);
                                s * (S::one() + v * (S::one() - s))
                            };
                            *dd += gg * dv;
                        }
                    });
                }
            }
            Op::Permute { x, axes } => {
                if rg(x) {
                    let in_shape = nodes[x.0].value.shape().to_vec();
                    with_adj(adj, *x, g.len(), |d| {
                        for_each_permuted(&in_shape, axes, |o, i| d[i] += g[o]);
                    });
                }
            }
            Op::ExpandMid { x, n } => {
                if rg(x) {
                    let dim = nodes[x.0].value.shape()[1];
                    let b = nodes[x.0].value.shape()[0];
                    with_adj(adj, *x, b * dim, |d| {
                        for bi in 0..b {
                            for r in 0..*n {
                                let off = (bi * n + r) * dim;
                                add_into(&mut d[bi * dim..(bi + 1) * dim], &g[off..off + dim]);
                            }
                        }
                    });
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = around(out.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if rg(v) {
                        with_adj(adj, *v, outer * len * inner, |d| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                add_into(
                                    &mut d[o * len * inner..(o + 1) * len * inner],
                                    &g[src..src + len * inner],
                                );
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if rg(x) {
                    let in_shape = nodes[x.0].value.shape();
                    let (outer, full, inner) = around(in_shape, *axis);
                    let len = out.shape()[*axis];
                    with_adj(adj, *x, nodes[x.0].value.numel(), |d| {
                        for o in 0..outer {
                            let dst = (o * full + start) * inner;
                            add_into(
                                &mut d[dst..dst + len * inner],
                                &g[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                if rg(x) {
                    let xv = &nodes[x.0].value;
                    let inner = numel(&xv.shape()[1..]);
                    with_adj(adj, *x, xv.numel(), |d| {
                        for (r, &src) in idx.iter().enumerate() {
                            add_into(
                                &mut d[src * inner..(src + 1) * inner],
                                &g[r * inner..(r + 1) * inner],
                            );
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if rg(x) {
                    let n = nodes[x.0].value.numel();
                    with_adj(adj, *x, n, |d| {
                        for v in d.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
            }
            Op::Mean { x } => {
                if rg(x) {
                    let n = nodes[x.0].value.numel();
                    let s = g[0] / S::lit(n as f64);
                    with_adj(adj, *x, n, |d| {
                        for v in d.iter_mut() {
                            *v += s;
                        }
                    });
                }
            }
            Op::Sse { a, b } => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let two = S::lit(2.0) * g[0];
                if rg(a) {
                    with_adj(adj, *a, va.len(), |d| {
                        for ((x, &p), &q) in d.iter_mut().zip(va).zip(vb) {
                            *x += two * (p - q);
                        }
                    });
                }
                if rg(b) {
                    with_adj(adj, *b, va.len(), |d| {
                        for ((x, &p), &q) in d.iter_mut().zip(va).zip(vb) {
                            *x -= two * (p - q);
                        }
                    });
                }
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn with_adj<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = adj[v.0].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

/// Calls `f(out_index, in_index)` for every element of `x` permuted by `axes`.
fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = in_shape.len();
    let total = numel(in_shape);
    if r == 0 {
        f(0, 0);
        return;
    }
    let mut in_strides = vec![1usize; r];
    for a in (0..r.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * in_shape[a + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut counter = vec![0usize; r];
    let mut in_off = 0usize;
    let last = r - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut o = 0;
    while o < total {
        let mut p = in_off;
        for _ in 0..inner_len {
            f(o, p);
            o += 1;
            p += inner_stride;
        }
        // advance the counter over all but the innermost axis
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            in_off += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            in_off -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Softmax { .. } => "softmax",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::Silu { .. } => "silu",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::ExpandMid { .. } => "expand_mid",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::GatherRows { .. } => "gather_rows",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Sse { .. } => "sse",
    }
}
