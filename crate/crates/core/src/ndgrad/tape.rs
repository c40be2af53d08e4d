use super::tensor::{broadcast_offsets, broadcast_shape, strided_offsets, strides};
use super::{NdError, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Relu,
    Gelu,
    Exp,
    Log,
    Sqrt,
    Softplus,
    Tanh,
}

struct MatMulPlan {
    m: usize,
    p: usize,
    n: usize,
    /// (a matrix index, b matrix index) for each output matrix.
    pairs: Vec<(usize, usize)>,
}

/// Outer/axis/inner factorisation of a shape around one axis.
#[derive(Clone, Copy)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

enum Op {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var, a_off: Option<Vec<usize>>, b_off: Option<Vec<usize>> },
    Unary { kind: Unary, x: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Softmax { x: Var, split: AxisSplit },
    SumAxis { x: Var, split: AxisSplit },
    SumAll { x: Var },
    Reshape { x: Var },
    Permute { x: Var, map: Vec<usize> },
    Concat { parts: Vec<Var>, split: Vec<usize>, outer: usize, inner: usize },
    IndexSelect { x: Var, split: AxisSplit, idx: Vec<usize> },
    IndexAdd { x: Var, split: AxisSplit, idx: Vec<usize>, size: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Ema { x: Var, alpha: f64 },
    Cov { x: Var, eps: f64 },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::IndexAdd { .. } => "index_add",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Ema { .. } => "ema",
            Op::Cov { .. } => "cov",
        }
    }
}

/// Define-by-run record of tensor operations.
///
/// Node ids increase in execution order, so reverse id order is a valid reverse
/// topological order. Leaf gradients persist across [`Tape::backward`] calls
/// and add up until [`Tape::zero_grad`].
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.leaf_grads.push(None);
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.ops[v.0].kind()
    }

    /// Copy of a value with no gradient connection to its source.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.values[x.0].clone();
        self.constant(v)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, NdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            NdError::shape("elementwise", format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let a_off = (sa != out_shape).then(|| broadcast_offsets(&out_shape, &sa));
        let b_off = (sb != out_shape).then(|| broadcast_offsets(&out_shape, &sb));
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let n: usize = out_shape.iter().product();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = match (&a_off, &b_off) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(bo)) => (0..n).map(|i| f(av[i], bv[bo[i]])).collect(),
            (Some(ao), None) => (0..n).map(|i| f(av[ao[i]], bv[i])).collect(),
            (Some(ao), Some(bo)) => (0..n).map(|i| f(av[ao[i]], bv[bo[i]])).collect(),
        };
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary { kind, a, b, a_off, b_off }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Relu => |v| v.max(0.0),
            Unary::Gelu => |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Softplus => |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
            Unary::Tanh => f64::tanh,
        };
        let out = self.values[x.0].map(f);
        let req = self.requires[x.0];
        self.push(out, Op::Unary { kind, x }, req)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.values[x.0].map(|v| v * c);
        let req = self.requires[x.0];
        self.push(out, Op::Scale { x, c }, req)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.values[x.0].map(|v| v + c);
        let req = self.requires[x.0];
        self.push(out, Op::AddScalar { x }, req)
    }

    // ---- contractions and reductions --------------------------------------

    /// Batched matrix product `[.., m, p] x [.., p, n] -> [.., m, n]` with
    /// trailing-aligned broadcasting of the batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NdError::shape("matmul", format!("operands need rank >= 2: {sa:?}, {sb:?}")));
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if p != p2 {
            return Err(NdError::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| {
            NdError::shape("matmul", format!("batch dims not broadcastable: {sa:?} x {sb:?}"))
        })?;
        let a_idx = broadcast_offsets(&batch, ba);
        let b_idx = broadcast_offsets(&batch, bb);
        let pairs: Vec<(usize, usize)> = a_idx.into_iter().zip(b_idx).collect();
        let mut out = vec![0.0; pairs.len() * m * n];
        {
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            for (k, &(ia, ib)) in pairs.iter().enumerate() {
                gemm(
                    m, p, n,
                    &av[ia * m * p..], (p, 1),
                    &bv[ib * p * n..], (n, 1),
                    &mut out[k * m * n..(k + 1) * m * n], (n, 1),
                );
            }
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, plan: MatMulPlan { m, p, n, pairs } }, req))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), NdError> {
        if axis >= self.shape(x).len() {
            return Err(NdError::shape(op, format!("axis {axis} out of range for {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilised by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NdError> {
        self.check_axis("softmax", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let base = o * split.len * split.inner + i;
                let at = |j: usize| base + j * split.inner;
                let mx = (0..split.len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..split.len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..split.len {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.requires[x.0];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, split }, req))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, NdError> {
        self.check_axis("sum_axis", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        let src = self.values[x.0].data();
        let mut out = vec![0.0; split.outer * split.inner];
        for o in 0..split.outer {
            for j in 0..split.len {
                let row = &src[(o * split.len + j) * split.inner..][..split.inner];
                for (d, s) in out[o * split.inner..][..split.inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let req = self.requires[x.0];
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, split }, req))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, NdError> {
        self.check_axis("mean_axis", x, axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::SumAll { x }, req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NdError> {
        let out = self.values[x.0].clone().reshape(shape.to_vec())?;
        let req = self.requires[x.0];
        Ok(self.push(out, Op::Reshape { x }, req))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NdError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NdError::shape("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let map = strided_offsets(&out_shape, &eff);
        let src = self.values[x.0].data();
        let data = map.iter().map(|&i| src[i]).collect();
        let req = self.requires[x.0];
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, map }, req))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var, NdError> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(NdError::shape("transpose", format!("axes {a},{b} out of range")));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NdError> {
        let first = parts.first().ok_or_else(|| NdError::shape("concat", "no operands"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut split = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(NdError::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            split.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = split.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&split) {
                let chunk = len * inner;
                data.extend_from_slice(&self.values[p.0].data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: parts.to_vec(), split, outer, inner }, req))
    }

    /// Gathers positions `idx` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var, NdError> {
        self.check_axis("index_select", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        if idx.is_empty() || idx.iter().any(|&i| i >= split.len) {
            return Err(NdError::shape("index_select", format!("indices {idx:?} invalid for extent {}", split.len)));
        }
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(split.outer * idx.len() * split.inner);
        for o in 0..split.outer {
            for &j in idx {
                data.extend_from_slice(&src[(o * split.len + j) * split.inner..][..split.inner]);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = idx.len();
        let req = self.requires[x.0];
        Ok(self.push(Tensor::from_parts(shape, data), Op::IndexSelect { x, split, idx: idx.to_vec() }, req))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NdError> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    /// Scatter-add: output has extent `size` on `axis`; slot `idx[j]` receives
    /// the sum of input positions `j` mapped to it. Unmapped slots are zero.
    pub fn index_add(&mut self, x: Var, axis: usize, idx: &[usize], size: usize) -> Result<Var, NdError> {
        self.check_axis("index_add", x, axis)?;
        let split = AxisSplit::new(self.shape(x), axis);
        if idx.len() != split.len || idx.iter().any(|&i| i >= size) || size == 0 {
            return Err(NdError::shape("index_add", format!("{} indices into extent {size} for input extent {}", idx.len(), split.len)));
        }
        let src = self.values[x.0].data();
        let mut data = vec![0.0; split.outer * size * split.inner];
        for o in 0..split.outer {
            for (j, &t) in idx.iter().enumerate() {
                let s = &src[(o * split.len + j) * split.inner..][..split.inner];
                for (d, v) in data[(o * size + t) * split.inner..][..split.inner].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = size;
        let req = self.requires[x.0];
        Ok(self.push(Tensor::from_parts(shape, data), Op::IndexAdd { x, split, idx: idx.to_vec(), size }, req))
    }

    // ---- fused kernels ------------------------------------------------------

    /// Standardises the last axis to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let src = self.values[x.0].data();
        let rows = src.len() / width;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let req = self.requires[x.0];
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, rstd }, req)
    }

    /// Stride-1 1-D convolution with replicate padding (`same` length).
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]` with odd `K`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NdError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(NdError::shape("conv1d", format!("input {sx:?} vs weight {sw:?}")));
        }
        if sw[2] % 2 == 0 {
            return Err(NdError::shape("conv1d", format!("kernel length {} must be odd", sw[2])));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(NdError::shape("conv1d", format!("bias {:?} vs {} outputs", self.shape(b), sw[0])));
            }
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let half = k / 2;
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let mut out = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for o in 0..cout {
                let dst = &mut out[(bi * cout + o) * len..][..len];
                if let Some(b) = b {
                    dst.fill(self.values[b.0].data()[o]);
                }
                for i in 0..cin {
                    let row = &xv[(bi * cin + i) * len..][..len];
                    let taps = &wv[(o * cin + i) * k..][..k];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (kk, &wt) in taps.iter().enumerate() {
                            let pos = (t + kk).saturating_sub(half).min(len - 1);
                            acc += wt * row[pos];
                        }
                        *d += acc;
                    }
                }
            }
        }
        let req = self.requires[x.0] || self.requires[w.0] || b.is_some_and(|b| self.requires[b.0]);
        Ok(self.push(Tensor::from_parts(vec![batch, cout, len], out), Op::Conv1d { x, w, b }, req))
    }

    /// Exponential moving average along the last axis:
    /// `v_0 = 0`, `v_t = alpha * v_{t-1} + (1 - alpha) * x_t`.
    pub fn ema(&mut self, x: Var, alpha: f64) -> Var {
        let out = ema_forward(&self.values[x.0], alpha);
        let req = self.requires[x.0];
        self.push(out, Op::Ema { x, alpha }, req)
    }

    /// Coefficient of variation of all elements: population std / (mean + eps).
    pub fn cov(&mut self, x: Var, eps: f64) -> Var {
        let v = self.values[x.0].data();
        let (mean, std) = mean_std(v);
        let c = std / (mean + eps);
        let req = self.requires[x.0];
        self.push(Tensor::scalar(c), Op::Cov { x, eps }, req)
    }

    // ---- reverse pass --------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-tracked leaf reachable
    /// from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NdError> {
        if !self.values[loss.0].is_scalar() {
            return Err(NdError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires[loss.0] {
            return Err(NdError::contract("backward on a value that does not track gradients"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.requires[id] {
                continue;
            }
            if let Op::Leaf = self.ops[id] {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let vals = &self.values;
        let req = &self.requires;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, vals, req, $v)
            };
        }
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Binary { kind, a, b, a_off, b_off } => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                let ai = |i: usize| a_off.as_ref().map_or(i, |o| o[i]);
                let bi = |i: usize| b_off.as_ref().map_or(i, |o| o[i]);
                if let Some(ga) = slot!(*a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ai(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bv[bi(i)],
                            Binary::Div => gi / bv[bi(i)],
                        };
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[bi(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[ai(i)],
                            Binary::Div => {
                                let y = bv[bi(i)];
                                -gi * av[ai(i)] / (y * y)
                            }
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = vals[x.0].data();
                let yv = vals[id].data();
                if let Some(gx) = slot!(*x) {
                    for i in 0..g.len() {
                        let (xi, yi) = (xv[i], yv[i]);
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => {
                                let u = GELU_C * (xi + GELU_A * xi * xi * xi);
                                let t = u.tanh();
                                0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
                            }
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Sqrt => 0.5 / yi,
                            Unary::Softplus => 1.0 / (1.0 + (-xi).exp()),
                            Unary::Tanh => 1.0 - yi * yi,
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { m, p, n, pairs } = plan;
                let (m, p, n) = (*m, *p, *n);
                if let Some(ga) = slot!(*a) {
                    let bv = vals[b.0].data();
                    for (k, &(ia, ib)) in pairs.iter().enumerate() {
                        // dA = dC * B^T
                        gemm(m, n, p, &g[k * m * n..], (n, 1), &bv[ib * p * n..], (1, n), &mut ga[ia * m * p..(ia + 1) * m * p], (p, 1));
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = vals[a.0].data();
                    for (k, &(ia, ib)) in pairs.iter().enumerate() {
                        // dB = A^T * dC
                        gemm(p, m, n, &av[ia * m * p..], (1, p), &g[k * m * n..], (n, 1), &mut gb[ib * p * n..(ib + 1) * p * n], (n, 1));
                    }
                }
            }
            Op::Softmax { x, split } => {
                let y = vals[id].data();
                if let Some(gx) = slot!(*x) {
                    for o in 0..split.outer {
                        for i in 0..split.inner {
                            let base = o * split.len * split.inner + i;
                            let dot: f64 = (0..split.len).map(|j| y[base + j * split.inner] * g[base + j * split.inner]).sum();
                            for j in 0..split.len {
                                let at = base + j * split.inner;
                                gx[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, split } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..split.outer {
                        for j in 0..split.len {
                            let dst = &mut gx[(o * split.len + j) * split.inner..][..split.inner];
                            dst.iter_mut().zip(&g[o * split.inner..][..split.inner]).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Permute { x, map } => {
                if let Some(gx) = slot!(*x) {
                    for (k, &src) in map.iter().enumerate() {
                        gx[src] += g[k];
                    }
                }
            }
            Op::Concat { parts, split, outer, inner } => {
                let total: usize = split.iter().sum();
                let mut start = 0;
                for (&p, &len) in parts.iter().zip(split) {
                    if let Some(gp) = slot!(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + start) * inner..][..len * inner];
                            gp[o * len * inner..][..len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    start += len;
                }
            }
            Op::IndexSelect { x, split, idx } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..split.outer {
                        for (j, &src_pos) in idx.iter().enumerate() {
                            let src = &g[(o * idx.len() + j) * split.inner..][..split.inner];
                            gx[(o * split.len + src_pos) * split.inner..][..split.inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::IndexAdd { x, split, idx, size } => {
                let size = *size;
                if let Some(gx) = slot!(*x) {
                    for o in 0..split.outer {
                        for (j, &dst_pos) in idx.iter().enumerate() {
                            let src = &g[(o * size + dst_pos) * split.inner..][..split.inner];
                            gx[(o * split.len + j) * split.inner..][..split.inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let y = vals[id].data();
                let width = g.len() / rstd.len();
                if let Some(gx) = slot!(*x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gy, yy) = (&g[r * width..][..width], &y[r * width..][..width]);
                        let mg = gy.iter().sum::<f64>() / width as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for c in 0..width {
                            gx[r * width + c] += rs * (gy[c] - mg - yy[c] * mgy);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let (sx, sw) = (vals[x.0].shape(), vals[w.0].shape());
                let (batch, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let half = k / 2;
                let (xv, wv) = (vals[x.0].data(), vals[w.0].data());
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for bi in 0..batch {
                            for (o, gbo) in gb.iter_mut().enumerate() {
                                *gbo += g[(bi * cout + o) * len..][..len].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for bi in 0..batch {
                        for o in 0..cout {
                            let go = &g[(bi * cout + o) * len..][..len];
                            for i in 0..cin {
                                let row = &xv[(bi * cin + i) * len..][..len];
                                for kk in 0..k {
                                    let mut acc = 0.0;
                                    for (t, &gt) in go.iter().enumerate() {
                                        acc += gt * row[(t + kk).saturating_sub(half).min(len - 1)];
                                    }
                                    gw[(o * cin + i) * k + kk] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for bi in 0..batch {
                        for o in 0..cout {
                            let go = &g[(bi * cout + o) * len..][..len];
                            for i in 0..cin {
                                let dst = &mut gx[(bi * cin + i) * len..][..len];
                                let taps = &wv[(o * cin + i) * k..][..k];
                                for (t, &gt) in go.iter().enumerate() {
                                    for (kk, &wt) in taps.iter().enumerate() {
                                        dst[(t + kk).saturating_sub(half).min(len - 1)] += gt * wt;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Ema { x, alpha } => {
                if let Some(gx) = slot!(*x) {
                    let len = *vals[x.0].shape().last().unwrap_or(&1);
                    for (gr, gxr) in g.chunks(len).zip(gx.chunks_mut(len)) {
                        let mut carry = 0.0;
                        for t in (0..len).rev() {
                            carry = gr[t] + alpha * carry;
                            gxr[t] += (1.0 - alpha) * carry;
                        }
                    }
                }
            }
            Op::Cov { x, eps } => {
                let v = vals[x.0].data();
                if let Some(gx) = slot!(*x) {
                    let n = v.len() as f64;
                    let (mean, std) = mean_std(v);
                    let denom = mean + eps;
                    for (gi, &xi) in gx.iter_mut().zip(v) {
                        let dstd = if std > 0.0 { (xi - mean) / (n * std) } else { 0.0 };
                        *gi += g[0] * (dstd / denom - std / (n * denom * denom));
                    }
                }
            }
        }
    }

    /// First node (in execution order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.values
            .iter()
            .position(|v| !v.all_finite())
            .map(|i| (Var(i), self.ops[i].kind()))
    }
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    vals: &[Tensor],
    req: &[bool],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !req[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; vals[v.0].len()]))
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn ema_forward(x: &Tensor, alpha: f64) -> Tensor {
    let len = *x.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(len).zip(out.chunks_mut(len)) {
        let mut v = 0.0;
        for (o, &theta) in dst.iter_mut().zip(src) {
            v = alpha * v + (1.0 - alpha) * theta;
            *o = v;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `c += a * b` for row/column-strided matrices (`a: m x k`, `b: k x n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_extent = (m - 1) * rsa + (k - 1) * csa + 1;
    let b_extent = (k - 1) * rsb + (n - 1) * csb + 1;
    let c_extent = (m - 1) * rsc + (n - 1) * csc + 1;
    assert!(a.len() >= a_extent && b.len() >= b_extent && c.len() >= c_extent);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            1.0,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}
