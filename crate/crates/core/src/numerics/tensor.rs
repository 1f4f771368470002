//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every operation returns a new [`DiffTensor`] that holds strong references to
//! its inputs, so the graph lives exactly as long as the loss that was built
//! from it. Parameters are leaves created with [`DiffTensor::param`]; their
//! gradient buffers accumulate across `backward` calls until `zero_grad`.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Additive mask value for excluded softmax positions. `exp` of it underflows to 0.
pub const MASKED: f64 = -1.0e9;

const NORM_FLOOR: f64 = 1e-300;

#[derive(Clone)]
pub struct DiffTensor(Rc<Node>);

struct Node {
    id: usize,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: DiffTensor, b: DiffTensor, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: DiffTensor, b: DiffTensor },
    Sub { a: DiffTensor, b: DiffTensor },
    Mul { a: DiffTensor, b: DiffTensor },
    Scale { a: DiffTensor, c: f64 },
    AddScalar { a: DiffTensor },
    Softmax { a: DiffTensor },
    LayerNorm { x: DiffTensor, gamma: DiffTensor, beta: DiffTensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: DiffTensor },
    Tanh { a: DiffTensor },
    Exp { a: DiffTensor },
    Log { a: DiffTensor },
    ClampMin { a: DiffTensor, min: f64 },
    Embedding { table: DiffTensor, ids: Vec<usize> },
    Dropout { a: DiffTensor, mask: Vec<f64> },
    Concat { parts: Vec<DiffTensor> },
    Reshape { a: DiffTensor },
    Permute { a: DiffTensor, axes: Vec<usize> },
    Sum { a: DiffTensor },
    SumLast { a: DiffTensor },
    Cosine { a: DiffTensor, b: DiffTensor, na: Vec<f64>, nb: Vec<f64> },
    Gather { a: DiffTensor, idx: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<&DiffTensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Cosine { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::Tanh { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::ClampMin { a, .. }
            | Op::Dropout { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Sum { a }
            | Op::SumLast { a }
            | Op::Gather { a, .. } => vec![a],
            Op::Embedding { table, .. } => vec![table],
            Op::Concat { parts } => parts.iter().collect(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::ClampMin { .. } => "clamp_min",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum { .. } => "sum",
            Op::SumLast { .. } => "sum_last",
            Op::Cosine { .. } => "cosine",
            Op::Gather { .. } => "gather",
        }
    }
}

impl fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffTensor")
            .field("id", &self.0.id)
            .field("op", &self.0.op.name())
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c (m×n) = beta·c + op(a)·op(b)` on row-major storage.
///
/// With `ta`, `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides stay within them.
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

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For output flat index `o` of a permuted tensor, the source flat index.
fn permute_map(src_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let src_strides = strides(src_shape);
    let total = numel(src_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * src_strides[a]).sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl DiffTensor {
    fn from_op(shape: Vec<usize>, value: Vec<f64>, op: Op) -> Self {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        DiffTensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    fn leaf(shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("leaf", format!("shape {shape:?} vs {} values", value.len())));
        }
        Ok(DiffTensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
        })))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], value: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(shape: &[usize], value: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), value, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![], vec![v], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("zeros shape")
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    /// In-place access for optimizers and finite differencing. Only meaningful on leaves.
    pub fn value_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.value.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        v[0]
    }

    /// Accumulated gradient, or zeros if nothing has flowed into this tensor.
    pub fn grad(&self) -> Vec<f64> {
        self.0.grad.borrow().clone().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Constant copy of the current value, cut from the graph.
    pub fn detach(&self) -> DiffTensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false).expect("same shape")
    }

    fn unary(&self, value: Vec<f64>, op: Op) -> DiffTensor {
        Self::from_op(self.0.shape.clone(), value, op)
    }

    // ---- primitives ------------------------------------------------------

    /// `[.., m, k] × [k, n]` (shared right operand) or `[B.., m, k] × [B.., k, n]`.
    pub fn matmul(&self, rhs: &DiffTensor) -> Result<DiffTensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let lead = &sa[..sa.len() - 2];
        let batch = numel(lead);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(), rhs.value());
            if shared_b {
                gemm(batch * m, k, n, &av, false, &bv, false, &mut out, 0.0);
            } else {
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[bi * m * k..(bi + 1) * m * k],
                        false,
                        &bv[bi * k * n..(bi + 1) * k * n],
                        false,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(Self::from_op(
            shape,
            out,
            Op::MatMul { a: self.clone(), b: rhs.clone(), batch, m, k, n, shared_b },
        ))
    }

    fn broadcast_check(&self, rhs: &DiffTensor, op: &'static str) -> Result<()> {
        if is_suffix(rhs.shape(), self.shape()) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?} (rhs must be a trailing suffix)", self.shape(), rhs.shape())))
        }
    }

    fn zip_broadcast(&self, rhs: &DiffTensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (a, b) = (self.value(), rhs.value());
        let nb = b.len();
        a.iter().enumerate().map(|(i, &x)| f(x, b[i % nb])).collect()
    }

    /// Elementwise sum; `rhs` may broadcast over leading axes (bias, position table).
    pub fn add(&self, rhs: &DiffTensor) -> Result<DiffTensor> {
        self.broadcast_check(rhs, "add")?;
        let v = self.zip_broadcast(rhs, |x, y| x + y);
        Ok(self.unary(v, Op::Add { a: self.clone(), b: rhs.clone() }))
    }

    pub fn sub(&self, rhs: &DiffTensor) -> Result<DiffTensor> {
        self.broadcast_check(rhs, "sub")?;
        let v = self.zip_broadcast(rhs, |x, y| x - y);
        Ok(self.unary(v, Op::Sub { a: self.clone(), b: rhs.clone() }))
    }

    pub fn mul(&self, rhs: &DiffTensor) -> Result<DiffTensor> {
        self.broadcast_check(rhs, "mul")?;
        let v = self.zip_broadcast(rhs, |x, y| x * y);
        Ok(self.unary(v, Op::Mul { a: self.clone(), b: rhs.clone() }))
    }

    pub fn scale(&self, c: f64) -> DiffTensor {
        let v = self.value().iter().map(|x| x * c).collect();
        self.unary(v, Op::Scale { a: self.clone(), c })
    }

    pub fn neg(&self) -> DiffTensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> DiffTensor {
        let v = self.value().iter().map(|x| x + c).collect();
        self.unary(v, Op::AddScalar { a: self.clone() })
    }

    /// Softmax over the last axis after adding `mask` (same length; 0 keeps, [`MASKED`] drops).
    pub fn softmax(&self, mask: Option<&[f64]>) -> Result<DiffTensor> {
        let n = *self.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if let Some(m) = mask {
            if m.len() != self.numel() {
                return Err(Error::shape("softmax", format!("mask len {} vs {:?}", m.len(), self.shape())));
            }
        }
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for (r, row) in out.chunks_mut(n).enumerate() {
            let base = r * n;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                let v = x[base + j] + mask.map_or(0.0, |m| m[base + j]);
                row[j] = v;
                mx = mx.max(v);
            }
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        drop(x);
        Ok(self.unary(out, Op::Softmax { a: self.clone() }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&self, gamma: &DiffTensor, beta: &DiffTensor, eps: f64) -> Result<DiffTensor> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        drop((x, g, b));
        Ok(self.unary(
            out,
            Op::LayerNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), xhat, inv_std },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> DiffTensor {
        let v = self.value().iter().map(|&x| gelu_parts(x).0).collect();
        self.unary(v, Op::Gelu { a: self.clone() })
    }

    pub fn tanh(&self) -> DiffTensor {
        let v = self.value().iter().map(|x| x.tanh()).collect();
        self.unary(v, Op::Tanh { a: self.clone() })
    }

    pub fn exp(&self) -> DiffTensor {
        let v = self.value().iter().map(|x| x.exp()).collect();
        self.unary(v, Op::Exp { a: self.clone() })
    }

    pub fn log(&self) -> DiffTensor {
        let v = self.value().iter().map(|x| x.ln()).collect();
        self.unary(v, Op::Log { a: self.clone() })
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&self, min: f64) -> DiffTensor {
        let v = self.value().iter().map(|&x| x.max(min)).collect();
        self.unary(v, Op::ClampMin { a: self.clone(), min })
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, shaped `[.. ids shape, d]`.
    pub fn embedding(table: &DiffTensor, ids: &[usize], ids_shape: &[usize]) -> Result<DiffTensor> {
        let ts = table.shape();
        if ts.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(Error::shape("embedding", format!("table {ts:?}, ids shape {ids_shape:?}")));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for table {ts:?}")));
        }
        let t = table.value();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        drop(t);
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(Self::from_op(shape, out, Op::Embedding { table: table.clone(), ids: ids.to_vec() }))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`. `rate == 0` is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut RngStream) -> Result<DiffTensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel()).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let v = self.value().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.unary(v, Op::Dropout { a: self.clone(), mask }))
    }

    /// Concatenate along axis 0; trailing shapes must agree.
    pub fn concat(parts: &[DiffTensor]) -> Result<DiffTensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if first.shape().is_empty() {
            return Err(Error::shape("concat", "scalar inputs"));
        }
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.shape().is_empty() || p.shape()[1..] != *tail {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
            rows += p.shape()[0];
            out.extend_from_slice(&p.value());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Self::from_op(shape, out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffTensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Self::from_op(shape.to_vec(), self.to_vec(), Op::Reshape { a: self.clone() }))
    }

    /// Reorder axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<DiffTensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {:?}", self.shape())));
        }
        let map = permute_map(self.shape(), axes);
        let x = self.value();
        let out = map.iter().map(|&s| x[s]).collect();
        drop(x);
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Self::from_op(shape, out, Op::Permute { a: self.clone(), axes: axes.to_vec() }))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<DiffTensor> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn sum(&self) -> DiffTensor {
        let s = self.value().iter().sum();
        Self::from_op(vec![], vec![s], Op::Sum { a: self.clone() })
    }

    pub fn mean(&self) -> DiffTensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Result<DiffTensor> {
        let n = *self.shape().last().ok_or_else(|| Error::shape("sum_last", "scalar input"))?;
        let out = if n == 0 {
            vec![0.0; self.numel()]
        } else {
            self.value().chunks(n).map(|c| c.iter().sum()).collect()
        };
        let shape = self.shape()[..self.shape().len() - 1].to_vec();
        Ok(Self::from_op(shape, out, Op::SumLast { a: self.clone() }))
    }

    /// Pairwise cosine similarity of rows: `[N, D] × [M, D] → [N, M]`. Zero rows give 0.
    pub fn cosine(&self, rhs: &DiffTensor) -> Result<DiffTensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("cosine", format!("{sa:?} vs {sb:?}")));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (a, b) = (self.value(), rhs.value());
        let norms = |v: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).map(|r| v[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
        };
        let na = norms(&a, n);
        let nb = norms(&b, m);
        let mut out = vec![0.0; n * m];
        gemm(n, d, m, &a, false, &b, true, &mut out, 0.0);
        for i in 0..n {
            for j in 0..m {
                let denom = na[i] * nb[j];
                out[i * m + j] = if denom > NORM_FLOOR { out[i * m + j] / denom } else { 0.0 };
            }
        }
        drop((a, b));
        Ok(Self::from_op(vec![n, m], out, Op::Cosine { a: self.clone(), b: rhs.clone(), na, nb }))
    }

    /// Flat-index gather: `out[k] = self.flat[idx[k]]`, shape `[idx.len()]`.
    pub fn gather(&self, idx: &[usize]) -> Result<DiffTensor> {
        let total = self.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= total) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {:?}", self.shape())));
        }
        let x = self.value();
        let out = idx.iter().map(|&i| x[i]).collect();
        drop(x);
        Ok(Self::from_op(vec![idx.len()], out, Op::Gather { a: self.clone(), idx: idx.to_vec() }))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode pass from a scalar. Gradients accumulate into every reachable
    /// tensor that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
            node.propagate(&g, &mut pending);
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<DiffTensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(DiffTensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], pending: &mut HashMap<usize, Vec<f64>>) {
        fn slot<'a>(pending: &'a mut HashMap<usize, Vec<f64>>, t: &DiffTensor) -> Option<&'a mut Vec<f64>> {
            if !t.requires_grad() {
                return None;
            }
            Some(pending.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]))
        }
        fn add_broadcast(dst: &mut [f64], g: &[f64], f: impl Fn(usize) -> f64) {
            let nb = dst.len();
            for (i, gi) in g.iter().enumerate() {
                dst[i % nb] += gi * f(i);
            }
        }

        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if let Some(da) = slot(pending, a) {
                    let bv = b.value();
                    if *shared_b {
                        gemm(batch * m, n, k, g, false, &bv, true, da, 1.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &bv[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                }
                if let Some(db) = slot(pending, b) {
                    let av = a.value();
                    if *shared_b {
                        gemm(k, batch * m, n, &av, true, g, false, db, 1.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[bi * m * k..(bi + 1) * m * k],
                                true,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = slot(pending, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = slot(pending, b) {
                    add_broadcast(db, g, |_| 1.0);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = slot(pending, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = slot(pending, b) {
                    add_broadcast(db, g, |_| -1.0);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (a.value().clone(), b.value().clone());
                let nb = bv.len();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i % nb];
                    }
                }
                if let Some(db) = slot(pending, b) {
                    add_broadcast(db, g, |i| av[i]);
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = slot(pending, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddScalar { a } => {
                if let Some(da) = slot(pending, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Softmax { a } => {
                let n = *self.shape().last().unwrap();
                let y = self.value();
                if let Some(da) = slot(pending, a) {
                    for r in 0..y.len() / n {
                        let s = r * n;
                        let dot: f64 = (0..n).map(|j| g[s + j] * y[s + j]).sum();
                        for j in 0..n {
                            da[s + j] += y[s + j] * (g[s + j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = gamma.numel();
                let gv = gamma.value().clone();
                if let Some(dx) = slot(pending, x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let s = r * d;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[s + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[s + j];
                        }
                        for j in 0..d {
                            let dh = g[s + j] * gv[j];
                            dx[s + j] += is / d as f64 * (d as f64 * dh - sum_dh - xhat[s + j] * sum_dh_h);
                        }
                    }
                }
                if let Some(dg) = slot(pending, gamma) {
                    add_broadcast(dg, g, |i| xhat[i]);
                }
                if let Some(db) = slot(pending, beta) {
                    add_broadcast(db, g, |_| 1.0);
                }
            }
            Op::Gelu { a } => {
                let x = a.value();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * gelu_parts(x[i]).1;
                    }
                }
            }
            Op::Tanh { a } => {
                let y = self.value();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp { a } => {
                let y = self.value();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * y[i];
                    }
                }
            }
            Op::Log { a } => {
                let x = a.value();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] / x[i];
                    }
                }
            }
            Op::ClampMin { a, min } => {
                let x = a.value();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        if x[i] > *min {
                            *d += g[i];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = slot(pending, table) {
                    let d = table.shape()[1];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * mask[i];
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    if let Some(dp) = slot(pending, p) {
                        dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, x)| *d += x);
                    }
                    offset += len;
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = slot(pending, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Permute { a, axes } => {
                if let Some(da) = slot(pending, a) {
                    let map = permute_map(a.shape(), axes);
                    for (o, &src) in map.iter().enumerate() {
                        da[src] += g[o];
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = slot(pending, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumLast { a } => {
                let n = *a.shape().last().unwrap();
                if let Some(da) = slot(pending, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i / n];
                    }
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let (n, m, d) = (na.len(), nb.len(), a.shape()[1]);
                let (av, bv) = (a.value().clone(), b.value().clone());
                let c = self.value().clone();
                if let Some(da) = slot(pending, a) {
                    for i in 0..n {
                        for j in 0..m {
                            let denom = na[i] * nb[j];
                            if denom <= NORM_FLOOR {
                                continue;
                            }
                            let gij = g[i * m + j];
                            let cij = c[i * m + j];
                            for t in 0..d {
                                da[i * d + t] += gij * (bv[j * d + t] / denom - cij * av[i * d + t] / (na[i] * na[i]));
                            }
                        }
                    }
                }
                if let Some(db) = slot(pending, b) {
                    for i in 0..n {
                        for j in 0..m {
                            let denom = na[i] * nb[j];
                            if denom <= NORM_FLOOR {
                                continue;
                            }
                            let gij = g[i * m + j];
                            let cij = c[i * m + j];
                            for t in 0..d {
                                db[j * d + t] += gij * (av[i * d + t] / denom - cij * bv[j * d + t] / (nb[j] * nb[j]));
                            }
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(da) = slot(pending, a) {
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += g[k];
                    }
                }
            }
        }
    }
}
