//! Tape-based reverse-mode autodiff over dense 2-D tensors.
//!
//! The engine is deliberately small: every tensor is a row-major `[rows,
//! cols]` matrix of some float type, operations append nodes to a [`Tape`]
//! (forward values computed eagerly), and [`Tape::backward`] walks the nodes
//! in reverse creation order accumulating gradients. Creation order is
//! topological order because an op can only reference ids that already
//! exist, so no separate sort is needed.
//!
//! Determinism: all kernels are sequential with fixed loop order, so
//! identical inputs produce bitwise-identical values and gradients.
//!
//! The scalar type is generic ([`Element`]) so the same graph code runs in
//! f32 for training and in f64 for finite-difference gradient checks.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive};
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::sync::atomic::{AtomicU64, Ordering};

/// Float scalar usable by the tape. Implemented for `f32` and `f64`.
pub trait Element:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape. Using an id from a different tape
/// is a contract violation and is rejected at op time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op<T: Element> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Broadcast-add a `[1, d]` row to every row of a `[n, d]` tensor.
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Gelu(usize),
    Sqrt(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: T,
    },
    GatherRows(usize, Vec<usize>),
    /// `out[perm[j]] = in[j]`; `perm` is a permutation of `0..rows`.
    ScatterRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    Transpose(usize),
    Reshape(usize),
    /// Tile a `[1, d]` row `count` times.
    RepeatRow(usize, usize),
    SumAll(usize),
    /// Sum each row to a single column: `[n, d] -> [n, 1]`.
    RowSum(usize),
    /// Max over each consecutive group of rows, per column. `argmax` stores
    /// the winning absolute row per output element (lowest row wins ties).
    MaxPoolRows {
        x: usize,
        argmax: Vec<usize>,
    },
    /// Mean over rows of `-log softmax(logits)[target]`.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op<T>,
}

/// One computation graph. Values are computed eagerly; `backward` may run
/// exactly once per tape.
pub struct Tape<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// (node index, store id, param index) for leaves bound to a ParamStore.
    bindings: Vec<(usize, u64, usize)>,
    /// Memo so a parameter binds to a single node per tape; gradients from
    /// all uses then accumulate on that node.
    bound: HashMap<(u64, usize), TensorId>,
    backward_done: bool,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: TensorId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::contract(format!(
                "tensor id from tape {} used on tape {}",
                id.tape, self.id
            )));
        }
        if id.idx >= self.nodes.len() {
            return Err(Error::index(format!(
                "tensor index {} on tape of {} nodes",
                id.idx,
                self.nodes.len()
            )));
        }
        Ok(id.idx)
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        #[cfg(debug_assertions)]
        {
            if !matches!(op, Op::Leaf) {
                debug_assert!(
                    value.iter().all(|v| v.is_finite()),
                    "non-finite value produced by {op:?}"
                );
            }
        }
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn shape_of(&self, idx: usize) -> (usize, usize) {
        (self.nodes[idx].rows, self.nodes[idx].cols)
    }

    fn validate_shape(rows: usize, cols: usize, len: usize) -> Result<()> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("zero-sized shape [{rows}, {cols}]")));
        }
        if rows * cols != len {
            return Err(Error::dim(format!(
                "shape [{rows}, {cols}] does not match {len} elements"
            )));
        }
        Ok(())
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<TensorId> {
        Self::validate_shape(rows, cols, data.len())?;
        Ok(self.push(data, rows, cols, false, Op::Leaf))
    }

    /// Differentiable leaf (used directly in tests; model code binds
    /// parameters via [`Tape::param`]).
    pub fn var(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<TensorId> {
        Self::validate_shape(rows, cols, data.len())?;
        Ok(self.push(data, rows, cols, true, Op::Leaf))
    }

    /// Bind a parameter from `store` as a differentiable leaf. Binding the
    /// same parameter again returns the existing node.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Result<TensorId> {
        let p = store.get(index)?;
        if let Some(&id) = self.bound.get(&(store.id, index)) {
            return Ok(id);
        }
        let id = self.push(p.value.clone(), p.rows, p.cols, true, Op::Leaf);
        self.bindings.push((id.idx, store.id, index));
        self.bound.insert((store.id, index), id);
        Ok(id)
    }

    /// Bind a parameter as a frozen (non-differentiable) leaf.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, index: usize) -> Result<TensorId> {
        let p = store.get(index)?;
        self.leaf(p.value.clone(), p.rows, p.cols)
    }

    pub fn value(&self, id: TensorId) -> Result<&[T]> {
        let idx = self.check(id)?;
        Ok(&self.nodes[idx].value)
    }

    pub fn shape(&self, id: TensorId) -> Result<[usize; 2]> {
        let idx = self.check(id)?;
        Ok([self.nodes[idx].rows, self.nodes[idx].cols])
    }

    /// Value of a `[1, 1]` tensor.
    pub fn scalar(&self, id: TensorId) -> Result<T> {
        let idx = self.check(id)?;
        let n = &self.nodes[idx];
        if n.rows != 1 || n.cols != 1 {
            return Err(Error::contract(format!(
                "scalar() on tensor of shape [{}, {}]",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    /// Gradient of `id` after `backward`; `None` if the node does not
    /// require grad or backward has not run.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        let idx = self.check(id).ok()?;
        self.grads[idx].as_deref()
    }

    pub fn all_finite(&self, id: TensorId) -> Result<bool> {
        let idx = self.check(id)?;
        Ok(self.nodes[idx].value.iter().all(|v| v.is_finite()))
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<(usize, usize, usize, usize)> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ar, ac) = self.shape_of(ai);
        let (br, bc) = self.shape_of(bi);
        if ar != br || ac != bc {
            return Err(Error::dim(format!(
                "{name}: [{ar}, {ac}] vs [{br}, {bc}]"
            )));
        }
        Ok((ai, bi, ar, ac))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (m, ka) = self.shape_of(ai);
        let (kb, p) = self.shape_of(bi);
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul: [{m}, {ka}] x [{kb}, {p}]"
            )));
        }
        let out = matmul_nn(&self.nodes[ai].value, &self.nodes[bi].value, m, ka, p);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, m, p, rg, Op::MatMul(ai, bi)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi, r, c) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<T> = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, r, c, rg, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi, r, c) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<T> = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, r, c, rg, Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi, r, c) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<T> = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, r, c, rg, Op::Mul(ai, bi)))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi, r, c) = self.binary_same_shape(a, b, "div")?;
        let out: Vec<T> = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, r, c, rg, Op::Div(ai, bi)))
    }

    /// `a[i][j] + row[0][j]` for every row `i`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let ri = self.check(row)?;
        let (n, d) = self.shape_of(ai);
        let (rr, rc) = self.shape_of(ri);
        if rr != 1 || rc != d {
            return Err(Error::dim(format!(
                "add_row: [{n}, {d}] with row [{rr}, {rc}]"
            )));
        }
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.nodes[ai].value[i * d + j] + self.nodes[ri].value[j]);
            }
        }
        let rg = self.rg(ai) || self.rg(ri);
        Ok(self.push(out, n, d, rg, Op::AddRow(ai, ri)))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> Result<TensorId> {
        let ai = self.check(a)?;
        let (r, c) = self.shape_of(ai);
        let out: Vec<T> = self.nodes[ai].value.iter().map(|&x| x * factor).collect();
        let rg = self.rg(ai);
        Ok(self.push(out, r, c, rg, Op::Scale(ai, factor)))
    }

    pub fn add_scalar(&mut self, a: TensorId, term: T) -> Result<TensorId> {
        let ai = self.check(a)?;
        let (r, c) = self.shape_of(ai);
        let out: Vec<T> = self.nodes[ai].value.iter().map(|&x| x + term).collect();
        let rg = self.rg(ai);
        Ok(self.push(out, r, c, rg, Op::AddScalar(ai, term)))
    }

    /// Exact Gaussian-error-linear unit `x * Phi(x)` evaluated through the
    /// error function (not the tanh approximation).
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let (r, c) = self.shape_of(ai);
        let out: Vec<T> = self.nodes[ai]
            .value
            .iter()
            .map(|&x| T::of_f64(gelu_f64(x.as_f64())))
            .collect();
        let rg = self.rg(ai);
        Ok(self.push(out, r, c, rg, Op::Gelu(ai)))
    }

    /// Elementwise square root. The derivative at exactly zero is infinite;
    /// inputs are expected to be positive.
    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let (r, c) = self.shape_of(ai);
        let out: Vec<T> = self.nodes[ai].value.iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(ai);
        Ok(self.push(out, r, c, rg, Op::Sqrt(ai)))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let (n, d) = self.shape_of(ai);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &self.nodes[ai].value[i * d..(i + 1) * d];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let sum = exps.iter().fold(T::zero(), |s, &v| s + v);
            out.extend(exps.iter().map(|&e| e / sum));
        }
        let rg = self.rg(ai);
        Ok(self.push(out, n, d, rg, Op::SoftmaxRows(ai)))
    }

    /// Per-row normalization to zero mean and unit variance (population
    /// variance, `eps` inside the square root), then `* gain + bias`.
    /// `gain` and `bias` are `[1, d]`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: T) -> Result<TensorId> {
        let xi = self.check(x)?;
        let gi = self.check(gain)?;
        let bi = self.check(bias)?;
        let (n, d) = self.shape_of(xi);
        for (name, idx) in [("gain", gi), ("bias", bi)] {
            let (r, c) = self.shape_of(idx);
            if r != 1 || c != d {
                return Err(Error::dim(format!(
                    "layer_norm {name}: expected [1, {d}], got [{r}, {c}]"
                )));
            }
        }
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &self.nodes[xi].value[i * d..(i + 1) * d];
            let (mean, inv) = row_norm_stats(row, eps);
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                out.push(xhat * self.nodes[gi].value[j] + self.nodes[bi].value[j]);
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            out,
            n,
            d,
            rg,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                eps,
            },
        ))
    }

    /// `out[j] = x[indices[j]]`. Duplicate indices are allowed; their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        if indices.is_empty() {
            return Err(Error::arg("gather_rows: empty index list".to_string()));
        }
        for &i in indices {
            if i >= n {
                return Err(Error::index(format!("gather_rows: row {i} of {n}")));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.nodes[xi].value[i * d..(i + 1) * d]);
        }
        let rg = self.rg(xi);
        Ok(self.push(out, indices.len(), d, rg, Op::GatherRows(xi, indices.to_vec())))
    }

    /// `out[perm[j]] = x[j]`; `perm` must be a permutation of `0..rows`.
    /// Inverse of `gather_rows` with the same index list.
    pub fn scatter_rows(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        if perm.len() != n {
            return Err(Error::arg(format!(
                "scatter_rows: permutation of length {} for {} rows",
                perm.len(),
                n
            )));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n {
                return Err(Error::arg(format!("scatter_rows: index {p} of {n}")));
            }
            if seen[p] {
                return Err(Error::arg(format!("scatter_rows: duplicate index {p}")));
            }
            seen[p] = true;
        }
        let mut out = vec![T::zero(); n * d];
        for (j, &p) in perm.iter().enumerate() {
            out[p * d..(p + 1) * d].copy_from_slice(&self.nodes[xi].value[j * d..(j + 1) * d]);
        }
        let rg = self.rg(xi);
        Ok(self.push(out, n, d, rg, Op::ScatterRows(xi, perm.to_vec())))
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ar, ac) = self.shape_of(ai);
        let (br, bc) = self.shape_of(bi);
        if ac != bc {
            return Err(Error::dim(format!(
                "concat_rows: widths {ac} vs {bc}"
            )));
        }
        let mut out = Vec::with_capacity((ar + br) * ac);
        out.extend_from_slice(&self.nodes[ai].value);
        out.extend_from_slice(&self.nodes[bi].value);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, ar + br, ac, rg, Op::ConcatRows(ai, bi)))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (ar, ac) = self.shape_of(ai);
        let (br, bc) = self.shape_of(bi);
        if ar != br {
            return Err(Error::dim(format!(
                "concat_cols: heights {ar} vs {br}"
            )));
        }
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&self.nodes[ai].value[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&self.nodes[bi].value[i * bc..(i + 1) * bc]);
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, ar, ac + bc, rg, Op::ConcatCols(ai, bi)))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        if len == 0 || start + len > d {
            return Err(Error::index(format!(
                "slice_cols: columns {start}..{} of {d}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&self.nodes[xi].value[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(xi);
        Ok(self.push(out, n, len, rg, Op::SliceCols { x: xi, start, len }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = self.nodes[xi].value[i * d + j];
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(out, d, n, rg, Op::Transpose(xi)))
    }

    /// Reinterpret the same row-major data with a new shape.
    pub fn reshape(&mut self, x: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        if rows == 0 || cols == 0 || rows * cols != n * d {
            return Err(Error::dim(format!(
                "reshape: [{n}, {d}] to [{rows}, {cols}]"
            )));
        }
        let out = self.nodes[xi].value.clone();
        let rg = self.rg(xi);
        Ok(self.push(out, rows, cols, rg, Op::Reshape(xi)))
    }

    pub fn repeat_row(&mut self, row: TensorId, count: usize) -> Result<TensorId> {
        let ri = self.check(row)?;
        let (r, d) = self.shape_of(ri);
        if r != 1 {
            return Err(Error::dim(format!("repeat_row: input has {r} rows")));
        }
        if count == 0 {
            return Err(Error::arg("repeat_row: count must be positive".to_string()));
        }
        let mut out = Vec::with_capacity(count * d);
        for _ in 0..count {
            out.extend_from_slice(&self.nodes[ri].value);
        }
        let rg = self.rg(ri);
        Ok(self.push(out, count, d, rg, Op::RepeatRow(ri, count)))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let sum = self.nodes[xi].value.iter().fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(xi);
        Ok(self.push(vec![sum], 1, 1, rg, Op::SumAll(xi)))
    }

    /// `[n, d] -> [n, 1]`, each output row the sum of the input row.
    pub fn row_sum(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(
                self.nodes[xi].value[i * d..(i + 1) * d]
                    .iter()
                    .fold(T::zero(), |s, &v| s + v),
            );
        }
        let rg = self.rg(xi);
        Ok(self.push(out, n, 1, rg, Op::RowSum(xi)))
    }

    /// Column-wise max over consecutive groups of `group` rows. Ties pick
    /// the lowest row so the subgradient choice is deterministic.
    pub fn max_pool_rows(&mut self, x: TensorId, group: usize) -> Result<TensorId> {
        let xi = self.check(x)?;
        let (n, d) = self.shape_of(xi);
        if group == 0 || n % group != 0 {
            return Err(Error::arg(format!(
                "max_pool_rows: group {group} does not divide {n} rows"
            )));
        }
        let gout = n / group;
        let mut out = Vec::with_capacity(gout * d);
        let mut argmax = Vec::with_capacity(gout * d);
        for g in 0..gout {
            for j in 0..d {
                let mut best = g * group;
                let mut bestv = self.nodes[xi].value[best * d + j];
                for i in g * group + 1..(g + 1) * group {
                    let v = self.nodes[xi].value[i * d + j];
                    if v > bestv {
                        bestv = v;
                        best = i;
                    }
                }
                out.push(bestv);
                argmax.push(best);
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(out, gout, d, rg, Op::MaxPoolRows { x: xi, argmax }))
    }

    /// Mean over rows of the negative log-likelihood of `targets` under
    /// row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let li = self.check(logits)?;
        let (n, c) = self.shape_of(li);
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= c {
                return Err(Error::index(format!("cross_entropy: class {t} of {c}")));
            }
        }
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.nodes[li].value[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mx).exp())
                .ln();
            total = total + (lse - (row[t] - mx));
        }
        let loss = total / T::from_usize(n).unwrap();
        let rg = self.rg(li);
        Ok(self.push(
            vec![loss],
            1,
            1,
            rg,
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Runs at most once per tape;
    /// gradients for `requires_grad` nodes are retrievable via
    /// [`Tape::grad`] afterwards, and parameter gradients can be pushed back
    /// into a store with [`Tape::apply_param_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; build a fresh tape per step".to_string(),
            ));
        }
        let (r, c) = self.shape_of(li);
        if r != 1 || c != 1 {
            return Err(Error::contract(format!(
                "backward requires a [1, 1] loss, got [{r}, {c}]"
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::contract(
                "loss does not depend on any differentiable leaf".to_string(),
            ));
        }
        self.backward_done = true;
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                self.grads[idx] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads[li].as_mut().unwrap()[0] = T::one();

        for idx in (0..=li).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            // Inputs always have smaller indices, so split lets us read the
            // output gradient while mutating input gradients.
            let (head, tail) = self.grads.split_at_mut(idx);
            let g = match tail[0].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            let add_to = |buf: &mut Option<Vec<T>>, f: &mut dyn FnMut(&mut [T])| {
                if let Some(b) = buf.as_mut() {
                    f(b);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let p = self.nodes[*b].cols;
                    if self.nodes[*a].requires_grad {
                        let bv = &self.nodes[*b].value;
                        add_to(&mut head[*a], &mut |da| {
                            for i in 0..m {
                                for l in 0..p {
                                    let gv = g[i * p + l];
                                    for j in 0..k {
                                        da[i * k + j] = da[i * k + j] + gv * bv[j * p + l];
                                    }
                                }
                            }
                        });
                    }
                    if self.nodes[*b].requires_grad {
                        let av = &self.nodes[*a].value;
                        add_to(&mut head[*b], &mut |db| {
                            for i in 0..m {
                                for j in 0..k {
                                    let av_ = av[i * k + j];
                                    for l in 0..p {
                                        db[j * p + l] = db[j * p + l] + av_ * g[i * p + l];
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    add_to(&mut head[*a], &mut |da| {
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d = *d + gv;
                        }
                    });
                    add_to(&mut head[*b], &mut |db| {
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d = *d + gv;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    add_to(&mut head[*a], &mut |da| {
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d = *d + gv;
                        }
                    });
                    add_to(&mut head[*b], &mut |db| {
                        for (d, &gv) in db.iter_mut().zip(&g) {
                            *d = *d - gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let bv = &self.nodes[*b].value;
                        add_to(&mut head[*a], &mut |da| {
                            for i in 0..da.len() {
                                da[i] = da[i] + g[i] * bv[i];
                            }
                        });
                    }
                    if self.nodes[*b].requires_grad {
                        let av = &self.nodes[*a].value;
                        add_to(&mut head[*b], &mut |db| {
                            for i in 0..db.len() {
                                db[i] = db[i] + g[i] * av[i];
                            }
                        });
                    }
                }
                Op::Div(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if self.nodes[*a].requires_grad {
                        add_to(&mut head[*a], &mut |da| {
                            for i in 0..da.len() {
                                da[i] = da[i] + g[i] / bv[i];
                            }
                        });
                    }
                    if self.nodes[*b].requires_grad {
                        add_to(&mut head[*b], &mut |db| {
                            for i in 0..db.len() {
                                db[i] = db[i] - g[i] * av[i] / (bv[i] * bv[i]);
                            }
                        });
                    }
                }
                Op::AddRow(a, row) => {
                    let d = self.nodes[idx].cols;
                    let n = self.nodes[idx].rows;
                    add_to(&mut head[*a], &mut |da| {
                        for (dv, &gv) in da.iter_mut().zip(&g) {
                            *dv = *dv + gv;
                        }
                    });
                    add_to(&mut head[*row], &mut |dr| {
                        for i in 0..n {
                            for j in 0..d {
                                dr[j] = dr[j] + g[i * d + j];
                            }
                        }
                    });
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    add_to(&mut head[*a], &mut |da| {
                        for i in 0..da.len() {
                            da[i] = da[i] + g[i] * f;
                        }
                    });
                }
                Op::AddScalar(a, _) => {
                    add_to(&mut head[*a], &mut |da| {
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d = *d + gv;
                        }
                    });
                }
                Op::Gelu(a) => {
                    let av = &self.nodes[*a].value;
                    add_to(&mut head[*a], &mut |da| {
                        for i in 0..da.len() {
                            let d = T::of_f64(gelu_grad_f64(av[i].as_f64()));
                            da[i] = da[i] + g[i] * d;
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let yv = &self.nodes[idx].value;
                    add_to(&mut head[*a], &mut |da| {
                        let two = T::of_f64(2.0);
                        for i in 0..da.len() {
                            da[i] = da[i] + g[i] / (two * yv[i]);
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let (n, d) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let sv = &self.nodes[idx].value;
                    add_to(&mut head[*a], &mut |da| {
                        for i in 0..n {
                            let s = &sv[i * d..(i + 1) * d];
                            let gr = &g[i * d..(i + 1) * d];
                            let dot = s
                                .iter()
                                .zip(gr)
                                .fold(T::zero(), |acc, (&si, &gi)| acc + si * gi);
                            for j in 0..d {
                                da[i * d + j] = da[i * d + j] + s[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (n, d) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let eps = *eps;
                    let dinv = T::from_usize(d).unwrap().recip();
                    if self.nodes[*x].requires_grad {
                        add_to(&mut head[*x], &mut |dx| {
                            for i in 0..n {
                                let row = &xv[i * d..(i + 1) * d];
                                let (mean, inv) = row_norm_stats(row, eps);
                                let gr = &g[i * d..(i + 1) * d];
                                let mut sum_dxh = T::zero();
                                let mut sum_dxh_xh = T::zero();
                                for j in 0..d {
                                    let xhat = (row[j] - mean) * inv;
                                    let dxh = gr[j] * gv[j];
                                    sum_dxh = sum_dxh + dxh;
                                    sum_dxh_xh = sum_dxh_xh + dxh * xhat;
                                }
                                for j in 0..d {
                                    let xhat = (row[j] - mean) * inv;
                                    let dxh = gr[j] * gv[j];
                                    dx[i * d + j] = dx[i * d + j]
                                        + inv * (dxh - sum_dxh * dinv - xhat * sum_dxh_xh * dinv);
                                }
                            }
                        });
                    }
                    if self.nodes[*gain].requires_grad {
                        add_to(&mut head[*gain], &mut |dg| {
                            for i in 0..n {
                                let row = &xv[i * d..(i + 1) * d];
                                let (mean, inv) = row_norm_stats(row, eps);
                                for j in 0..d {
                                    let xhat = (row[j] - mean) * inv;
                                    dg[j] = dg[j] + g[i * d + j] * xhat;
                                }
                            }
                        });
                    }
                    if self.nodes[*bias].requires_grad {
                        add_to(&mut head[*bias], &mut |db| {
                            for i in 0..n {
                                for j in 0..d {
                                    db[j] = db[j] + g[i * d + j];
                                }
                            }
                        });
                    }
                }
                Op::GatherRows(x, indices) => {
                    let d = self.nodes[idx].cols;
                    add_to(&mut head[*x], &mut |dx| {
                        for (j, &src) in indices.iter().enumerate() {
                            for col in 0..d {
                                dx[src * d + col] = dx[src * d + col] + g[j * d + col];
                            }
                        }
                    });
                }
                Op::ScatterRows(x, perm) => {
                    let d = self.nodes[idx].cols;
                    add_to(&mut head[*x], &mut |dx| {
                        for (j, &p) in perm.iter().enumerate() {
                            for col in 0..d {
                                dx[j * d + col] = dx[j * d + col] + g[p * d + col];
                            }
                        }
                    });
                }
                Op::ConcatRows(a, b) => {
                    let alen = self.nodes[*a].value.len();
                    add_to(&mut head[*a], &mut |da| {
                        for i in 0..alen {
                            da[i] = da[i] + g[i];
                        }
                    });
                    add_to(&mut head[*b], &mut |db| {
                        for i in 0..db.len() {
                            db[i] = db[i] + g[alen + i];
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let n = self.nodes[idx].rows;
                    let ac = self.nodes[*a].cols;
                    let bc = self.nodes[*b].cols;
                    add_to(&mut head[*a], &mut |da| {
                        for i in 0..n {
                            for j in 0..ac {
                                da[i * ac + j] = da[i * ac + j] + g[i * (ac + bc) + j];
                            }
                        }
                    });
                    add_to(&mut head[*b], &mut |db| {
                        for i in 0..n {
                            for j in 0..bc {
                                db[i * bc + j] = db[i * bc + j] + g[i * (ac + bc) + ac + j];
                            }
                        }
                    });
                }
                Op::SliceCols { x, start, len } => {
                    let d = self.nodes[*x].cols;
                    let n = self.nodes[*x].rows;
                    let (start, len) = (*start, *len);
                    add_to(&mut head[*x], &mut |dx| {
                        for i in 0..n {
                            for j in 0..len {
                                dx[i * d + start + j] = dx[i * d + start + j] + g[i * len + j];
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (n, d) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    add_to(&mut head[*x], &mut |dx| {
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = dx[i * d + j] + g[j * n + i];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    add_to(&mut head[*x], &mut |dx| {
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d = *d + gv;
                        }
                    });
                }
                Op::RepeatRow(row, count) => {
                    let d = self.nodes[*row].cols;
                    let count = *count;
                    add_to(&mut head[*row], &mut |dr| {
                        for i in 0..count {
                            for j in 0..d {
                                dr[j] = dr[j] + g[i * d + j];
                            }
                        }
                    });
                }
                Op::SumAll(x) => {
                    add_to(&mut head[*x], &mut |dx| {
                        for d in dx.iter_mut() {
                            *d = *d + g[0];
                        }
                    });
                }
                Op::RowSum(x) => {
                    let d = self.nodes[*x].cols;
                    let n = self.nodes[*x].rows;
                    add_to(&mut head[*x], &mut |dx| {
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = dx[i * d + j] + g[i];
                            }
                        }
                    });
                }
                Op::MaxPoolRows { x, argmax } => {
                    let d = self.nodes[idx].cols;
                    add_to(&mut head[*x], &mut |dx| {
                        for (o, &src) in argmax.iter().enumerate() {
                            let col = o % d;
                            dx[src * d + col] = dx[src * d + col] + g[o];
                        }
                    });
                }
                Op::CrossEntropy { logits, targets } => {
                    let (n, c) = (self.nodes[*logits].rows, self.nodes[*logits].cols);
                    let lv = &self.nodes[*logits].value;
                    let ninv = T::from_usize(n).unwrap().recip();
                    add_to(&mut head[*logits], &mut |dl| {
                        for (i, &t) in targets.iter().enumerate() {
                            let row = &lv[i * c..(i + 1) * c];
                            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                            let sum = row.iter().fold(T::zero(), |s, &v| s + (v - mx).exp());
                            for j in 0..c {
                                let p = (row[j] - mx).exp() / sum;
                                let ind = if j == t { T::one() } else { T::zero() };
                                dl[i * c + j] = dl[i * c + j] + g[0] * (p - ind) * ninv;
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Add the gradients of bound parameter leaves into the store's grad
    /// buffers. Buffers accumulate across calls; the optimizer (or caller)
    /// zeroes them between steps.
    pub fn apply_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        if !self.backward_done {
            return Err(Error::contract(
                "apply_param_grads before backward".to_string(),
            ));
        }
        for &(node_idx, store_id, pidx) in &self.bindings {
            if store_id != store.id {
                continue;
            }
            if let Some(g) = self.grads[node_idx].as_ref() {
                let p = store.get_mut(pidx)?;
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst = *dst + src;
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_norm_stats<T: Element>(row: &[T], eps: T) -> (T, T) {
    let d = T::from_usize(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / d;
    let var = row
        .iter()
        .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
        / d;
    (mean, (var + eps).sqrt().recip())
}

/// Plain `[m, k] x [k, p]` matrix product, ikj loop order.
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..p {
                out[i * p + j] = out[i * p + j] + av * b[l * p + j];
            }
        }
    }
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu_f64(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    x * phi
}

fn gelu_grad_f64(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    phi + x * pdf
}

/// One named parameter: value, persistent gradient buffer, and whether the
/// optimizer's weight decay skips it.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Vec<T>,
    pub rows: usize,
    pub cols: usize,
    pub grad: Vec<T>,
    pub decay_exempt: bool,
}

/// Ordered, name-addressable parameter collection. Iteration order is
/// insertion order, which keeps optimizer updates and checkpoint layout
/// deterministic.
pub struct ParamStore<T: Element> {
    id: u64,
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Vec<T>,
        rows: usize,
        cols: usize,
        decay_exempt: bool,
    ) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter name {name}")));
        }
        if rows == 0 || cols == 0 || rows * cols != value.len() {
            return Err(Error::dim(format!(
                "parameter {name}: shape [{rows}, {cols}] with {} values",
                value.len()
            )));
        }
        let grad = vec![T::zero(); value.len()];
        self.params.push(Param {
            name: name.clone(),
            value,
            rows,
            cols,
            grad,
            decay_exempt,
        });
        let idx = self.params.len() - 1;
        self.by_name.insert(name, idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&Param<T>> {
        self.params
            .get(index)
            .ok_or_else(|| Error::index(format!("parameter {index} of {}", self.params.len())))
    }

    pub fn get_mut(&mut self, index: usize) -> Result<&mut Param<T>> {
        let n = self.params.len();
        self.params
            .get_mut(index)
            .ok_or_else(|| Error::index(format!("parameter {index} of {n}")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<T>> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        self.get(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Deep copy under a fresh store identity (gradients zeroed), so tape
    /// bindings against the copy never alias the original.
    pub fn clone_fresh(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.grad.fill(T::zero());
                    q
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count restricted to names starting with `prefix`.
    pub fn scalar_count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
