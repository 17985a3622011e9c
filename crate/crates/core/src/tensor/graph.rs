use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU8, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Matrix-transformation counts keyed by scope label.
pub type OpCountReport = BTreeMap<String, u64>;

static CHECKED_DEFAULT: AtomicU8 = AtomicU8::new(0);

/// Whether new graphs scan every op output for NaN/Inf.
///
/// `ATRSEQ_CHECKED=1` (or `0`) wins; otherwise checked mode follows
/// `debug_assertions`, so test builds check and release builds do not.
pub fn checked_default() -> bool {
    match CHECKED_DEFAULT.load(Ordering::Relaxed) {
        1 => true,
        2 => false,
        _ => {
            let on = match std::env::var("ATRSEQ_CHECKED") {
                Ok(v) => v.trim() == "1",
                Err(_) => cfg!(debug_assertions),
            };
            CHECKED_DEFAULT.store(if on { 1 } else { 2 }, Ordering::Relaxed);
            on
        }
    }
}

pub fn set_checked_default(on: bool) {
    CHECKED_DEFAULT.store(if on { 1 } else { 2 }, Ordering::Relaxed);
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var, bcast: bool },
    Sub { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    BlendRows { mask: Vec<bool>, new: Var, old: Var },
    MaskedSoftmax { x: Var },
    Attend { alpha: Var, values: Vec<Var> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Sum(Var),
    Dropout { x: Var, keep: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Leaves may borrow their values (`'p`), so binding model parameters does
/// not copy them. The tape is consumed by [`Graph::backward`].
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    tracking: bool,
    checked: bool,
    matmuls: u64,
    scopes: OpCountReport,
    rng: ChaCha8Rng,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

fn dims(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| shape_err(op, format!("expected a matrix, got {:?}", t.shape())))
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
            checked: checked_default(),
            matmuls: 0,
            scopes: OpCountReport::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A graph that evaluates forward values only; `backward` is rejected.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.tracking = false;
        g
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Total matrix products issued on this graph.
    pub fn matmul_count(&self) -> u64 {
        self.matmuls
    }

    /// Runs `f`, charging every matmul it issues to `label`.
    pub fn scoped<R>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let before = self.matmuls;
        let out = f(self);
        *self.scopes.entry(label.to_string()).or_insert(0) += self.matmuls - before;
        out
    }

    pub fn op_counts(&self) -> &OpCountReport {
        &self.scopes
    }

    fn leaf(&mut self, value: Cow<'p, Tensor<T>>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: needs_grad && self.tracking });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf that borrows its value.
    pub fn param(&mut self, value: &'p Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// A trainable leaf that owns its value.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.tracking && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked {
            value.check_finite(name)?;
        }
        let op = if self.tracking { op } else { Op::Leaf };
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`. Weight matrices are stored
    /// `out × in`, so this is the product every layer uses.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = dims(self.value(a), "matmul")?;
        let (br, bc) = dims(self.value(b), "matmul")?;
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), k as isize, 1, self.value(b).data(), rsb, csb, T::zero(), &mut out);
        self.matmuls += 1;
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, transpose_b }, needs, "matmul")
    }

    /// Checks `b` against `a`: same shape, or a single row broadcast down `a`.
    fn broadcast_kind(&self, a: Var, b: Var, op: &'static str) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(false);
        }
        let (_, ac) = dims(ta, op)?;
        let (br, bc) = dims(tb, op)?;
        if br == 1 && bc == ac {
            Ok(true)
        } else {
            Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let bcast = self.broadcast_kind(a, b, name)?;
        let ta = self.value(a);
        let tb = self.value(b).data();
        let data: Vec<T> = if bcast {
            let c = tb.len();
            ta.data().iter().enumerate().map(|(i, &x)| f(x, tb[i % c])).collect()
        } else {
            ta.data().iter().zip(tb).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bcast))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bcast) = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Add { a, b, bcast }, needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bcast) = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Sub { a, b, bcast }, needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        self.push(v, Op::Mul { a, b, bcast }, needs, "mul")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(super::sigmoid);
        let needs = self.needs(&[x]);
        self.push(v, Op::Sigmoid(x), needs, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t.tanh());
        let needs = self.needs(&[x]);
        self.push(v, Op::Tanh(x), needs, "tanh")
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| T::one() - t);
        let needs = self.needs(&[x]);
        self.push(v, Op::OneMinus(x), needs, "one_minus")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|t| t * c);
        let needs = self.needs(&[x]);
        self.push(v, Op::Scale(x, c), needs, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(v, Op::Sum(x), needs, "sum")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let shapes = parts.iter().map(|&p| dims(self.value(p), "concat_cols")).collect::<Result<Vec<_>>>()?;
        let rows = shapes.first().map(|s| s.0).ok_or_else(|| shape_err("concat_cols", "no parts"))?;
        if shapes.iter().any(|s| s.0 != rows) {
            return Err(shape_err("concat_cols", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = shapes.iter().map(|s| s.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = self.needs(parts);
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), needs, "concat_cols")
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let shapes = parts.iter().map(|&p| dims(self.value(p), "concat_rows")).collect::<Result<Vec<_>>>()?;
        let cols = shapes.first().map(|s| s.1).ok_or_else(|| shape_err("concat_rows", "no parts"))?;
        if shapes.iter().any(|s| s.1 != cols) {
            return Err(shape_err("concat_rows", format!("column counts differ: {shapes:?}")));
        }
        let rows: usize = shapes.iter().map(|s| s.0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = self.needs(parts);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), needs, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims(self.value(x), "slice_cols")?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let src = self.value(x);
        let data = (0..rows).flat_map(|r| src.row(r)[start..start + len].iter().copied()).collect();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x, start }, needs, "slice_cols")
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = dims(self.value(table), "gather_rows")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} of a {rows}-row table")));
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let needs = self.needs(&[table]);
        self.push(Tensor::new(vec![ids.len(), cols], data)?, Op::GatherRows { table, ids: ids.to_vec() }, needs, "gather_rows")
    }

    /// Row-wise select: row `r` comes from `new` where `mask[r]`, else from `old`.
    pub fn blend_rows(&mut self, mask: &[bool], new: Var, old: Var) -> Result<Var> {
        let (tn, to) = (self.value(new), self.value(old));
        if tn.shape() != to.shape() || tn.rows() != mask.len() {
            return Err(shape_err("blend_rows", format!("{:?} / {:?} / mask {}", tn.shape(), to.shape(), mask.len())));
        }
        let data = (0..mask.len())
            .flat_map(|r| if mask[r] { tn.row(r) } else { to.row(r) }.iter().copied())
            .collect();
        let v = Tensor::new(tn.shape().to_vec(), data)?;
        let needs = self.needs(&[new, old]);
        self.push(v, Op::BlendRows { mask: mask.to_vec(), new, old }, needs, "blend_rows")
    }

    /// Row-wise softmax restricted to positions where `mask` is set
    /// (`mask` is row-major, same size as `x`); masked entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = dims(self.value(x), "masked_softmax")?;
        if mask.len() != rows * cols {
            return Err(shape_err("masked_softmax", format!("mask {} for {rows}x{cols}", mask.len())));
        }
        let src = self.value(x);
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let row = src.row(r);
            let max = row.iter().zip(m).filter(|(_, &on)| on).map(|(&v, _)| v).fold(None, |acc: Option<T>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
            let Some(max) = max else {
                return Err(Error::Contract(format!("softmax row {r} is fully masked")));
            };
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for j in 0..cols {
                if m[j] {
                    out[j] = (row[j] - max).exp();
                    total = total + out[j];
                }
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::MaskedSoftmax { x }, needs, "masked_softmax")
    }

    /// `out[b] = Σ_i alpha[b, i] · values[i][b]` for `alpha: B×n` and `n`
    /// value matrices of shape `B×k`.
    pub fn attend(&mut self, alpha: Var, values: &[Var]) -> Result<Var> {
        let (b, n) = dims(self.value(alpha), "attend")?;
        if n != values.len() || n == 0 {
            return Err(shape_err("attend", format!("{n} weights for {} values", values.len())));
        }
        let (vb, k) = dims(self.value(values[0]), "attend")?;
        for &v in values {
            if self.value(v).shape() != [vb, k] || vb != b {
                return Err(shape_err("attend", format!("value shape {:?}, batch {b}", self.value(v).shape())));
            }
        }
        let a = self.value(alpha);
        let mut data = vec![T::zero(); b * k];
        for (i, &v) in values.iter().enumerate() {
            let vt = self.value(v);
            for r in 0..b {
                let w = a.get2(r, i);
                for (o, &x) in data[r * k..(r + 1) * k].iter_mut().zip(vt.row(r)) {
                    *o = *o + w * x;
                }
            }
        }
        let mut parents = vec![alpha];
        parents.extend_from_slice(values);
        let needs = self.needs(&parents);
        self.push(Tensor::new(vec![b, k], data)?, Op::Attend { alpha, values: values.to_vec() }, needs, "attend")
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = dims(self.value(logits), "softmax_xent")?;
        if targets.len() != n || mask.len() != n {
            return Err(shape_err("softmax_xent", format!("{n} rows, {} targets, {} mask", targets.len(), mask.len())));
        }
        if let Some(bad) = targets.iter().zip(mask).find(|(&t, _)| t >= v) {
            return Err(Error::Index(format!("target {} with vocabulary {v}", bad.0)));
        }
        let lt = self.value(logits);
        let count = mask.iter().filter(|&&m| m).count();
        let mut probs = vec![T::zero(); n * v];
        let mut total = 0.0f64;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = lt.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z = z + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / z;
            }
            total += (z.ln() + max - row[targets[r]]).as_f64();
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(&[logits]);
        let op = Op::SoftmaxXent { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count };
        self.push(Tensor::scalar(T::from_f64(loss)), op, needs, "softmax_xent")
    }

    /// Inverted dropout driven by the graph's RNG; identity when not training.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let len = self.value(x).len();
        let keep: Vec<T> = (0..len).map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { scale }).collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let v = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        self.push(v, Op::Dropout { x, keep }, needs, "dropout")
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.tracking {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |p: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[p.0].needs_grad {
                    return;
                }
                let slot = grads[p.0].get_or_insert_with(|| vec![T::zero(); nodes[p.0].value.len()]);
                f(slot);
            };
            let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = ta.dims2()?;
                    let n = node.value.cols();
                    acc(*a, &mut |s| {
                        if *transpose_b {
                            // b: n×k, dA = G·B
                            T::gemm(m, n, k, &g, n as isize, 1, tb.data(), k as isize, 1, T::one(), s);
                        } else {
                            // b: k×n, dA = G·Bᵀ
                            T::gemm(m, n, k, &g, n as isize, 1, tb.data(), 1, n as isize, T::one(), s);
                        }
                    });
                    acc(*b, &mut |s| {
                        if *transpose_b {
                            // dB (n×k) = Gᵀ·A
                            T::gemm(n, m, k, &g, 1, n as isize, ta.data(), k as isize, 1, T::one(), s);
                        } else {
                            // dB (k×n) = Aᵀ·G
                            T::gemm(k, m, n, ta.data(), 1, k as isize, &g, n as isize, 1, T::one(), s);
                        }
                    });
                }
                Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, &x)| *s = *s + x));
                    let c = val(*b).len();
                    acc(*b, &mut |s| {
                        if *bcast {
                            for (j, &x) in g.iter().enumerate() {
                                s[j % c] = s[j % c] + sign * x;
                            }
                        } else {
                            s.iter_mut().zip(&g).for_each(|(s, &x)| *s = *s + sign * x);
                        }
                    });
                }
                Op::Mul { a, b, bcast } => {
                    let (ta, tb) = (val(*a).data(), val(*b).data());
                    let c = tb.len();
                    acc(*a, &mut |s| {
                        for (j, (s, &x)) in s.iter_mut().zip(&g).enumerate() {
                            let bj = if *bcast { tb[j % c] } else { tb[j] };
                            *s = *s + x * bj;
                        }
                    });
                    acc(*b, &mut |s| {
                        for (j, &x) in g.iter().enumerate() {
                            let t = if *bcast { j % c } else { j };
                            s[t] = s[t] + x * ta[j];
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for ((s, &gy), &yy) in s.iter_mut().zip(&g).zip(y) {
                            *s = *s + gy * yy * (T::one() - yy);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for ((s, &gy), &yy) in s.iter_mut().zip(&g).zip(y) {
                            *s = *s + gy * (T::one() - yy * yy);
                        }
                    });
                }
                Op::OneMinus(x) => acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(s, &x)| *s = *s - x)),
                Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(s, &x)| *s = *s + *c * x)),
                Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s = *s + g[0])),
                Op::ConcatCols(parts) => {
                    let (rows, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        acc(p, &mut |s| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                s[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, &x)| *s = *s + x);
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc(p, &mut |s| s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, &x)| *s = *s + x));
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, w) = node.value.dims2()?;
                    let cols = val(*x).cols();
                    acc(*x, &mut |s| {
                        for r in 0..rows {
                            let dst = &mut s[r * cols + start..r * cols + start + w];
                            dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(s, &x)| *s = *s + x);
                        }
                    });
                }
                Op::GatherRows { table, ids } => {
                    let cols = node.value.cols();
                    acc(*table, &mut |s| {
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut s[id * cols..(id + 1) * cols];
                            dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(s, &x)| *s = *s + x);
                        }
                    });
                }
                Op::BlendRows { mask, new, old } => {
                    let cols = node.value.cols();
                    for (target, keep) in [(*new, true), (*old, false)] {
                        acc(target, &mut |s| {
                            for (r, &m) in mask.iter().enumerate() {
                                if m == keep {
                                    let dst = &mut s[r * cols..(r + 1) * cols];
                                    dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(s, &x)| *s = *s + x);
                                }
                            }
                        });
                    }
                }
                Op::MaskedSoftmax { x } => {
                    let (rows, cols) = node.value.dims2()?;
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..cols {
                                s[r * cols + j] = s[r * cols + j] + yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Attend { alpha, values } => {
                    let ta = val(*alpha);
                    let (b, n) = ta.dims2()?;
                    let k = node.value.cols();
                    acc(*alpha, &mut |s| {
                        for (i, &v) in values.iter().enumerate() {
                            let tv = val(v);
                            for r in 0..b {
                                let dot: T = tv.row(r).iter().zip(&g[r * k..(r + 1) * k]).map(|(&a, &c)| a * c).sum();
                                s[r * n + i] = s[r * n + i] + dot;
                            }
                        }
                    });
                    for (i, &v) in values.iter().enumerate() {
                        acc(v, &mut |s| {
                            for r in 0..b {
                                let w = ta.get2(r, i);
                                let dst = &mut s[r * k..(r + 1) * k];
                                dst.iter_mut().zip(&g[r * k..(r + 1) * k]).for_each(|(s, &x)| *s = *s + w * x);
                            }
                        });
                    }
                }
                Op::SoftmaxXent { logits, targets, mask, probs, count } => {
                    if *count > 0 {
                        let v = val(*logits).cols();
                        let scale = g[0] / T::from_f64(*count as f64);
                        acc(*logits, &mut |s| {
                            for (r, &m) in mask.iter().enumerate() {
                                if !m {
                                    continue;
                                }
                                for j in 0..v {
                                    let onehot = if j == targets[r] { T::one() } else { T::zero() };
                                    s[r * v + j] = s[r * v + j] + scale * (probs[r * v + j] - onehot);
                                }
                            }
                        });
                    }
                }
                Op::Dropout { x, keep } => {
                    acc(*x, &mut |s| {
                        for ((s, &gy), &k) in s.iter_mut().zip(&g).zip(keep) {
                            *s = *s + gy * k;
                        }
                    });
                }
            }
        }

        // Tracked leaves the loss never reached get explicit zeros.
        for (i, node) in nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                out.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }
}
