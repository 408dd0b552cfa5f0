//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append nodes in execution order, so parents always precede children and
//! [`Tape::backward`] is a single reverse sweep. Reductions accumulate in a
//! fixed sequential order, which makes gradients bitwise reproducible.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, weights: Option<Var>, inv_std: Vec<T>, ratio: Vec<T>, count: T },
    Embedding { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    RepeatInterleave { x: Var, times: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<T>, probs: Vec<T> },
    CrossEntropyIds { logits: Var, ids: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to the leaves that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} received a non-finite input")))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn as_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.as_matrix(a, "matmul")?;
        let (br, bc) = self.as_matrix(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions {k} and {kb} disagree"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let bv = if trans_b {
            MatRef::transposed(self.value(b).data(), bc)
        } else {
            MatRef::row_major(self.value(b).data(), bc)
        };
        gemm(m, k, n, T::one(), MatRef::row_major(self.value(a).data(), k), bv, T::zero(), &mut out, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new_allow_empty(vec![m, n], out), rg, Op::MatMul { a, b, trans_b }))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new_allow_empty(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Scale(x, c)))
    }

    fn row_check(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(Error::Dimension(format!(
                "{what}: row vector of length {} against {c} columns",
                self.value(row).numel()
            )));
        }
        Ok(c)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row, "add_row")?;
        let r = self.value(row).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + r[i % c]).collect();
        let out = Tensor::new_allow_empty(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, rg, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check(x, row, "mul_row")?;
        let r = self.value(row).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * r[i % c]).collect();
        let out = Tensor::new_allow_empty(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, rg, Op::MulRow(x, row)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Gelu(x)))
    }

    /// Normalizes each row of `x` to zero mean and unit variance (no affine).
    ///
    /// With `weights`, the mean and variance are weighted averages over the
    /// columns. Weights in {0, 1} make the result on weight-1 columns equal
    /// to a plain layer norm over just those columns.
    pub fn layer_norm(&mut self, x: Var, weights: Option<Var>) -> Result<Var> {
        let (rows, d) = (self.value(x).rows(), self.value(x).cols());
        if let Some(w) = weights {
            self.row_check(x, w, "layer_norm")?;
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let w = weights.map(|w| self.value(w).data());
        let count = match w {
            Some(w) => {
                let mut n = T::zero();
                for &wi in w {
                    n += wi;
                }
                n
            }
            None => T::from_usize(d).expect("usize fits scalar"),
        };
        if count <= T::zero() {
            return Err(Error::Numeric("layer_norm weights sum to zero".into()));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        let mut ratio = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mut sum = T::zero();
            match w {
                Some(w) => {
                    for (&v, &wi) in row.iter().zip(w) {
                        sum += wi * v;
                    }
                }
                None => {
                    for &v in row {
                        sum += v;
                    }
                }
            }
            let mean = sum / count;
            let mut var = T::zero();
            match w {
                Some(w) => {
                    for (&v, &wi) in row.iter().zip(w) {
                        let c = v - mean;
                        var += wi * (c * c);
                    }
                }
                None => {
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                }
            }
            var /= count;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
            ratio.push(var / (var + eps));
        }
        let shape = self.value(x).shape().to_vec();
        let rg = match weights {
            Some(w) => self.rg(&[x, w]),
            None => self.rg(&[x]),
        };
        Ok(self.push(
            Tensor::new_allow_empty(shape, out),
            rg,
            Op::LayerNorm { x, weights, inv_std, ratio, count },
        ))
    }

    /// Gathers rows of `table` (shape `[n, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.as_matrix(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("id {bad} out of range for table of {n} rows")));
        }
        let out = self.value(table).select_rows(ids);
        let rg = self.rg(&[table]);
        debug_assert_eq!(out.shape(), &[ids.len(), d]);
        Ok(self.push(out, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dimension("concat: row counts differ".into()));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new_allow_empty(vec![rows, total], out), rg, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.value(x).cols();
        if start >= end || end > c {
            return Err(Error::Dimension(format!("slice {start}..{end} of {c} columns")));
        }
        let keep: Vec<usize> = (start..end).collect();
        let out = self.value(x).select_cols(&keep);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(acc), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(&[x]);
        let mean = acc / T::from_usize(n).expect("usize fits scalar");
        Ok(self.push(Tensor::scalar(mean), rg, Op::Mean(x)))
    }

    /// Repeats each element of a vector `times` times in place:
    /// `[a, b]` with 2 → `[a, a, b, b]`.
    pub fn repeat_interleave(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Dimension("repeat_interleave by zero".into()));
        }
        let v = self.value(x).data();
        let data: Vec<T> = v.iter().flat_map(|&e| std::iter::repeat_n(e, times)).collect();
        let n = data.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new_allow_empty(vec![n], data), rg, Op::RepeatInterleave { x, times }))
    }

    /// Row-wise softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        check_finite(self.value(x), "softmax_rows")?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new_allow_empty(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax(x)))
    }

    /// Mean over rows of `-Σ_i target_i · log softmax(logits)_i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Validation(format!(
                "cross_entropy: logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        check_finite(lv, "cross_entropy")?;
        let tol = T::from_f64_lossy(1e-4);
        let c = lv.cols();
        for (r, row) in targets.data().chunks(c).enumerate() {
            let mut s = T::zero();
            for &t in row {
                s += t;
            }
            if (s - T::one()).abs() > tol || row.iter().any(|&t| t < T::zero()) {
                return Err(Error::Validation(format!(
                    "cross_entropy: target row {r} is not a distribution (sum {s})"
                )));
            }
        }
        let rows = lv.rows();
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (prow, trow) in probs.chunks_mut(c).zip(targets.data().chunks(c)) {
            let lse = log_sum_exp(prow);
            let mut row_loss = T::zero();
            for (p, &t) in prow.iter_mut().zip(trow) {
                let logp = *p - lse;
                if t != T::zero() {
                    row_loss -= t * logp;
                }
                *p = logp.exp();
            }
            total += row_loss;
        }
        let loss = total / T::from_usize(rows).expect("usize fits scalar");
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, targets: targets.data().to_vec(), probs },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[id]`.
    pub fn cross_entropy_ids(&mut self, logits: Var, ids: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if ids.len() != rows {
            return Err(Error::Validation(format!(
                "cross_entropy_ids: {} ids for {rows} rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Error::Input(format!("target id {bad} out of range for {c} classes")));
        }
        check_finite(lv, "cross_entropy_ids")?;
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (prow, &id) in probs.chunks_mut(c).zip(ids) {
            let lse = log_sum_exp(prow);
            total += lse - prow[id];
            for p in prow.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let loss = total / T::from_usize(rows).expect("usize fits scalar");
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropyIds { logits, ids: ids.to_vec(), probs }))
    }

    /// Causal multi-head self-attention on packed projections.
    ///
    /// `q`, `k`, `v` have shape `[batch·seq, heads·head_dim]` with head `h`
    /// occupying columns `h·head_dim..(h+1)·head_dim`. Position `i` attends
    /// to positions `≤ i` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, width) = self.as_matrix(q, "attention")?;
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: [{rows}, {width}] incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let hd = width / heads;
        let scale = T::one() / T::from_usize(hd).expect("usize fits scalar").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let tt = seq * seq;
        let mut probs = vec![T::zero(); batch * heads * tt];
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * hd;
                let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                gemm(
                    seq,
                    hd,
                    seq,
                    scale,
                    MatRef { data: &qd[off..], row_stride: width, col_stride: 1 },
                    MatRef { data: &kd[off..], row_stride: 1, col_stride: width },
                    T::zero(),
                    p,
                    seq,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    for e in &mut row[i + 1..] {
                        *e = T::zero();
                    }
                }
                gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    MatRef::row_major(p, seq),
                    MatRef { data: &vd[off..], row_stride: width, col_stride: 1 },
                    T::zero(),
                    &mut out[off..],
                    width,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new_allow_empty(vec![rows, width], out),
            rg,
            Op::Attention { q, k, v, batch, seq, heads, probs },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: (0..n).map(|_| None).collect() });
        }
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new_allow_empty(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Runs `f` on the gradient buffer of `v` (zero-initialized on first use)
    /// if `v` takes part in differentiation.
    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(buf);
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = node.value.shape()[1];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bc = self.value(*b).cols();
                if *trans_b {
                    // c = a·bᵀ, b is n×k
                    self.acc(grads, *a, |ga| {
                        gemm(m, n, k, T::one(), MatRef::row_major(g, n), MatRef::row_major(bd, k), T::one(), ga, k)
                    });
                    self.acc(grads, *b, |gb| {
                        gemm(n, m, k, T::one(), MatRef::transposed(g, n), MatRef::row_major(ad, k), T::one(), gb, k)
                    });
                } else {
                    self.acc(grads, *a, |ga| {
                        gemm(m, n, k, T::one(), MatRef::row_major(g, n), MatRef::transposed(bd, bc), T::one(), ga, k)
                    });
                    self.acc(grads, *b, |gb| {
                        gemm(k, m, n, T::one(), MatRef::transposed(ad, k), MatRef::row_major(g, n), T::one(), gb, n)
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (o, &d) in gb.iter_mut().zip(g) {
                        *o -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o += d * *c;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let c = node.value.cols();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *row, |gr| {
                    for grow in g.chunks(c) {
                        add_into(gr, grow);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let c = node.value.cols();
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                self.acc(grads, *x, |gx| {
                    for (i, (o, &d)) in gx.iter_mut().zip(g).enumerate() {
                        *o += d * rv[i % c];
                    }
                });
                self.acc(grads, *row, |gr| {
                    for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((o, &d), &xe) in gr.iter_mut().zip(grow).zip(xrow) {
                            *o += d * xe;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let three_a = T::from_f64_lossy(3.0 * GELU_A);
                let half = T::from_f64_lossy(0.5);
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three_a * v * v);
                        *o += d * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::LayerNorm { x, weights, inv_std, ratio, count } => {
                let d = node.value.cols();
                let z = node.value.data();
                let w = weights.map(|w| self.value(w).data());
                let half = T::from_f64_lossy(0.5);
                // per-row Σ gz and Σ gz·z
                let sums: Vec<(T, T)> = g
                    .chunks(d)
                    .zip(z.chunks(d))
                    .map(|(gr, zr)| {
                        let (mut s, mut sz) = (T::zero(), T::zero());
                        for (&gv, &zv) in gr.iter().zip(zr) {
                            s += gv;
                            sz += gv * zv;
                        }
                        (s, sz)
                    })
                    .collect();
                self.acc(grads, *x, |gx| {
                    for r in 0..sums.len() {
                        let (s, sz) = sums[r];
                        let inv = inv_std[r];
                        for j in 0..d {
                            let wj = w.map_or(T::one(), |w| w[j]);
                            let idx = r * d + j;
                            gx[idx] +=
                                inv * (g[idx] - wj / *count * s - wj * z[idx] / *count * sz);
                        }
                    }
                });
                if let Some(wv) = weights {
                    self.acc(grads, *wv, |gw| {
                        for r in 0..sums.len() {
                            let (s, sz) = sums[r];
                            for j in 0..d {
                                let zj = z[r * d + j];
                                gw[j] -= (zj * s + half * (zj * zj - ratio[r]) * sz) / *count;
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for (grow, orow) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(grow, &orow[start..start + w]);
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                self.acc(grads, *x, |gx| {
                    for (grow, orow) in gx.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut grow[*start..*start + w], orow);
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).expect("usize fits scalar");
                self.acc(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::RepeatInterleave { x, times } => {
                self.acc(grads, *x, |gx| {
                    for (o, chunk) in gx.iter_mut().zip(g.chunks(*times)) {
                        for &d in chunk {
                            *o += d;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                self.acc(grads, *x, |gx| {
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let mut dot = T::zero();
                        for (&d, &p) in grow.iter().zip(yrow) {
                            dot += d * p;
                        }
                        for ((o, &d), &p) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += p * (d - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g[0] / T::from_usize(lv.rows()).expect("usize fits scalar");
                self.acc(grads, *logits, |gl| {
                    for ((orow, prow), trow) in gl.chunks_mut(c).zip(probs.chunks(c)).zip(targets.chunks(c)) {
                        let mut tsum = T::zero();
                        for &t in trow {
                            tsum += t;
                        }
                        for ((o, &p), &t) in orow.iter_mut().zip(prow).zip(trow) {
                            *o += scale * (p * tsum - t);
                        }
                    }
                });
            }
            Op::CrossEntropyIds { logits, ids, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g[0] / T::from_usize(lv.rows()).expect("usize fits scalar");
                self.acc(grads, *logits, |gl| {
                    for ((orow, prow), &id) in gl.chunks_mut(c).zip(probs.chunks(c)).zip(ids) {
                        for (o, &p) in orow.iter_mut().zip(prow) {
                            *o += scale * p;
                        }
                        orow[id] -= scale;
                    }
                });
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = self.value(q).cols();
        let hd = width / heads;
        let scale = T::one() / T::from_usize(hd).expect("usize fits scalar").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let rows = batch * seq;
        let tt = seq * seq;
        let mut dq = vec![T::zero(); rows * width];
        let mut dk = vec![T::zero(); rows * width];
        let mut dv = vec![T::zero(); rows * width];
        let mut ds = vec![T::zero(); tt];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * hd;
                let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                let dout = MatRef { data: &g[off..], row_stride: width, col_stride: 1 };
                // dP = dO · Vᵀ
                gemm(
                    seq,
                    hd,
                    seq,
                    T::one(),
                    dout,
                    MatRef { data: &vd[off..], row_stride: 1, col_stride: width },
                    T::zero(),
                    &mut ds,
                    seq,
                );
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut ds[i * seq..(i + 1) * seq];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        dot += prow[j] * drow[j];
                    }
                    for j in 0..seq {
                        drow[j] = if j <= i { prow[j] * (drow[j] - dot) * scale } else { T::zero() };
                    }
                }
                // dQ = dS · K, dK = dSᵀ · Q, dV = Pᵀ · dO
                gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    MatRef::row_major(&ds, seq),
                    MatRef { data: &kd[off..], row_stride: width, col_stride: 1 },
                    T::zero(),
                    &mut dq[off..],
                    width,
                );
                gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    MatRef::transposed(&ds, seq),
                    MatRef { data: &qd[off..], row_stride: width, col_stride: 1 },
                    T::zero(),
                    &mut dk[off..],
                    width,
                );
                gemm(
                    seq,
                    seq,
                    hd,
                    T::one(),
                    MatRef::transposed(p, seq),
                    dout,
                    T::zero(),
                    &mut dv[off..],
                    width,
                );
            }
        }
        self.acc(grads, q, |gq| add_into(gq, &dq));
        self.acc(grads, k, |gk| add_into(gk, &dk));
        self.acc(grads, v, |gv| add_into(gv, &dv));
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for &v in row {
        s += (v - m).exp();
    }
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
