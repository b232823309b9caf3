//! Tape of executed operations and the reverse sweep over it.
//!
//! Every operation pushes one node whose inputs already live on the tape,
//! so node order is a topological order and `backward` is a single pass
//! from the loss node down to index zero.

use std::borrow::Cow;
use std::sync::Arc;

use super::kernels::{self, gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// Position `i` sees positions `j <= i`.
    Causal,
    None,
}

impl MaskMode {
    pub fn is_causal(self) -> bool {
        matches!(self, MaskMode::Causal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Rms,
    Layer,
    /// No normalisation site at all.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    /// Exact Gaussian-CDF form.
    Gelu,
    /// `max(x, slope * x)` with `slope` in `[0, 1]`.
    LeakyRelu {
        slope: f64,
    },
}

/// `batch` sequences of `seq_len` tokens stacked along the row axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
}

impl SeqLayout {
    pub fn new(batch: usize, seq_len: usize) -> Self {
        SeqLayout { batch, seq_len }
    }

    pub fn single(seq_len: usize) -> Self {
        SeqLayout { batch: 1, seq_len }
    }

    pub fn rows(self) -> usize {
        self.batch * self.seq_len
    }
}

type Derivative<S> = Box<dyn Fn(S, S) -> S>;

enum Op<S: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, factor: S },
    ScaleBy { x: Var, s: Var },
    AddRow { x: Var, bias: Var },
    MulRow { x: Var, gain: Var },
    Normalise { x: Var, gain: Option<Var>, layer: bool, inv: Vec<S>, clamped: Vec<bool>, xhat: Tensor<S> },
    Activation { x: Var, kind: ActivationKind },
    Map { x: Var, deriv: Derivative<S> },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, denom: S, probs: Tensor<S> },
    Sum(Var),
    HeadScores { q: Var, k: Var, layout: SeqLayout, heads: usize, scale: S },
    SoftmaxRows { x: Var, seq_len: usize, mask: MaskMode },
    ShapeMix { a: Var, alpha: Var, beta: Var, gamma: Option<Var>, centering: Arc<Tensor<S>>, heads: usize },
    HeadMix { m: Var, v: Var, layout: SeqLayout, heads: usize },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Leaves may borrow their values (model parameters) for the lifetime `'a`.
pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn head_dim(op: &'static str, d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return shape_err(op, format!("width {d} not divisible by {heads} heads"));
    }
    Ok(d / heads)
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, inputs))
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor<S>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowing its value.
    pub fn constant(&mut self, value: &'a Tensor<S>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() {
            return shape_err("matmul", format!("operands must be matrices, got {:?} and {:?}", av.shape(), bv.shape()));
        }
        let a_view = View::dense(av.data(), av.rows(), av.cols()).t_if(ta);
        let b_view = View::dense(bv.data(), bv.rows(), bv.cols()).t_if(tb);
        if a_view.cols != b_view.rows {
            return shape_err(
                "matmul",
                format!("[{}x{}] · [{}x{}]: inner extents differ", a_view.rows, a_view.cols, b_view.rows, b_view.cols),
            );
        }
        let (m, n) = (a_view.rows, b_view.cols);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(S::one(), a_view, b_view, S::zero(), ViewMut::dense(out.data_mut(), m, n));
        self.push_checked("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push_checked("scale", out, Op::Scale { x, factor }, &[x])
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by", format!("factor must have one element, got {:?}", self.shape(s)));
        }
        let factor = self.value(s).data()[0];
        let out = self.value(x).map(|v| factor * v);
        self.push_checked("scale_by", out, Op::ScaleBy { x, s }, &[x, s])
    }

    fn row_vector_check(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.numel() != xv.cols() || !xv.is_matrix() {
            return shape_err(op, format!("row vector {:?} against matrix {:?}", vv.shape(), xv.shape()));
        }
        Ok(())
    }

    /// Adds `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_vector_check("add_row", x, bias)?;
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for r in 0..out.rows() {
            for (o, &bj) in out.row_mut(r).iter_mut().zip(b) {
                *o += bj;
            }
        }
        self.push_checked("add_row", out, Op::AddRow { x, bias }, &[x, bias])
    }

    /// Multiplies every row of `x` elementwise by `gain`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_vector_check("mul_row", x, gain)?;
        let mut out = self.value(x).clone();
        let g = self.value(gain).data();
        for r in 0..out.rows() {
            for (o, &gj) in out.row_mut(r).iter_mut().zip(g) {
                *o *= gj;
            }
        }
        self.push_checked("mul_row", out, Op::MulRow { x, gain }, &[x, gain])
    }

    /// Row-wise RMS or layer normalisation followed by an optional gain.
    ///
    /// The row scale is clamped below at `eps`, so rows with scale at or
    /// below `eps` are divided by `eps` instead.
    pub fn normalise(&mut self, x: Var, kind: NormKind, gain: Option<Var>, eps: S) -> Result<Var> {
        let layer = match kind {
            NormKind::Rms => false,
            NormKind::Layer => true,
            NormKind::None => return Ok(x),
        };
        if let Some(g) = gain {
            self.row_vector_check("normalise", x, g)?;
        }
        let xv = self.value(x);
        if !xv.is_matrix() {
            return shape_err("normalise", format!("expected matrix, got {:?}", xv.shape()));
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let n = S::of(cols as f64);
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut inv = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = if layer { row.iter().copied().sum::<S>() / n } else { S::zero() };
            let ms = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let scale = ms.sqrt();
            let (i, c) = if scale > eps { (S::one() / scale, false) } else { (S::one() / eps, true) };
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * i;
            }
            inv.push(i);
            clamped.push(c);
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g).data();
            for r in 0..rows {
                for (o, &gj) in out.row_mut(r).iter_mut().zip(gv) {
                    *o *= gj;
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(gain).collect();
        self.push_checked("normalise", out, Op::Normalise { x, gain, layer, inv, clamped, xhat }, &inputs)
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let out = match kind {
            ActivationKind::Relu => self.value(x).map(|v| if v >= S::zero() { v } else { S::zero() }),
            ActivationKind::Gelu => self.value(x).map(kernels::gelu),
            ActivationKind::LeakyRelu { slope } => {
                if !(0.0..=1.0).contains(&slope) {
                    return Err(Error::Config(format!("leaky relu slope {slope} outside [0, 1]")));
                }
                let s = S::of(slope);
                self.value(x).map(|v| if v >= S::zero() { v } else { s * v })
            }
        };
        self.push_checked("activation", out, Op::Activation { x, kind }, &[x])
    }

    /// Elementwise `f` with caller-supplied derivative `df(x, f(x))`.
    pub fn map(&mut self, x: Var, f: impl Fn(S) -> S, df: impl Fn(S, S) -> S + 'static) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push_checked("map", out, Op::Map { x, deriv: Box::new(df) }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().copied().sum();
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::of(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.scale(s, S::one() / n)
    }

    // ── language-model plumbing ─────────────────────────────────────

    /// Row lookup `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if !tv.is_matrix() {
            return shape_err("gather_rows", "table must be a matrix");
        }
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::OutOfRange { what: "embedding table", index: id, bound: v });
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push_checked("gather_rows", out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean next-token negative log-likelihood over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let denom = targets.len().max(1) as f64;
        self.cross_entropy_sum_over(logits, targets, S::of(denom))
    }

    /// Summed negative log-likelihood divided by an explicit `denom`.
    pub fn cross_entropy_sum_over(&mut self, logits: Var, targets: &[usize], denom: S) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || !lv.is_matrix() {
            return shape_err("cross_entropy", format!("logits {:?} vs {} targets", lv.shape(), targets.len()));
        }
        let v = lv.cols();
        let mut probs = Tensor::zeros(lv.shape());
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::OutOfRange { what: "vocabulary", index: t, bound: v });
            }
            let row = lv.row(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = Tensor::scalar(total / denom);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), denom, probs };
        self.push_checked("cross_entropy", loss, op, &[logits])
    }

    // ── attention ───────────────────────────────────────────────────

    /// Per-(sequence, head) logits `q_h k_hᵀ · scale`, stacked as
    /// `[batch·heads·T × T]` with block `(b, h)` at rows `(b·heads + h)·T`.
    pub fn head_scores(&mut self, q: Var, k: Var, layout: SeqLayout, heads: usize, scale: S) -> Result<Var> {
        self.same_shape("head_scores", q, k)?;
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.rows() != layout.rows() || !qv.is_matrix() {
            return shape_err("head_scores", format!("{:?} does not match layout {:?}", qv.shape(), layout));
        }
        let d = qv.cols();
        let dk = head_dim("head_scores", d, heads)?;
        let t = layout.seq_len;
        let mut out = Tensor::zeros(&[layout.batch * heads * t, t]);
        for b in 0..layout.batch {
            for h in 0..heads {
                let qa = View { data: qv.data(), offset: b * t * d + h * dk, rows: t, cols: dk, rs: d, cs: 1 };
                let ka = View { data: kv.data(), offset: b * t * d + h * dk, rows: t, cols: dk, rs: d, cs: 1 };
                let c = ViewMut { data: out.data_mut(), offset: (b * heads + h) * t * t, rows: t, cols: t, rs: t, cs: 1 };
                gemm(scale, qa, ka.t(), S::zero(), c);
            }
        }
        self.push_checked("head_scores", out, Op::HeadScores { q, k, layout, heads, scale }, &[q, k])
    }

    /// Row softmax where row `r` sits at position `r % seq_len`; under the
    /// causal mask columns beyond that position are exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, seq_len: usize, mask: MaskMode) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() || xv.cols() != seq_len || seq_len == 0 || !xv.rows().is_multiple_of(seq_len) {
            return shape_err("masked_softmax_rows", format!("{:?} is not a stack of {seq_len}x{seq_len} blocks", xv.shape()));
        }
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..xv.rows() {
            let visible = kernels::visible_cols(r % seq_len, seq_len, mask.is_causal());
            kernels::softmax_row(xv.row(r), visible, out.row_mut(r));
        }
        self.push_checked("masked_softmax_rows", out, Op::SoftmaxRows { x, seq_len, mask }, &[x])
    }

    /// Per-head `α_h·I + (β_h·A − γ_h·C)`; without `gamma` the centering
    /// term is dropped.
    pub fn shape_mix(&mut self, a: Var, alpha: Var, beta: Var, gamma: Option<Var>, centering: Arc<Tensor<S>>, heads: usize) -> Result<Var> {
        let av = self.value(a);
        let t = av.cols();
        if centering.shape() != [t, t] || t == 0 || !av.rows().is_multiple_of(t * heads.max(1)) {
            return shape_err("shape_mix", format!("attention {:?} vs centering {:?}", av.shape(), centering.shape()));
        }
        for s in std::iter::once(alpha).chain(std::iter::once(beta)).chain(gamma) {
            if self.value(s).numel() != heads {
                return shape_err("shape_mix", format!("per-head scalars need {heads} entries, got {:?}", self.shape(s)));
            }
        }
        let al = self.value(alpha).data();
        let be = self.value(beta).data();
        let ga = gamma.map(|g| self.value(g).data());
        let mut out = Tensor::zeros(av.shape());
        for r in 0..av.rows() {
            let h = (r / t) % heads;
            let i = r % t;
            let arow = av.row(r);
            let crow = centering.row(i);
            let orow = out.row_mut(r);
            match ga {
                Some(ga) => {
                    for j in 0..t {
                        orow[j] = be[h] * arow[j] - ga[h] * crow[j];
                    }
                }
                None => {
                    for j in 0..t {
                        orow[j] = be[h] * arow[j];
                    }
                }
            }
            orow[i] = al[h] + orow[i];
        }
        let inputs: Vec<Var> = [a, alpha, beta].into_iter().chain(gamma).collect();
        self.push_checked("shape_mix", out, Op::ShapeMix { a, alpha, beta, gamma, centering, heads }, &inputs)
    }

    /// Applies each `(b, h)` mixing block to the matching column block of
    /// `v`; the head outputs land side by side (concatenation).
    pub fn head_mix(&mut self, m: Var, v: Var, layout: SeqLayout, heads: usize) -> Result<Var> {
        let (mv, vv) = (self.value(m), self.value(v));
        let t = layout.seq_len;
        if !vv.is_matrix() || vv.rows() != layout.rows() || mv.shape() != [layout.batch * heads * t, t] {
            return shape_err("head_mix", format!("mixing {:?} vs values {:?} for {:?}", mv.shape(), vv.shape(), layout));
        }
        let d = vv.cols();
        let dk = head_dim("head_mix", d, heads)?;
        let mut out = Tensor::zeros(vv.shape());
        for b in 0..layout.batch {
            for h in 0..heads {
                let ma = View { data: mv.data(), offset: (b * heads + h) * t * t, rows: t, cols: t, rs: t, cs: 1 };
                let va = View { data: vv.data(), offset: b * t * d + h * dk, rows: t, cols: dk, rs: d, cs: 1 };
                let c = ViewMut { data: out.data_mut(), offset: b * t * d + h * dk, rows: t, cols: dk, rs: d, cs: 1 };
                gemm(S::one(), ma, va, S::zero(), c);
            }
        }
        self.push_checked("head_mix", out, Op::HeadMix { m, v, layout, heads }, &[m, v])
    }

    // ── reverse sweep ───────────────────────────────────────────────

    /// Reverse-mode derivatives of the scalar `loss` with respect to every
    /// leaf that requires a gradient. Leaves off the path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(&node.op, &node.value, &g, &mut grads);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> &'g mut Tensor<S> {
        let shape = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn backprop(&self, op: &Op<S>, out: &Tensor<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let a_view = View::dense(av.data(), av.rows(), av.cols()).t_if(*ta);
                let b_view = View::dense(bv.data(), bv.rows(), bv.cols()).t_if(*tb);
                let g_view = View::dense(g.data(), a_view.rows, b_view.cols);
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    let (r, c) = (da.rows(), da.cols());
                    gemm(S::one(), g_view, b_view.t(), S::one(), ViewMut::dense(da.data_mut(), r, c).t_if(*ta));
                }
                if self.needs(*b) {
                    let db = self.slot(grads, *b);
                    let (r, c) = (db.rows(), db.cols());
                    gemm(S::one(), a_view.t(), g_view, S::one(), ViewMut::dense(db.data_mut(), r, c).t_if(*tb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -S::one() } else { S::one() };
                if self.needs(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.needs(*b) {
                    for (d, &gi) in self.slot(grads, *b).data_mut().iter_mut().zip(g.data()) {
                        *d += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.needs(x) {
                        let other = self.value(y).data();
                        for ((d, &gi), &o) in self.slot(grads, x).data_mut().iter_mut().zip(g.data()).zip(other) {
                            *d += gi * o;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    for (d, &gi) in self.slot(grads, *x).data_mut().iter_mut().zip(g.data()) {
                        *d += *factor * gi;
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let factor = self.value(*s).data()[0];
                if self.needs(*x) {
                    for (d, &gi) in self.slot(grads, *x).data_mut().iter_mut().zip(g.data()) {
                        *d += factor * gi;
                    }
                }
                if self.needs(*s) {
                    let dot: S = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    self.slot(grads, *s).data_mut()[0] += dot;
                }
            }
            Op::AddRow { x, bias } => {
                if self.needs(*x) {
                    self.slot(grads, *x).add_assign(g);
                }
                if self.needs(*bias) {
                    let db = self.slot(grads, *bias);
                    for r in 0..g.rows() {
                        for (d, &gi) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MulRow { x, gain } => {
                if self.needs(*x) {
                    let gv = self.value(*gain).data();
                    let dx = self.slot(grads, *x);
                    for r in 0..g.rows() {
                        for ((d, &gi), &w) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(gv) {
                            *d += gi * w;
                        }
                    }
                }
                if self.needs(*gain) {
                    let xv = self.value(*x);
                    let dg = self.slot(grads, *gain);
                    for r in 0..g.rows() {
                        for ((d, &gi), &xi) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *d += gi * xi;
                        }
                    }
                }
            }
            Op::Normalise { x, gain, layer, inv, clamped, xhat } => {
                let (rows, cols) = (xhat.rows(), xhat.cols());
                let n = S::of(cols as f64);
                let gain_vals = gain.map(|gv| self.value(gv).data().to_vec());
                if let Some(gv) = gain {
                    if self.needs(*gv) {
                        let dg = self.slot(grads, *gv);
                        for r in 0..rows {
                            for ((d, &gi), &h) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *d += gi * h;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    let mut dy = vec![S::zero(); cols];
                    for r in 0..rows {
                        for (j, d) in dy.iter_mut().enumerate() {
                            *d = match &gain_vals {
                                Some(w) => g.row(r)[j] * w[j],
                                None => g.row(r)[j],
                            };
                        }
                        let h = xhat.row(r);
                        let mean_dy = if *layer { dy.iter().copied().sum::<S>() / n } else { S::zero() };
                        let mean_dyh = if clamped[r] { S::zero() } else { dy.iter().zip(h).map(|(&a, &b)| a * b).sum::<S>() / n };
                        for ((d, &dyj), &hj) in dx.row_mut(r).iter_mut().zip(&dy).zip(h) {
                            *d += inv[r] * (dyj - mean_dy - hj * mean_dyh);
                        }
                    }
                }
            }
            Op::Activation { x, kind } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = self.slot(grads, *x);
                    let slope = match kind {
                        ActivationKind::Relu => S::zero(),
                        ActivationKind::LeakyRelu { slope } => S::of(*slope),
                        ActivationKind::Gelu => S::zero(),
                    };
                    for ((d, &gi), &xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        let local = match kind {
                            ActivationKind::Gelu => kernels::gelu_grad(xi),
                            _ if xi >= S::zero() => S::one(),
                            _ => slope,
                        };
                        *d += gi * local;
                    }
                }
            }
            Op::Map { x, deriv } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = self.slot(grads, *x);
                    for (((d, &gi), &xi), &yi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv).zip(out.data()) {
                        *d += gi * deriv(xi, yi);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let dt = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &gi) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, denom, probs } => {
                if self.needs(*logits) {
                    let scale = g.data()[0] / *denom;
                    let dl = self.slot(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        for (d, &p) in row.iter_mut().zip(probs.row(r)) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gi = g.data()[0];
                    for d in self.slot(grads, *x).data_mut() {
                        *d += gi;
                    }
                }
            }
            Op::HeadScores { q, k, layout, heads, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let d = qv.cols();
                let dk = d / heads;
                let t = layout.seq_len;
                // dQ = s·G·K and dK = s·Gᵀ·Q, block by block.
                for (target, other, transpose) in [(*q, kv, false), (*k, qv, true)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let dt = self.slot(grads, target);
                    for b in 0..layout.batch {
                        for h in 0..*heads {
                            let gb = View { data: g.data(), offset: (b * heads + h) * t * t, rows: t, cols: t, rs: t, cs: 1 };
                            let ob = View { data: other.data(), offset: b * t * d + h * dk, rows: t, cols: dk, rs: d, cs: 1 };
                            let c = ViewMut { data: dt.data_mut(), offset: b * t * d + h * dk, rows: t, cols: dk, rs: d, cs: 1 };
                            gemm(*scale, gb.t_if(transpose), ob, S::one(), c);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, seq_len, mask } => {
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for r in 0..out.rows() {
                        let visible = kernels::visible_cols(r % seq_len, *seq_len, mask.is_causal());
                        kernels::softmax_row_backward(&out.row(r)[..visible], &g.row(r)[..visible], &mut dx.row_mut(r)[..visible]);
                    }
                }
            }
            Op::ShapeMix { a, alpha, beta, gamma, centering, heads } => {
                let av = self.value(*a);
                let t = av.cols();
                let be = self.value(*beta).data().to_vec();
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    for r in 0..av.rows() {
                        let h = (r / t) % heads;
                        for (d, &gi) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += be[h] * gi;
                        }
                    }
                }
                if self.needs(*alpha) {
                    let dal = self.slot(grads, *alpha);
                    for r in 0..av.rows() {
                        dal.data_mut()[(r / t) % heads] += g.row(r)[r % t];
                    }
                }
                if self.needs(*beta) {
                    let dbe = self.slot(grads, *beta);
                    for r in 0..av.rows() {
                        let dot: S = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                        dbe.data_mut()[(r / t) % heads] += dot;
                    }
                }
                if let Some(gm) = gamma {
                    if self.needs(*gm) {
                        let dga = self.slot(grads, *gm);
                        for r in 0..av.rows() {
                            let dot: S = g.row(r).iter().zip(centering.row(r % t)).map(|(&x, &y)| x * y).sum();
                            dga.data_mut()[(r / t) % heads] -= dot;
                        }
                    }
                }
            }
            Op::HeadMix { m, v, layout, heads } => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                let d = vv.cols();
                let dk = d / heads;
                let t = layout.seq_len;
                for b in 0..layout.batch {
                    for h in 0..*heads {
                        let mo = (b * heads + h) * t * t;
                        let vo = b * t * d + h * dk;
                        let gb = View { data: g.data(), offset: vo, rows: t, cols: dk, rs: d, cs: 1 };
                        if self.needs(*m) {
                            let vb = View { data: vv.data(), offset: vo, rows: t, cols: dk, rs: d, cs: 1 };
                            let dm = self.slot(grads, *m);
                            let c = ViewMut { data: dm.data_mut(), offset: mo, rows: t, cols: t, rs: t, cs: 1 };
                            gemm(S::one(), gb, vb.t(), S::one(), c);
                        }
                        if self.needs(*v) {
                            let mb = View { data: mv.data(), offset: mo, rows: t, cols: t, rs: t, cs: 1 };
                            let dv = self.slot(grads, *v);
                            let c = ViewMut { data: dv.data_mut(), offset: vo, rows: t, cols: dk, rs: d, cs: 1 };
                            gemm(S::one(), mb.t(), gb, S::one(), c);
                        }
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf that requires one; `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
