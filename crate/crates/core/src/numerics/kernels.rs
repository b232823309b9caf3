//! Forward/backward kernels over raw slices. The graph layer owns shape
//! validation; these functions assume consistent extents.

use crate::scalar::Scalar;

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct View<'x, S> {
    pub data: &'x [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'x, S> View<'x, S> {
    pub fn dense(data: &'x [S], rows: usize, cols: usize) -> Self {
        View { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    pub fn t_if(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0 || self.cols == 0 || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// Strided writable matrix view.
#[derive(Debug)]
pub struct ViewMut<'x, S> {
    pub data: &'x mut [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'x, S> ViewMut<'x, S> {
    pub fn dense(data: &'x mut [S], rows: usize, cols: usize) -> Self {
        ViewMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t_if(self, transpose: bool) -> Self {
        if transpose {
            ViewMut { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
        } else {
            self
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0 || self.cols == 0 || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c`. Panics on inconsistent extents or
/// out-of-bounds views.
pub fn gemm<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, c: ViewMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.in_bounds() && b.in_bounds() && c.in_bounds(), "gemm view out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is uniquely
    // borrowed, so it cannot alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Number of unmasked columns in row `pos` of a `seq_len`-wide mask.
#[inline]
pub fn visible_cols(pos: usize, seq_len: usize, causal: bool) -> usize {
    if causal {
        pos + 1
    } else {
        seq_len
    }
}

/// Softmax of one row over its first `visible` entries; the rest are set to
/// exactly zero. Masked logits never enter the log-sum-exp.
pub fn softmax_row<S: Scalar>(logits: &[S], visible: usize, out: &mut [S]) {
    let max = logits[..visible].iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut total = S::zero();
    for (o, &x) in out[..visible].iter_mut().zip(&logits[..visible]) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in &mut out[..visible] {
        *o /= total;
    }
    for o in &mut out[visible..] {
        *o = S::zero();
    }
}

/// `dx = y * (dy - <y, dy>)` for one softmax row.
pub fn softmax_row_backward<S: Scalar>(y: &[S], dy: &[S], dx: &mut [S]) {
    let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d += yi * (gi - dot);
    }
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let total: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

pub fn gelu<S: Scalar>(x: S) -> S {
    let xf = x.as_f64();
    S::of(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let xf = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    S::of(cdf + xf * pdf)
}
