//! Row-stable numeric kernels.
//!
//! Every kernel walks its reduction axis in ascending index order and treats
//! output rows independently. Computing row `i` of a product therefore gives
//! the same bits whether the whole matrix or only that row is evaluated.

use crate::error::{Error, Result};
use crate::numcore::Real;

/// Row-major boolean matrix; `true` means the entry is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        BoolMat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `out = a(m x k) . b(k x n)`, accumulated over `k` in ascending order.
pub fn matmul<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for x in out_row.iter_mut() {
            *x = E::zero();
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out += a(m x k) . b(k x n)`.
pub fn matmul_acc<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out = a(m x k) . b(n x k)^T`, i.e. pairwise row dot products.
pub fn matmul_bt<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a(m x k) . b(n x k)^T`.
pub fn matmul_bt_acc<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a(m x k)^T . b(m x n)`, accumulated over rows of `a`/`b` ascending.
pub fn matmul_ta_acc<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (p, &a_rp) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_rp * bv;
            }
        }
    }
}

pub fn dot<E: Real>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// `out += c * x`
pub fn axpy<E: Real>(c: E, x: &[E], out: &mut [E]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += c * v;
    }
}

/// Column sums of `a(m x n)`, rows accumulated in ascending order.
pub fn col_sum_acc<E: Real>(a: &[E], m: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(out.len(), n);
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
}

/// Numerically stable softmax over the allowed entries of one row.
///
/// Forbidden entries come out as exact zeros; their logits are never read, so
/// the result behaves as if `-inf` had been added before normalization.
pub fn masked_softmax_row<E: Real>(logits: &[E], allow: &[bool], out: &mut [E]) -> Result<()> {
    debug_assert_eq!(logits.len(), allow.len());
    debug_assert_eq!(logits.len(), out.len());
    let mut max = E::neg_infinity();
    let mut any = false;
    for (&x, &a) in logits.iter().zip(allow.iter()) {
        if a {
            any = true;
            if x > max {
                max = x;
            }
        }
    }
    if !any {
        return Err(Error::EmptyAttentionRow(0));
    }
    let mut sum = E::zero();
    for ((o, &x), &a) in out.iter_mut().zip(logits.iter()).zip(allow.iter()) {
        if a {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = E::zero();
        }
    }
    let inv = E::one() / sum;
    for (o, &a) in out.iter_mut().zip(allow.iter()) {
        if a {
            *o = *o * inv;
            debug_assert!(o.is_finite());
        }
    }
    Ok(())
}

/// Backward of `masked_softmax_row`: `dx_j = p_j (dp_j - sum_l p_l dp_l)`.
pub fn masked_softmax_row_backward<E: Real>(probs: &[E], dprobs: &[E], dx: &mut [E]) {
    let mut inner = E::zero();
    for (&p, &dp) in probs.iter().zip(dprobs.iter()) {
        inner += p * dp;
    }
    for ((o, &p), &dp) in dx.iter_mut().zip(probs.iter()).zip(dprobs.iter()) {
        *o += p * (dp - inner);
    }
}

/// Log-softmax over a full row.
pub fn log_softmax_row<E: Real>(logits: &[E], out: &mut [E]) {
    let mut max = E::neg_infinity();
    for &x in logits.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = E::zero();
    for &x in logits.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(logits.iter()) {
        *o = x - lse;
    }
}

/// Per-row layer normalization; returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row<E: Real>(x: &[E], gamma: &[E], beta: &[E], eps: E, out: &mut [E]) -> (E, E) {
    let n = E::of(x.len() as f64);
    let mut mean = E::zero();
    for &v in x.iter() {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::zero();
    for &v in x.iter() {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    let rstd = E::one() / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x.iter()).zip(gamma.iter()).zip(beta.iter()) {
        *o = g * (v - mean) * rstd + b;
        debug_assert!(o.is_finite());
    }
    (mean, rstd)
}

/// Backward of `layer_norm_row` for one row.
pub fn layer_norm_row_backward<E: Real>(
    x: &[E],
    gamma: &[E],
    mean: E,
    rstd: E,
    dy: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let n = E::of(x.len() as f64);
    let mut sum_dyg = E::zero();
    let mut sum_dyg_xhat = E::zero();
    for ((&xv, &g), &d) in x.iter().zip(gamma.iter()).zip(dy.iter()) {
        let xhat = (xv - mean) * rstd;
        let dyg = d * g;
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xhat;
    }
    let mean_dyg = sum_dyg / n;
    let mean_dyg_xhat = sum_dyg_xhat / n;
    for ((((o, &xv), &g), &d), (dg, db)) in dx
        .iter_mut()
        .zip(x.iter())
        .zip(gamma.iter())
        .zip(dy.iter())
        .zip(dgamma.iter_mut().zip(dbeta.iter_mut()))
    {
        let xhat = (xv - mean) * rstd;
        *o += rstd * (d * g - mean_dyg - xhat * mean_dyg_xhat);
        *dg += d * xhat;
        *db += d;
    }
}

const GELU_A: f64 = 0.044715;

fn gelu_c<E: Real>() -> E {
    E::of((2.0 / std::f64::consts::PI).sqrt())
}

/// GELU, tanh approximation.
pub fn gelu<E: Real>(x: E) -> E {
    let c = gelu_c::<E>();
    let a = E::of(GELU_A);
    let half = E::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_grad<E: Real>(x: E) -> E {
    let c = gelu_c::<E>();
    let a = E::of(GELU_A);
    let half = E::of(0.5);
    let three = E::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_row_independent() {
        // Computing a single row reproduces the full product bit for bit.
        let a: Vec<f32> = (0..6).map(|i| (i as f32).sin()).collect();
        let b: Vec<f32> = (0..12).map(|i| (i as f32).cos()).collect();
        let mut full = vec![0.0f32; 8];
        matmul(&a, &b, 2, 3, 4, &mut full);
        let mut row1 = vec![0.0f32; 4];
        matmul(&a[3..6], &b, 1, 3, 4, &mut row1);
        assert_eq!(&full[4..8], &row1[..]);
    }

    #[test]
    fn transposed_variants() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 2.0, -1.0, 0.5, 1.0]; // 2x3 interpreted as needed
        let mut bt = [0.0; 4];
        matmul_bt(&a, &b, 2, 3, 2, &mut bt);
        // row0 . row0 = 1 + 0 + 6 = 7 ; row0 . row1 = -1 + 1 + 3 = 3
        assert_eq!(bt, [7.0, 3.0, 16.0, 4.5]);

        let mut ta = vec![0.0; 9];
        matmul_ta_acc(&a, &b, 2, 3, 3, &mut ta);
        // out[p][j] = a[0][p] b[0][j] + a[1][p] b[1][j]
        assert_eq!(ta[0], 1.0 * 1.0 + 4.0 * -1.0);
        assert_eq!(ta[4], 2.0 * 0.0 + 5.0 * 0.5);
    }

    #[test]
    fn gelu_matches_known_points() {
        assert!((gelu(0.0f64)).abs() < 1e-12);
        assert!((gelu(1.0f64) - 0.841192).abs() < 1e-5);
        // numeric derivative check
        let h = 1e-6;
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 2.5] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-6, "x={x}");
        }
    }
}
