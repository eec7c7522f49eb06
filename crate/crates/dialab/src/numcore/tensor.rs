//! Reverse-mode autodiff over dense row-major tensors.
//!
//! Operations record a graph of shared `Tensor` handles; `backward_pass`
//! replays it in reverse creation order. Gradients accumulate on the tensors
//! themselves and persist until `zero_grad`.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::kernels::{self, BoolMat};
use crate::numcore::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone)]
pub struct Tensor<E: Real>(Rc<RefCell<Inner<E>>>);

struct Inner<E: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

enum Op<E: Real> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    Sum(Tensor<E>),
    Gelu(Tensor<E>),
    /// `x (m x k) . w (k x n) [+ b (n)]`
    Linear {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Option<Tensor<E>>,
    },
    /// `a (m x k) . b (n x k)^T`
    MatMulBT(Tensor<E>, Tensor<E>),
    /// broadcast row add: `x (m x n) + b (n)`
    AddBias(Tensor<E>, Tensor<E>),
    LayerNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        stats: Vec<(E, E)>,
    },
    MaskedSoftmaxRows {
        x: Tensor<E>,
    },
    /// Fused multi-head masked attention over a padded batch.
    Attention {
        q: Tensor<E>,
        k: Tensor<E>,
        v: Tensor<E>,
        heads: usize,
        masks: Rc<Vec<BoolMat>>,
        scale: E,
        probs: Vec<E>,
    },
    /// Row gather from an embedding table.
    Gather {
        table: Tensor<E>,
        ids: Rc<Vec<usize>>,
    },
    GatherRows {
        x: Tensor<E>,
        rows: Rc<Vec<usize>>,
    },
    /// Sum of `-log softmax(logits_r)[target_r]` over rows.
    CrossEntropySum {
        logits: Tensor<E>,
        targets: Rc<Vec<usize>>,
        probs: Vec<E>,
    },
}

impl<E: Real> Op<E> {
    fn children(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMulBT(a, b) | Op::AddBias(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(x, _) | Op::Sum(x) | Op::Gelu(x) => vec![x.clone()],
            Op::Linear { x, w, b } => {
                let mut c = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    c.push(b.clone());
                }
                c
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::MaskedSoftmaxRows { x } => vec![x.clone()],
            Op::Attention { q, k, v, .. } => vec![q.clone(), k.clone(), v.clone()],
            Op::Gather { table, .. } => vec![table.clone()],
            Op::GatherRows { x, .. } => vec![x.clone()],
            Op::CrossEntropySum { logits, .. } => vec![logits.clone()],
        }
    }
}

fn check_2d(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 2-d tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

impl<E: Real> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> Tensor<E> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(RefCell::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        })))
    }

    /// New graph node; the op is dropped when no input tracks gradients so
    /// detached forward passes do not retain their history.
    fn from_op(shape: Vec<usize>, data: Vec<E>, op: Op<E>) -> Tensor<E> {
        let requires = op.children().iter().any(|c| c.requires_grad_flag());
        let op = if requires { op } else { Op::Leaf };
        Tensor::new(shape, data, requires, op)
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Tensor<E>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} does not hold {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor::new(shape, data, false, Op::Leaf))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<E> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![E::zero(); n], false, Op::Leaf)
    }

    pub fn scalar(v: E) -> Tensor<E> {
        Tensor::new(vec![1], vec![v], false, Op::Leaf)
    }

    /// Deterministic normal initialization via Box-Muller.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(E::of(z * std));
        }
        Tensor::new(shape, data, false, Op::Leaf)
    }

    pub fn requires_grad(self, flag: bool) -> Tensor<E> {
        self.0.borrow_mut().requires_grad = flag;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().shape[0]
    }

    pub fn cols(&self) -> usize {
        let inner = self.0.borrow();
        *inner.shape.get(1).unwrap_or(&1)
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [E]> {
        Ref::map(self.0.borrow(), |i| i.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.0.borrow().data.clone()
    }

    /// Replaces the stored values (same shape). Used by the optimizer; the
    /// graph above a leaf is never retained, so this cannot corrupt history.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::ShapeMismatch("set_data length mismatch".into()));
        }
        inner.data = data;
        Ok(())
    }

    pub fn with_data_mut<T>(&self, f: impl FnOnce(&mut [E]) -> T) -> T {
        f(&mut self.0.borrow_mut().data)
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn item(&self) -> E {
        let inner = self.0.borrow();
        debug_assert_eq!(inner.data.len(), 1);
        inner.data[0]
    }

    /// Fresh leaf holding a copy of the values.
    pub fn deep_clone(&self) -> Tensor<E> {
        let inner = self.0.borrow();
        Tensor::new(inner.shape.clone(), inner.data.clone(), inner.requires_grad, Op::Leaf)
    }

    fn accumulate_grad(&self, delta: &[E]) {
        let mut inner = self.0.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![E::zero(); n]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    // ---- graph-building operations ----

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(self.shape(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(self.shape(), data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape(), data, Op::Scale(self.clone(), c))
    }

    pub fn sum(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn gelu(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| kernels::gelu(x)).collect();
        Tensor::from_op(self.shape(), data, Op::Gelu(self.clone()))
    }

    /// `self (m x k) . w (k x n) + b`
    pub fn linear(&self, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let (m, k) = check_2d(&self.shape())?;
        let (k2, n) = check_2d(&w.shape())?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "linear: x is {m}x{k}, w is {k2}x{n}"
            )));
        }
        if let Some(b) = b {
            if b.numel() != n {
                return Err(Error::ShapeMismatch(format!(
                    "linear: bias has {} entries, expected {n}",
                    b.numel()
                )));
            }
        }
        let mut out = vec![E::zero(); m * n];
        kernels::matmul(&self.data(), &w.data(), m, k, n, &mut out);
        if let Some(b) = b {
            let bias = b.data();
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                    *o += bv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::Linear {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
            },
        ))
    }

    /// `self (m x k) . other (n x k)^T`
    pub fn matmul_bt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = check_2d(&self.shape())?;
        let (n, k2) = check_2d(&other.shape())?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_bt: {m}x{k} vs ({n}x{k2})^T"
            )));
        }
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_bt(&self.data(), &other.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMulBT(self.clone(), other.clone())))
    }

    /// Broadcast row add: `self (m x n) + bias (n)`.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = check_2d(&self.shape())?;
        if bias.numel() != n {
            return Err(Error::ShapeMismatch(format!(
                "add_bias: bias has {} entries, expected {n}",
                bias.numel()
            )));
        }
        let mut out = self.data_vec();
        {
            let b = bias.data();
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.iter()) {
                    *o += bv;
                }
            }
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::AddBias(self.clone(), bias.clone())))
    }

    /// Per-row layer normalization over the feature dimension.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let (m, n) = check_2d(&self.shape())?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::ShapeMismatch(
                "layer_norm: gamma/beta must match the feature dimension".into(),
            ));
        }
        if eps <= E::zero() {
            return Err(Error::InvalidArgument("layer_norm: eps must be > 0".into()));
        }
        let mut out = vec![E::zero(); m * n];
        let mut stats = Vec::with_capacity(m);
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for i in 0..m {
                let st = kernels::layer_norm_row(
                    &x[i * n..(i + 1) * n],
                    &g,
                    &b,
                    eps,
                    &mut out[i * n..(i + 1) * n],
                );
                stats.push(st);
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                stats,
            },
        ))
    }

    /// Row-wise masked softmax; forbidden entries come out exactly zero.
    pub fn masked_softmax_rows(&self, mask: Rc<BoolMat>) -> Result<Tensor<E>> {
        let (m, n) = check_2d(&self.shape())?;
        if mask.rows() != m || mask.cols() != n {
            return Err(Error::ShapeMismatch(format!(
                "masked_softmax_rows: mask {}x{} vs tensor {m}x{n}",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut out = vec![E::zero(); m * n];
        {
            let x = self.data();
            for i in 0..m {
                kernels::masked_softmax_row(
                    &x[i * n..(i + 1) * n],
                    mask.row(i),
                    &mut out[i * n..(i + 1) * n],
                )
                .map_err(|_| Error::EmptyAttentionRow(i))?;
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::MaskedSoftmaxRows { x: self.clone() },
        ))
    }

    /// Fused multi-head masked attention over a padded batch.
    ///
    /// `q` is `(B*nq) x d`, `k`/`v` are `(B*nk) x d`, one `nq x nk` allow
    /// matrix per batch element. Scores are `q.k/sqrt(d/heads)`; forbidden
    /// columns are never read, so a row's output depends only on its allowed
    /// columns.
    pub fn attention(
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
        heads: usize,
        masks: Rc<Vec<BoolMat>>,
    ) -> Result<Tensor<E>> {
        let (qr, d) = check_2d(&q.shape())?;
        let (kr, dk_full) = check_2d(&k.shape())?;
        let (vr, dv_full) = check_2d(&v.shape())?;
        if d != dk_full || d != dv_full || kr != vr {
            return Err(Error::ShapeMismatch("attention: q/k/v widths differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention: hidden {d} not divisible by {heads} heads"
            )));
        }
        let batch = masks.len();
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let nq = masks[0].rows();
        let nk = masks[0].cols();
        if masks.iter().any(|m| m.rows() != nq || m.cols() != nk) {
            return Err(Error::ShapeMismatch("attention: ragged mask batch".into()));
        }
        if qr != batch * nq || kr != batch * nk {
            return Err(Error::ShapeMismatch(format!(
                "attention: rows {qr}/{kr} vs batch {batch} of {nq}/{nk}"
            )));
        }
        let dk = d / heads;
        let scale = E::of(1.0 / (dk as f64).sqrt());

        let mut out = vec![E::zero(); qr * d];
        let mut probs = vec![E::zero(); batch * heads * nq * nk];
        {
            let qd = q.data();
            let kd = k.data();
            let vd = v.data();
            let mut scores = vec![E::zero(); nk];
            for b in 0..batch {
                let mask = &masks[b];
                for h in 0..heads {
                    let off = h * dk;
                    for i in 0..nq {
                        let qrow = &qd[(b * nq + i) * d + off..(b * nq + i) * d + off + dk];
                        let allow = mask.row(i);
                        for j in 0..nk {
                            if allow[j] {
                                let krow = &kd[(b * nk + j) * d + off..(b * nk + j) * d + off + dk];
                                scores[j] = kernels::dot(qrow, krow) * scale;
                            } else {
                                scores[j] = E::zero();
                            }
                        }
                        let prow = &mut probs[((b * heads + h) * nq + i) * nk..][..nk];
                        kernels::masked_softmax_row(&scores, allow, prow)
                            .map_err(|_| Error::EmptyAttentionRow(i))?;
                        let orow = &mut out[(b * nq + i) * d + off..(b * nq + i) * d + off + dk];
                        for j in 0..nk {
                            if allow[j] {
                                let vrow = &vd[(b * nk + j) * d + off..(b * nk + j) * d + off + dk];
                                kernels::axpy(prow[j], vrow, orow);
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![qr, d],
            out,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                masks,
                scale,
                probs,
            },
        ))
    }

    /// Gather rows of an embedding table: `self (V x d)`, ids -> `(n x d)`.
    pub fn gather(&self, ids: Rc<Vec<usize>>) -> Result<Tensor<E>> {
        let (v, d) = check_2d(&self.shape())?;
        for &id in ids.iter() {
            if id >= v {
                return Err(Error::UnknownToken(id));
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let table = self.data();
            for &id in ids.iter() {
                out.extend_from_slice(&table[id * d..(id + 1) * d]);
            }
        }
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table: self.clone(),
                ids,
            },
        ))
    }

    /// Select rows of a 2-d tensor by index.
    pub fn gather_rows(&self, rows: Rc<Vec<usize>>) -> Result<Tensor<E>> {
        let (m, n) = check_2d(&self.shape())?;
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for &r in rows.iter() {
            if r >= m {
                return Err(Error::ShapeMismatch(format!(
                    "gather_rows: row {r} out of {m}"
                )));
            }
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        {
            let x = self.data();
            for &r in rows.iter() {
                out.extend_from_slice(&x[r * n..(r + 1) * n]);
            }
        }
        Ok(Tensor::from_op(
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x: self.clone(),
                rows,
            },
        ))
    }

    /// Sum of `-log softmax(row)[target]` over all rows.
    pub fn cross_entropy_sum(&self, targets: Rc<Vec<usize>>) -> Result<Tensor<E>> {
        let (m, v) = check_2d(&self.shape())?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy_sum: {m} rows vs {} targets",
                targets.len()
            )));
        }
        for &t in targets.iter() {
            if t >= v {
                return Err(Error::TargetOutOfRange { target: t, vocab: v });
            }
        }
        let mut probs = vec![E::zero(); m * v];
        let mut total = E::zero();
        {
            let x = self.data();
            let all = vec![true; v];
            for (i, &t) in targets.iter().enumerate() {
                let row = &x[i * v..(i + 1) * v];
                let prow = &mut probs[i * v..(i + 1) * v];
                kernels::masked_softmax_row(row, &all, prow).expect("non-empty row");
                total += -(prow[t].ln());
            }
        }
        debug_assert!(total.is_finite() || total == E::infinity());
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            Op::CrossEntropySum {
                logits: self.clone(),
                targets,
                probs,
            },
        ))
    }

    // ---- backward ----

    fn backward_step(&self) -> Result<()> {
        let inner = self.0.borrow();
        let out_grad = match &inner.grad {
            Some(g) => g.clone(),
            None => return Ok(()),
        };
        let out_data = inner.data.clone();
        // Compute child deltas under read borrows only, then release and
        // accumulate; children may alias each other or appear twice.
        let updates: Vec<(Tensor<E>, Vec<E>)> = match &inner.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a.clone(), out_grad.clone()), (b.clone(), out_grad)],
            Op::Mul(a, b) => {
                let da: Vec<E> = b.data().iter().zip(out_grad.iter()).map(|(&x, &g)| x * g).collect();
                let db: Vec<E> = a.data().iter().zip(out_grad.iter()).map(|(&x, &g)| x * g).collect();
                vec![(a.clone(), da), (b.clone(), db)]
            }
            Op::Scale(x, c) => {
                let dx: Vec<E> = out_grad.iter().map(|&g| g * *c).collect();
                vec![(x.clone(), dx)]
            }
            Op::Sum(x) => {
                let g = out_grad[0];
                vec![(x.clone(), vec![g; x.numel()])]
            }
            Op::Gelu(x) => {
                let dx: Vec<E> = x
                    .data()
                    .iter()
                    .zip(out_grad.iter())
                    .map(|(&v, &g)| g * kernels::gelu_grad(v))
                    .collect();
                vec![(x.clone(), dx)]
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (x.rows(), x.cols());
                let n = w.cols();
                let mut dx = vec![E::zero(); m * k];
                kernels::matmul_bt(&out_grad, &w.data(), m, n, k, &mut dx);
                let mut dw = vec![E::zero(); k * n];
                kernels::matmul_ta_acc(&x.data(), &out_grad, m, k, n, &mut dw);
                let mut ups = vec![(x.clone(), dx), (w.clone(), dw)];
                if let Some(b) = b {
                    let mut db = vec![E::zero(); n];
                    kernels::col_sum_acc(&out_grad, m, n, &mut db);
                    ups.push((b.clone(), db));
                }
                ups
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = (a.rows(), a.cols());
                let n = b.rows();
                let mut da = vec![E::zero(); m * k];
                kernels::matmul(&out_grad, &b.data(), m, n, k, &mut da);
                let mut db = vec![E::zero(); n * k];
                kernels::matmul_ta_acc(&out_grad, &a.data(), m, n, k, &mut db);
                vec![(a.clone(), da), (b.clone(), db)]
            }
            Op::AddBias(x, b) => {
                let (m, n) = (x.rows(), x.cols());
                let mut db = vec![E::zero(); n];
                kernels::col_sum_acc(&out_grad, m, n, &mut db);
                vec![(x.clone(), out_grad), (b.clone(), db)]
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![E::zero(); m * n];
                let mut dgamma = vec![E::zero(); n];
                let mut dbeta = vec![E::zero(); n];
                {
                    let xd = x.data();
                    let g = gamma.data();
                    for i in 0..m {
                        let (mean, rstd) = stats[i];
                        kernels::layer_norm_row_backward(
                            &xd[i * n..(i + 1) * n],
                            &g,
                            mean,
                            rstd,
                            &out_grad[i * n..(i + 1) * n],
                            &mut dx[i * n..(i + 1) * n],
                            &mut dgamma,
                            &mut dbeta,
                        );
                    }
                }
                vec![(x.clone(), dx), (gamma.clone(), dgamma), (beta.clone(), dbeta)]
            }
            Op::MaskedSoftmaxRows { x } => {
                let (m, n) = (x.rows(), x.cols());
                let mut dx = vec![E::zero(); m * n];
                for i in 0..m {
                    kernels::masked_softmax_row_backward(
                        &out_data[i * n..(i + 1) * n],
                        &out_grad[i * n..(i + 1) * n],
                        &mut dx[i * n..(i + 1) * n],
                    );
                }
                vec![(x.clone(), dx)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                masks,
                scale,
                probs,
            } => {
                let d = q.cols();
                let dk = d / heads;
                let batch = masks.len();
                let nq = masks[0].rows();
                let nk = masks[0].cols();
                let mut dq = vec![E::zero(); q.numel()];
                let mut dkk = vec![E::zero(); k.numel()];
                let mut dv = vec![E::zero(); v.numel()];
                {
                    let qd = q.data();
                    let kd = k.data();
                    let vd = v.data();
                    let mut dprobs = vec![E::zero(); nk];
                    for b in 0..batch {
                        let mask = &masks[b];
                        for h in 0..*heads {
                            let off = h * dk;
                            for i in 0..nq {
                                let allow = mask.row(i);
                                let prow = &probs[((b * heads + h) * nq + i) * nk..][..nk];
                                let grow = &out_grad[(b * nq + i) * d + off..(b * nq + i) * d + off + dk];
                                let mut inner_sum = E::zero();
                                for j in 0..nk {
                                    if allow[j] {
                                        let vrow = &vd[(b * nk + j) * d + off..(b * nk + j) * d + off + dk];
                                        let dp = kernels::dot(grow, vrow);
                                        dprobs[j] = dp;
                                        inner_sum += prow[j] * dp;
                                    }
                                }
                                let qrow = &qd[(b * nq + i) * d + off..(b * nq + i) * d + off + dk];
                                let dqrow_start = (b * nq + i) * d + off;
                                for j in 0..nk {
                                    if !allow[j] {
                                        continue;
                                    }
                                    let ds = prow[j] * (dprobs[j] - inner_sum) * *scale;
                                    let krow = &kd[(b * nk + j) * d + off..(b * nk + j) * d + off + dk];
                                    kernels::axpy(ds, krow, &mut dq[dqrow_start..dqrow_start + dk]);
                                    let dk_start = (b * nk + j) * d + off;
                                    kernels::axpy(ds, qrow, &mut dkk[dk_start..dk_start + dk]);
                                    let dv_start = (b * nk + j) * d + off;
                                    kernels::axpy(prow[j], grow, &mut dv[dv_start..dv_start + dk]);
                                }
                            }
                        }
                    }
                }
                vec![(q.clone(), dq), (k.clone(), dkk), (v.clone(), dv)]
            }
            Op::Gather { table, ids } => {
                let d = table.cols();
                let mut dt = vec![E::zero(); table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(E::one(), &out_grad[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                vec![(table.clone(), dt)]
            }
            Op::GatherRows { x, rows } => {
                let n = x.cols();
                let mut dx = vec![E::zero(); x.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    kernels::axpy(E::one(), &out_grad[r * n..(r + 1) * n], &mut dx[src * n..(src + 1) * n]);
                }
                vec![(x.clone(), dx)]
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let (m, v) = (logits.rows(), logits.cols());
                let g = out_grad[0];
                let mut dl = vec![E::zero(); m * v];
                for i in 0..m {
                    let prow = &probs[i * v..(i + 1) * v];
                    let drow = &mut dl[i * v..(i + 1) * v];
                    for (o, &p) in drow.iter_mut().zip(prow.iter()) {
                        *o = p * g;
                    }
                    drow[targets[i]] -= g;
                }
                vec![(logits.clone(), dl)]
            }
        };
        drop(inner);
        for (child, delta) in updates {
            if child.requires_grad_flag() {
                child.accumulate_grad(&delta);
            }
        }
        Ok(())
    }
}

/// Populates gradients on every parameter reachable from a scalar loss.
/// Repeated calls accumulate until `zero_grad`.
pub fn backward_pass<E: Real>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape()));
    }
    // Topological order via iterative post-order DFS over tensors that track
    // gradients; children always precede parents.
    let mut topo: Vec<Tensor<E>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            topo.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        if !node.requires_grad_flag() {
            continue;
        }
        let children = node.0.borrow().op.children();
        stack.push((node, true));
        for c in children {
            if !visited.contains(&c.id()) {
                stack.push((c, false));
            }
        }
    }
    loss.accumulate_grad(&[E::one()]);
    for node in topo.iter().rev() {
        node.backward_step()?;
    }
    Ok(())
}

// ---- standalone vector-level operations ----

/// Softmax restricted to allowed positions; forbidden positions are exactly 0
/// (equivalent to adding `-inf` to their logits before normalization).
pub fn masked_softmax<E: Real>(logits: &[E], mask: &[bool]) -> Result<Vec<E>> {
    if logits.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "masked_softmax: {} logits vs {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    let mut out = vec![E::zero(); logits.len()];
    kernels::masked_softmax_row(logits, mask, &mut out)?;
    Ok(out)
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` over the feature dimension.
pub fn layer_norm<E: Real>(x: &[E], gamma: &[E], beta: &[E], eps: E) -> Result<Vec<E>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::ShapeMismatch("layer_norm: length mismatch".into()));
    }
    if eps <= E::zero() {
        return Err(Error::InvalidArgument("layer_norm: eps must be > 0".into()));
    }
    let mut out = vec![E::zero(); x.len()];
    kernels::layer_norm_row(x, gamma, beta, eps, &mut out);
    Ok(out)
}

/// `-log softmax(logits)[target]`
pub fn cross_entropy<E: Real>(logits: &[E], target: usize) -> Result<E> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            vocab: logits.len(),
        });
    }
    let mut out = vec![E::zero(); logits.len()];
    kernels::log_softmax_row(logits, &mut out);
    Ok(-out[target])
}
