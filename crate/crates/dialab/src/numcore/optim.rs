//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimizerState<E: Real> {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Real> OptimizerState<E> {
    pub fn new(hyper: AdamHyper) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }
}

/// One Adam update over a named parameter list. A parameter without a
/// gradient is treated as having a zero gradient. Deterministic: identical
/// inputs produce bit-identical outputs.
pub fn adam_step<E: Real>(
    params: &[(String, Tensor<E>)],
    state: &mut OptimizerState<E>,
) -> Result<()> {
    if state.m.is_empty() {
        for (_, p) in params {
            state.m.push(vec![E::zero(); p.numel()]);
            state.v.push(vec![E::zero(); p.numel()]);
        }
    }
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match the parameter list".into(),
        ));
    }
    state.step += 1;
    let t = state.step;
    let b1 = E::of(state.hyper.beta1);
    let b2 = E::of(state.hyper.beta2);
    let lr = E::of(state.hyper.lr);
    let eps = E::of(state.hyper.eps);
    let bc1 = E::one() - E::of(state.hyper.beta1.powi(t as i32));
    let bc2 = E::one() - E::of(state.hyper.beta2.powi(t as i32));

    for (idx, (name, p)) in params.iter().enumerate() {
        let grad = p.grad();
        if let Some(g) = &grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if state.m[idx].len() != p.numel() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer moments for '{name}' do not match the parameter shape"
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        p.with_data_mut(|data| {
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(E::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (E::one() - b1) * g;
                v[i] = b2 * v[i] + (E::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}
