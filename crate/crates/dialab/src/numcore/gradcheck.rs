//! Central-difference verification of the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{backward_pass, Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over sampled coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Pass bar for the element type the check ran in.
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Pass bar by precision: single precision cannot resolve central differences
/// below ~1e-2, double comfortably reaches 1e-5.
pub fn recommended_tolerance<E: Real>() -> f64 {
    if E::DOUBLE {
        1e-5
    } else {
        1e-2
    }
}

/// Compares backward gradients against central differences.
///
/// `loss_fn` rebuilds the forward computation from the given parameters and
/// returns the scalar loss node. Up to `max_coords_per_param` coordinates per
/// tensor are sampled (seeded). `h` should lie in `[1e-6, 1e-4]`.
pub fn finite_difference_check<E, F>(
    params: &[(String, Tensor<E>)],
    mut loss_fn: F,
    h: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    E: Real,
    F: FnMut(&[(String, Tensor<E>)]) -> Result<Tensor<E>>,
{
    if !E::DOUBLE {
        log::warn!(
            "finite_difference_check running in single precision; tolerance widened to {}",
            recommended_tolerance::<E>()
        );
    }
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn(params)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    backward_pass(&loss)?;
    let analytic: Vec<Vec<E>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![E::zero(); p.numel()]))
        .collect();
    for (_, p) in params {
        p.zero_grad();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let he = E::of(h);
    let two_h = E::of(2.0 * h);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;

    for (idx, (_, p)) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            (0..max_coords_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let original = p.data()[c];
            p.with_data_mut(|d| d[c] = original + he);
            let plus = loss_fn(params)?.item();
            p.with_data_mut(|d| d[c] = original - he);
            let minus = loss_fn(params)?.item();
            p.with_data_mut(|d| d[c] = original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let numeric = ((plus - minus) / two_h).to_f64_lossy();
            let a = analytic[idx][c].to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        tolerance: recommended_tolerance::<E>(),
        coords_checked: checked,
    })
}
