//! Training objectives over `B x K` probability batches. Every loss has a
//! `_grad` twin returning the value and the gradient with respect to the
//! first (prediction) argument.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::datasets::ClassFrequency;
use crate::error::{shape_err, Result, ScidaError};
use crate::nn::Scalar;

/// Probability clamp applied before every logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Per-class weights p_beta.
    pub class_weights: Vec<f64>,
}

impl FocalParams {
    pub fn new(class_weights: &ClassFrequency) -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            class_weights: class_weights.proportions.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(ScidaError::Config(format!(
                "focal alpha must be in (0,1) and gamma >= 0, got {} / {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

fn check_same<T>(a: &Array2<T>, b: &Array2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return shape_err(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim()));
    }
    if a.is_empty() {
        return Err(ScidaError::Empty(format!("{what} of an empty batch")));
    }
    Ok(())
}

/// Clamped value and whether the clamp was active (zero gradient there).
fn clamp<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::of(EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Weighted focal loss, summed over classes and averaged over the batch.
pub fn weighted_focal_loss<T: Scalar>(probs: &Array2<T>, target: &Array2<T>, params: &FocalParams) -> Result<T> {
    weighted_focal_loss_grad(probs, target, params).map(|(l, _)| l)
}

pub fn weighted_focal_loss_grad<T: Scalar>(
    probs: &Array2<T>,
    target: &Array2<T>,
    params: &FocalParams,
) -> Result<(T, Array2<T>)> {
    check_same(probs, target, "weighted focal loss")?;
    if params.class_weights.len() != probs.ncols() {
        return shape_err(format!(
            "weighted focal loss: {} class weights for K = {}",
            params.class_weights.len(),
            probs.ncols()
        ));
    }
    let a = T::of(params.alpha);
    let g = T::of(params.gamma);
    let one = T::one();
    let inv_b = T::of(1.0 / probs.nrows() as f64);
    let weights: Vec<T> = params.class_weights.iter().map(|&w| T::of(w)).collect();
    let mut loss = T::zero();
    let mut grad = Array2::zeros(probs.dim());
    for ((b, k), &p_raw) in probs.indexed_iter() {
        let y = target[[b, k]];
        let w = weights[k];
        let (p, clamped) = clamp(p_raw);
        let q = one - p;
        let pos = a * y;
        let neg = (one - a) * (one - y);
        let (lp, lq) = (p.ln(), q.ln());
        loss -= w * (pos * q.powf(g) * lp + neg * p.powf(g) * lq);
        if !clamped {
            // d/dp of q^g ln p and p^g ln q; the power terms vanish at g = 0.
            let dq_g = if params.gamma == 0.0 { T::zero() } else { g * q.powf(g - one) };
            let dp_g = if params.gamma == 0.0 { T::zero() } else { g * p.powf(g - one) };
            let d_pos = -dq_g * lp + q.powf(g) / p;
            let d_neg = dp_g * lq - p.powf(g) / q;
            grad[[b, k]] = -w * (pos * d_pos + neg * d_neg) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Mean absolute difference over batch and classes.
pub fn discrepancy_loss<T: Scalar>(p1: &Array2<T>, p2: &Array2<T>) -> Result<T> {
    check_same(p1, p2, "discrepancy loss")?;
    let n = T::of(p1.len() as f64);
    Ok(Zip::from(p1).and(p2).fold(T::zero(), |acc, &a, &b| acc + (a - b).abs()) / n)
}

/// Value and gradient with respect to `p1`; the gradient for `p2` is its
/// negation. The subgradient at `p1 == p2` is taken as 0.
pub fn discrepancy_loss_grad<T: Scalar>(p1: &Array2<T>, p2: &Array2<T>) -> Result<(T, Array2<T>)> {
    let loss = discrepancy_loss(p1, p2)?;
    let inv_n = T::of(1.0 / p1.len() as f64);
    let grad = Zip::from(p1).and(p2).map_collect(|&a, &b| {
        if a > b {
            inv_n
        } else if a < b {
            -inv_n
        } else {
            T::zero()
        }
    });
    Ok((loss, grad))
}

/// Binary cross-entropy averaged over classes and batch; soft targets allowed.
pub fn bce_loss<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> Result<T> {
    bce_loss_grad(pred, target).map(|(l, _)| l)
}

pub fn bce_loss_grad<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> Result<(T, Array2<T>)> {
    check_same(pred, target, "bce loss")?;
    let one = T::one();
    let inv_n = T::of(1.0 / pred.len() as f64);
    let mut loss = T::zero();
    let grad = Zip::from(pred).and(target).map_collect(|&p_raw, &y| {
        let (p, clamped) = clamp(p_raw);
        loss -= y * p.ln() + (one - y) * (one - p).ln();
        if clamped {
            T::zero()
        } else {
            -(y / p - (one - y) / (one - p)) * inv_n
        }
    });
    Ok((loss * inv_n, grad))
}
