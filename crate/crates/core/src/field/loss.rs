use ndarray::{Array2, ArrayView2, Zip};

use super::Real;
use crate::error::{Error, Result};

/// Huber penalty of a single residual.
pub fn huber(a: f64, delta: f64) -> f64 {
    if a.abs() < delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("huber delta must be positive, got {delta}")));
    }
    Ok(())
}

/// Mean Huber loss over all elements and its gradient with respect to `pred`.
pub fn huber_loss<T: Real>(pred: &[T], target: &[T], delta: f64) -> Result<(f64, Vec<T>)> {
    check_delta(delta)?;
    if pred.len() != target.len() {
        return Err(Error::invalid(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let a = p.to_f64() - t.to_f64();
            total += huber(a, delta);
            T::from_f64(a.clamp(-delta, delta) / n)
        })
        .collect();
    Ok((total / n, grad))
}

/// Summed loss of one chunk and its gradient scaled by `1 / n_total`, for
/// chunks of a larger batch whose mean is taken over `n_total` elements.
pub(crate) fn huber_sum_grad<T: Real>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    delta: f64,
    n_total: usize,
) -> Result<(f64, Array2<T>)> {
    check_delta(delta)?;
    if pred.dim() != target.dim() {
        return Err(Error::invalid("prediction and target shapes disagree"));
    }
    let scale = 1.0 / n_total as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let a = p.to_f64() - t.to_f64();
        total += huber(a, delta);
        *g = T::from_f64(a.clamp(-delta, delta) * scale);
    });
    Ok((total, grad))
}

/// Summed loss without gradient.
pub(crate) fn huber_sum<T: Real>(pred: ArrayView2<T>, target: ArrayView2<T>, delta: f64) -> f64 {
    let mut total = 0.0;
    Zip::from(pred).and(target).for_each(|&p, &t| total += huber(p.to_f64() - t.to_f64(), delta));
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber(0.5, 1.0), 0.125);
        let (l, g) = huber_loss(&[2.0f64, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(l, 0.75);
        assert_eq!(g, vec![0.5, 0.0]);
    }

    #[test]
    fn continuous_at_seam() {
        let d = 1.0;
        let (lo, hi) = (d - 1e-7, d + 1e-7);
        assert!((huber(lo, d) - huber(hi, d)).abs() < 1e-6);
        let (_, g_lo) = huber_loss(&[lo], &[0.0], d).unwrap();
        let (_, g_hi) = huber_loss(&[hi], &[0.0], d).unwrap();
        assert!((g_lo[0] - g_hi[0]).abs() < 1e-6);
        // the quadratic and linear branches agree exactly at |a| = δ
        assert_eq!(0.5 * d * d, d * (d - 0.5 * d));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(huber_loss(&[1.0f32], &[1.0, 2.0], 1.0).is_err());
        assert!(huber_loss(&[1.0f32], &[1.0], 0.0).is_err());
    }
}
