//! Central-difference gradient verification.

use crate::error::{Error, Result};

/// Compare an analytic gradient against central finite differences.
///
/// `f` is evaluated as a pure function of the flattened parameter vector;
/// `analytic` is the gradient being checked. Returns the maximum over
/// coordinates of `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check<F>(mut f: F, at: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if at.len() != analytic.len() {
        return Err(Error::shape(format!(
            "finite_diff_check: {} parameters but {} gradient entries",
            at.len(),
            analytic.len()
        )));
    }
    let mut point = at.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point)?;
        point[i] = orig - h;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_check: non-finite evaluation at coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let at = vec![1.0, -2.0, 3.0, 0.5];
        let f = |p: &[f64]| Ok(p.iter().map(|v| v * v).sum());
        let analytic: Vec<f64> = at.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(f, &at, &analytic, 1e-5).unwrap();
        assert!(err <= 1e-7, "error {err}");
    }

    #[test]
    fn broken_gradient_is_detected() {
        let at = vec![1.0, -2.0, 3.0];
        let f = |p: &[f64]| Ok(p.iter().map(|v| v * v).sum());
        // deliberately wrong rule: 3x instead of 2x
        let wrong: Vec<f64> = at.iter().map(|v| 3.0 * v).collect();
        let err = finite_diff_check(f, &at, &wrong, 1e-5).unwrap();
        assert!(err > 1e-2, "negative control failed: error {err}");
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        // ln goes NaN on the negative side of the central difference
        let at = vec![0.0];
        let f = |p: &[f64]| Ok(p[0].ln());
        let res = finite_diff_check(f, &at, &[0.0], 1e-5);
        assert!(matches!(res, Err(crate::error::Error::Numeric(_))));
    }
}
