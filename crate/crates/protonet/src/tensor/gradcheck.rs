//! Finite-difference gradient checking.
//!
//! The checker re-evaluates the forward pass with perturbed inputs, so it is
//! independent of the backward implementation it validates.

use crate::error::Result;

/// Relative error with a floor: |a-b| / max(|a|, |b|, 1e-4). The floor keeps
/// near-zero gradient pairs from amplifying finite-difference noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central difference (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h at coordinate `i`.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x)?;
    x[i] = orig - h;
    let minus = f(x)?;
    x[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Maximum relative error between an analytic gradient and central
/// differences over the chosen coordinates.
pub fn max_grad_error<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let fd = central_difference(&mut f, &mut xs, i, h)?;
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_matches_polynomial_derivative() {
        // f(x) = x0^3 + 2 x1, df/dx0 = 3 x0^2, df/dx1 = 2
        let mut f = |x: &[f64]| Ok(x[0].powi(3) + 2.0 * x[1]);
        let mut x = vec![2.0, 5.0];
        let d0 = central_difference(&mut f, &mut x, 0, 1e-5).unwrap();
        let d1 = central_difference(&mut f, &mut x, 1, 1e-5).unwrap();
        assert!((d0 - 12.0).abs() < 1e-8);
        assert!((d1 - 2.0).abs() < 1e-10);
        assert_eq!(x, vec![2.0, 5.0]); // restored
    }

    #[test]
    fn max_grad_error_flags_a_wrong_gradient() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let good = max_grad_error(f, &[3.0], &[6.0], &[0], 1e-5).unwrap();
        assert!(good < 1e-8, "good = {good}");
        let bad = max_grad_error(f, &[3.0], &[5.0], &[0], 1e-5).unwrap();
        assert!(bad > 0.1, "bad = {bad}");
    }
}
