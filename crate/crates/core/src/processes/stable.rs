//! Symmetric alpha-stable sampling (Chambers-Mallows-Stuck).

use std::f64::consts::PI;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::Exp1;
use statrs::function::gamma::gamma;

/// Draws `S` with characteristic function `E[exp(i xi S)] = exp(-|xi|^alpha)`.
#[inline]
pub fn sample_symmetric_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    let v = PI * (u - 0.5);
    if alpha == 1.0 {
        return v.tan();
    }
    let w: f64 = rng.sample(Exp1);
    if alpha == 2.0 {
        return 2.0 * v.sin() * w.sqrt();
    }
    let a = (alpha * v).sin() / v.cos().powf(1.0 / alpha);
    let b = ((1.0 - alpha) * v).cos() / w;
    a * b.powf((1.0 - alpha) / alpha)
}

/// Constant `C` such that `(-Delta)^{alpha/2} phi = C PV int (phi(x) - phi(x + y)) / |y|^{1 + alpha} dy`
/// in one dimension.
pub fn fractional_laplacian_constant(alpha: f64) -> f64 {
    alpha * 2f64.powf(alpha - 1.0) * gamma(0.5 * (1.0 + alpha))
        / (PI.sqrt() * gamma(1.0 - 0.5 * alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::step_rng;

    #[test]
    fn cauchy_constant_is_one_over_pi() {
        assert!((fractional_laplacian_constant(1.0) - 1.0 / PI).abs() < 1e-14);
    }

    #[test]
    fn gaussian_case_has_variance_two() {
        let n = 200_000u64;
        let mut s2 = 0.0;
        for p in 0..n {
            let x = sample_symmetric_stable(2.0, &mut step_rng(5, p, 0));
            s2 += x * x;
        }
        let var = s2 / n as f64;
        // Var(X^2) = 3 * 4 - 4 = 8 for N(0, 2)
        assert!((var - 2.0).abs() < 4.0 * (8.0 / n as f64).sqrt(), "{var}");
    }

    #[test]
    fn characteristic_function_matches() {
        let n = 100_000u64;
        for &alpha in &[0.7, 1.0, 1.5] {
            let xs: Vec<f64> = (0..n)
                .map(|p| sample_symmetric_stable(alpha, &mut step_rng(9, p, 1)))
                .collect();
            let xi = 1.0f64;
            let vals: Vec<f64> = xs.iter().map(|x| (xi * x).cos()).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let expected = (-xi.abs().powf(alpha)).exp();
            assert!((mean - expected).abs() < 4.0 * se, "alpha {alpha}: {mean} vs {expected}");
        }
    }
}
