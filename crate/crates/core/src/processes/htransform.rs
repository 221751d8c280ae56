//! The harmonic change of variable for one-dimensional SDEs whose drift is the
//! derivative of a continuous function `b`.
//!
//! With `Sigma(x) = 2 int_0^x sigma^{-2} db`, the function `h` with
//! `h' = exp(-Sigma)`, `h(0) = 0` maps the process to `Y = h(X)`, which solves
//! the driftless equation `dY = sigma0(Y) dW` with
//! `sigma0(y) = (sigma h')(h^{-1}(y))`.
//!
//! Outside the sample table `b` is extended as a constant, so `Sigma` is
//! constant and `h` is affine there.

use crate::error::{Error, Result};
use crate::problem::Function;

/// A sampled continuous function `b` on an increasing table of abscissae.
#[derive(Debug, Clone, PartialEq)]
pub struct BTable {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

impl BTable {
    pub fn new(xs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != values.len() {
            return Err(Error::Input(
                "b table: need at least two samples and matching lengths".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input("b table: abscissae must be strictly increasing".into()));
        }
        if xs.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::Input("b table: samples must be finite".into()));
        }
        Ok(BTable { xs, values })
    }

    /// Samples `f` at `n` equally spaced points of `[lo, hi]`.
    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n < 2 || !(lo < hi) {
            return Err(Error::Input("b table: need n >= 2 and lo < hi".into()));
        }
        let xs: Vec<f64> = (0..n)
            .map(|k| if k == n - 1 { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
            .collect();
        let values = xs.iter().map(|&x| f(x)).collect();
        Self::new(xs, values)
    }

    fn value(&self, x: f64) -> f64 {
        let (k, w) = segment(&self.xs, x);
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

/// Segment index and weight of `x` in an increasing table, clamped.
#[inline]
fn segment(xs: &[f64], x: f64) -> (usize, f64) {
    let n = xs.len();
    if x <= xs[0] {
        return (0, 0.0);
    }
    if x >= xs[n - 1] {
        return (n - 2, 1.0);
    }
    let k = xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
    (k, (x - xs[k]) / (xs[k + 1] - xs[k]))
}

/// Tabulated `Sigma`, `h`, `h^{-1}` and `sigma0`.
#[derive(Debug, Clone)]
pub struct HTransform {
    xs: Vec<f64>,
    b: Vec<f64>,
    sigma: Function,
    big_sigma: Vec<f64>,
    h: Vec<f64>,
    sigma0: Vec<f64>,
    ta_range: (f64, f64),
}

impl HTransform {
    /// Builds the transform from a `b` table covering `[lo, hi]`.
    pub fn build(table: &BTable, sigma: Function, bounds: (f64, f64)) -> Result<Self> {
        let (lo, hi) = bounds;
        if table.xs[0] > lo.min(0.0) || table.xs[table.xs.len() - 1] < hi.max(0.0) {
            return Err(Error::Input(format!(
                "b table [{}, {}] must cover the bounds [{lo}, {hi}] and the origin",
                table.xs[0],
                table.xs[table.xs.len() - 1]
            )));
        }
        let mut xs = table.xs.clone();
        let mut b = table.values.clone();
        if !xs.contains(&0.0) {
            let k = xs.partition_point(|&v| v < 0.0);
            let b0 = table.value(0.0);
            xs.insert(k, 0.0);
            b.insert(k, b0);
        }
        let origin = xs.iter().position(|&v| v == 0.0).expect("origin inserted");

        let sig = |x: f64| -> Result<f64> {
            let s = sigma
                .eval(0.0, &[x], 0.0, 0.0)
                .map_err(|e| Error::eval(format!("sigma({x})"), e))?;
            if !(s > 0.0) {
                return Err(Error::Input(format!("sigma must be positive, got {s} at x = {x}")));
            }
            Ok(s)
        };
        let sigma_nodes = xs.iter().map(|&x| sig(x)).collect::<Result<Vec<_>>>()?;

        // Riemann-Stieltjes sum against db, sigma^{-2} at segment midpoints
        let mut cumulative = vec![0.0; xs.len()];
        for k in 0..xs.len() - 1 {
            let mid = sig(0.5 * (xs[k] + xs[k + 1]))?;
            cumulative[k + 1] = cumulative[k] + 2.0 * (b[k + 1] - b[k]) / (mid * mid);
        }
        let shift = cumulative[origin];
        let big_sigma: Vec<f64> = cumulative.iter().map(|c| c - shift).collect();

        // exp(-Sigma) integrated exactly on each segment where Sigma is affine
        let mut h = vec![0.0; xs.len()];
        for k in 0..xs.len() - 1 {
            let dx = xs[k + 1] - xs[k];
            let delta = big_sigma[k + 1] - big_sigma[k];
            let factor = if delta.abs() < 1e-12 { 1.0 - 0.5 * delta } else { -(-delta).exp_m1() / delta };
            h[k + 1] = h[k] + (-big_sigma[k]).exp() * dx * factor;
        }
        let h0 = h[origin];
        for v in h.iter_mut() {
            *v -= h0;
        }
        if h.iter().any(|v| !v.is_finite()) || h.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Numerical(
                "h-transform: h is not numerically strictly increasing".into(),
            ));
        }

        let sigma0: Vec<f64> = sigma_nodes
            .iter()
            .zip(&big_sigma)
            .map(|(s, bs)| s * (-bs).exp())
            .collect();
        let ratios = big_sigma.iter().zip(&sigma_nodes).map(|(bs, s)| bs.exp() / s);
        let ta_range = ratios.fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r), hi.max(r)));

        Ok(HTransform {
            xs,
            b,
            sigma,
            big_sigma,
            h,
            sigma0,
            ta_range,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.xs
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma_function(&self) -> &Function {
        &self.sigma
    }

    pub fn sigma_table(&self) -> &[f64] {
        &self.big_sigma
    }

    pub fn h_table(&self) -> &[f64] {
        &self.h
    }

    pub fn sigma0_table(&self) -> &[f64] {
        &self.sigma0
    }

    /// `(min, max)` of `exp(Sigma) / sigma` over the table nodes. Bounded
    /// away from zero and infinity is the two-sided condition the theory assumes.
    pub fn ta_range(&self) -> (f64, f64) {
        self.ta_range
    }

    pub fn big_sigma(&self, x: f64) -> f64 {
        let (k, w) = segment(&self.xs, x);
        self.big_sigma[k] * (1.0 - w) + self.big_sigma[k + 1] * w
    }

    pub fn h_prime(&self, x: f64) -> f64 {
        (-self.big_sigma(x)).exp()
    }

    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] {
            return self.h[0] + (x - self.xs[0]) * (-self.big_sigma[0]).exp();
        }
        if x > self.xs[n - 1] {
            return self.h[n - 1] + (x - self.xs[n - 1]) * (-self.big_sigma[n - 1]).exp();
        }
        let (k, w) = segment(&self.xs, x);
        self.h[k] * (1.0 - w) + self.h[k + 1] * w
    }

    #[inline]
    pub fn h_inv(&self, y: f64) -> f64 {
        let n = self.h.len();
        if y < self.h[0] {
            return self.xs[0] + (y - self.h[0]) / (-self.big_sigma[0]).exp();
        }
        if y > self.h[n - 1] {
            return self.xs[n - 1] + (y - self.h[n - 1]) / (-self.big_sigma[n - 1]).exp();
        }
        let (k, w) = segment(&self.h, y);
        self.xs[k] * (1.0 - w) + self.xs[k + 1] * w
    }

    /// `sigma0(y) = sigma(h^{-1}(y)) h'(h^{-1}(y))`.
    #[inline]
    pub fn sigma0(&self, y: f64) -> Result<f64> {
        let x = self.h_inv(y);
        let s = self
            .sigma
            .eval(0.0, &[x], 0.0, 0.0)
            .map_err(|e| Error::eval(format!("sigma({x})"), e))?;
        Ok(s * self.h_prime(x))
    }
}

/// Builds the transform for a sampled `b` and a diffusion coefficient.
pub fn build_h_transform(table: &BTable, sigma: Function, bounds: (f64, f64)) -> Result<HTransform> {
    HTransform::build(table, sigma, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> Function {
        Function::constant(1.0)
    }

    #[test]
    fn zero_drift_gives_identity() {
        let table = BTable::from_fn(-3.0, 3.0, 601, |_| 0.0).unwrap();
        let sigma = Function::of_x("1+x^2/10", |x| 1.0 + x[0] * x[0] / 10.0);
        let t = build_h_transform(&table, sigma, (-3.0, 3.0)).unwrap();
        for &x in &[-2.5, -0.3, 0.0, 1.7] {
            assert!(t.big_sigma(x).abs() < 1e-15);
            assert!((t.h(x) - x).abs() < 1e-12);
            let expected = 1.0 + x * x / 10.0;
            assert!((t.sigma0(x).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_b_matches_closed_form() {
        let table = BTable::from_fn(-4.0, 4.0, 10_000, |x| x).unwrap();
        let t = build_h_transform(&table, one(), (-4.0, 4.0)).unwrap();
        let mut worst = 0.0f64;
        for (k, &x) in t.nodes().iter().enumerate() {
            let h = (1.0 - (-2.0 * x).exp()) / 2.0;
            worst = worst.max((t.sigma_table()[k] - 2.0 * x).abs());
            worst = worst.max((t.h_table()[k] - h).abs());
            worst = worst.max((t.sigma0_table()[k] - (1.0 - 2.0 * h)).abs());
        }
        assert!(worst < 1e-4, "sup error {worst}");
    }

    #[test]
    fn kinked_b_gives_kinked_sigma() {
        let table = BTable::from_fn(-2.0, 2.0, 1001, |x| x.min(0.0)).unwrap();
        let t = build_h_transform(&table, one(), (-2.0, 2.0)).unwrap();
        for &x in &[-1.9, -0.5, 0.0, 0.4, 1.3] {
            assert!((t.big_sigma(x) - 2.0 * x.min(0.0)).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn structural_invariants() {
        let table = BTable::from_fn(-3.0, 3.0, 2001, |x| (2.0 * x).sin() + 0.3 * x.abs()).unwrap();
        let sigma = Function::of_x("1.2+0.3sin", |x| 1.2 + 0.3 * x[0].sin());
        let t = build_h_transform(&table, sigma.clone(), (-3.0, 3.0)).unwrap();
        assert_eq!(t.h(0.0), 0.0);
        assert!((t.h_prime(0.0) - 1.0).abs() < 1e-15);
        assert!(t.h_table().windows(2).all(|w| w[1] > w[0]));
        for (k, &x) in t.nodes().iter().enumerate() {
            let y = t.h_table()[k];
            assert!((t.h_inv(y) - x).abs() < 1e-8);
            let direct = (1.2 + 0.3 * x.sin()) * t.h_prime(x);
            assert!((t.sigma0(y).unwrap() - direct).abs() <= 1e-8 * direct.abs());
        }
        // affine extension outside the table stays invertible
        for &x in &[-5.0, 4.5] {
            assert!((t.h_inv(t.h(x)) - x).abs() < 1e-9);
        }
        let (lo, hi) = t.ta_range();
        assert!(lo > 0.0 && hi.is_finite() && lo <= hi);
    }

    #[test]
    fn rejects_bad_inputs() {
        let table = BTable::from_fn(-1.0, 1.0, 11, |x| x).unwrap();
        assert!(build_h_transform(&table, Function::constant(0.0), (-1.0, 1.0)).is_err());
        assert!(build_h_transform(&table, one(), (-2.0, 1.0)).is_err());
        assert!(BTable::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }
}
