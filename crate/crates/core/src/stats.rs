//! Order-deterministic sample statistics.

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub const fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            stderr: 0.0,
        }
    }

    /// `|self - other| / sqrt(se_1^2 + se_2^2)`, zero when both agree exactly.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        let diff = self.mean - other.mean;
        if diff == 0.0 {
            return 0.0;
        }
        diff / combined_stderr(self.stderr, other.stderr)
    }
}

pub fn combined_stderr(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Pairwise summation; the result depends only on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Sample mean and standard error `sd / sqrt(n)`. Values are shifted by the
/// first sample, so a constant sample gives its value and a zero error exactly.
pub fn mean_stderr(values: &[f64]) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let shift = values[0];
    let centered: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let offset = pairwise_sum(&centered) / n as f64;
    let mean = shift + offset;
    if n == 1 {
        return Estimate { mean, stderr: 0.0 };
    }
    let squares: Vec<f64> = centered.iter().map(|c| (c - offset) * (c - offset)).collect();
    let var = pairwise_sum(&squares) / (n - 1) as f64;
    Estimate {
        mean,
        stderr: (var / n as f64).sqrt(),
    }
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let e = mean_stderr(values);
    e.stderr * e.stderr * values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constants_are_exact() {
        let e = mean_stderr(&[0.1; 1000]);
        assert_eq!(e, Estimate::exact(0.1));
    }

    #[test]
    fn known_sample() {
        let e = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!((variance(&[1.0, 2.0, 3.0, 4.0]) - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn compensated_sum_telescopes() {
        let v: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let mut s = CompensatedSum::default();
        for w in v.windows(2) {
            s.add(w[1] - w[0]);
        }
        assert_eq!(s.value(), 1.0);
    }

    proptest! {
        #[test]
        fn pairwise_matches_naive(v in proptest::collection::vec(-1e3f64..1e3, 0..500)) {
            let naive: f64 = v.iter().sum();
            prop_assert!((pairwise_sum(&v) - naive).abs() <= 1e-9 * (1.0 + naive.abs()));
        }
    }
}
