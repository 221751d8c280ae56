//! The problem data model: scalar functions, the Lipschitz driver and the
//! full semilinear problem instance.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;

use crate::error::{Error, Result};
use crate::expr::{Bindings, EvalError, Expression, Var};
use crate::grid::{ClockV, SpaceTimeGrid};
use crate::processes::GeneratorSpec;

pub type NativeFn = Arc<dyn Fn(f64, &[f64], f64, f64) -> f64 + Send + Sync>;

/// A scalar function of `(t, x, y, z)`, given either as a parsed expression
/// or as native code.
#[derive(Clone)]
pub enum Function {
    Expr(Arc<Expression>),
    Native {
        label: String,
        f: NativeFn,
        uses_t: bool,
        uses_y: bool,
        uses_z: bool,
    },
}

impl fmt::Debug for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Function({})", self.describe())
    }
}

impl Function {
    pub fn parse(text: &str, dimension: usize) -> Result<Self> {
        Ok(Function::Expr(Arc::new(Expression::parse(text, dimension)?)))
    }

    pub fn constant(c: f64) -> Self {
        Function::Expr(Arc::new(Expression::from_node(crate::expr::Node::Const(c), 0)))
    }

    /// Native function of `(t, x, y, z)`; conservatively marked as using every argument.
    pub fn native(
        label: impl Into<String>,
        f: impl Fn(f64, &[f64], f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Function::Native {
            label: label.into(),
            f: Arc::new(f),
            uses_t: true,
            uses_y: true,
            uses_z: true,
        }
    }

    /// Native function of `x` only.
    pub fn of_x(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Function::Native {
            label: label.into(),
            f: Arc::new(move |_, x, _, _| f(x)),
            uses_t: false,
            uses_y: false,
            uses_z: false,
        }
    }

    /// Native function of `(t, x)`.
    pub fn of_tx(
        label: impl Into<String>,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Function::Native {
            label: label.into(),
            f: Arc::new(move |t, x, _, _| f(t, x)),
            uses_t: true,
            uses_y: false,
            uses_z: false,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: f64) -> std::result::Result<f64, EvalError> {
        match self {
            Function::Expr(e) => e.eval(&Bindings::new(t, x, y, z)),
            Function::Native { f, label, .. } => {
                let v = f(t, x, y, z);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(EvalError::NonFinite { node: label.clone() })
                }
            }
        }
    }

    pub fn uses_t(&self) -> bool {
        match self {
            Function::Expr(e) => e.uses(Var::T),
            Function::Native { uses_t, .. } => *uses_t,
        }
    }

    pub fn uses_y(&self) -> bool {
        match self {
            Function::Expr(e) => e.uses(Var::Y),
            Function::Native { uses_y, .. } => *uses_y,
        }
    }

    pub fn uses_z(&self) -> bool {
        match self {
            Function::Expr(e) => e.uses(Var::Z),
            Function::Native { uses_z, .. } => *uses_z,
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Function::Expr(e) => e.as_constant(),
            Function::Native { .. } => None,
        }
    }

    /// Stable textual identity, used in fingerprints.
    pub fn describe(&self) -> String {
        match self {
            Function::Expr(e) => e.to_string(),
            Function::Native { label, .. } => format!("native:{label}"),
        }
    }
}

/// Outcome of sampling difference quotients of a driver.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzCheck {
    pub max_quotient_y: f64,
    pub max_quotient_z: f64,
    pub samples: usize,
    pub within_bounds: bool,
}

/// The driver `f(t, x, y, z)` together with its declared constants.
#[derive(Debug, Clone)]
pub struct LipschitzDriver {
    pub f: Function,
    pub k_y: f64,
    pub k_z: f64,
    pub c_prime: f64,
    pub lipschitz_verified: bool,
}

impl LipschitzDriver {
    pub fn new(f: Function, k_y: f64, k_z: f64, c_prime: f64) -> Result<Self> {
        for (name, v) in [("K_Y", k_y), ("K_Z", k_z), ("C_prime", c_prime)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("driver: {name} must be finite and >= 0")));
            }
        }
        Ok(LipschitzDriver {
            f,
            k_y,
            k_z,
            c_prime,
            lipschitz_verified: false,
        })
    }

    pub fn zero() -> Self {
        LipschitzDriver {
            f: Function::constant(0.0),
            k_y: 0.0,
            k_z: 0.0,
            c_prime: 0.0,
            lipschitz_verified: true,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.f.as_constant() == Some(0.0)
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: f64) -> std::result::Result<f64, EvalError> {
        self.f.eval(t, x, y, z)
    }

    /// Spot-checks the declared constants with random difference quotients
    /// over the grid box and `|y|, |z| <= range`. Sets `lipschitz_verified`
    /// when no quotient exceeds its constant by more than 1%.
    pub fn check_lipschitz(
        &mut self,
        grid: &SpaceTimeGrid,
        range: f64,
        samples: usize,
        seed: u64,
    ) -> Result<LipschitzCheck> {
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let d = grid.dimension();
        let mut x = vec![0.0; d];
        let (mut qy, mut qz) = (0.0f64, 0.0f64);
        for _ in 0..samples {
            let t = grid.times()[0] + rng.random::<f64>() * (grid.horizon() - grid.times()[0]);
            for (k, xk) in x.iter_mut().enumerate() {
                *xk = grid.space_min()[k]
                    + rng.random::<f64>() * (grid.space_max()[k] - grid.space_min()[k]);
            }
            let y1 = range * (2.0 * rng.random::<f64>() - 1.0);
            let y2 = range * (2.0 * rng.random::<f64>() - 1.0);
            let z1 = range * rng.random::<f64>();
            let z2 = range * rng.random::<f64>();
            let ev = |y, z| self.eval(t, &x, y, z).map_err(|e| Error::eval("lipschitz check", e));
            if (y1 - y2).abs() > 1e-9 {
                qy = qy.max((ev(y1, z1)? - ev(y2, z1)?).abs() / (y1 - y2).abs());
            }
            if (z1 - z2).abs() > 1e-9 {
                qz = qz.max((ev(y1, z1)? - ev(y1, z2)?).abs() / (z1 - z2).abs());
            }
        }
        let within = qy <= self.k_y * 1.01 + 1e-12 && qz <= self.k_z * 1.01 + 1e-12;
        self.lipschitz_verified = within;
        Ok(LipschitzCheck {
            max_quotient_y: qy,
            max_quotient_z: qz,
            samples,
            within_bounds: within,
        })
    }
}

/// A complete semilinear problem `a(u) + f(., ., u, sqrt(Gamma(u, u))) = 0`, `u(T, .) = g`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub generator: GeneratorSpec,
    pub driver: LipschitzDriver,
    pub terminal_g: Function,
    pub horizon: f64,
    pub clock: ClockV,
    pub growth_zeta: f64,
    pub growth_eta: f64,
}

impl ProblemSpec {
    pub fn new(
        generator: GeneratorSpec,
        driver: LipschitzDriver,
        terminal_g: Function,
        horizon: f64,
        clock: ClockV,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config("problem: horizon_T must be positive".into()));
        }
        if !clock.covers(horizon) {
            return Err(Error::Config("problem: clock does not cover [0, horizon_T]".into()));
        }
        Ok(ProblemSpec {
            generator,
            driver,
            terminal_g,
            horizon,
            clock,
            growth_zeta: 0.0,
            growth_eta: 0.0,
        })
    }

    pub fn with_growth(mut self, zeta: f64, eta: f64) -> Self {
        self.growth_zeta = zeta;
        self.growth_eta = eta;
        self
    }

    #[inline]
    pub fn g(&self, x: &[f64]) -> std::result::Result<f64, EvalError> {
        self.terminal_g.eval(self.horizon, x, 0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declared_constants_are_checked_by_sampling() {
        let grid = SpaceTimeGrid::uniform(1.0, 4, vec![-1.0], vec![1.0], vec![5]).unwrap();
        let mut ok = LipschitzDriver::new(Function::parse("0.5*y + 0.3*z", 1).unwrap(), 0.5, 0.3, 0.0)
            .unwrap();
        let report = ok.check_lipschitz(&grid, 5.0, 500, 1).unwrap();
        assert!(report.within_bounds);
        assert!(ok.lipschitz_verified);
        assert!((report.max_quotient_y - 0.5).abs() < 1e-9);

        let mut bad = LipschitzDriver::new(Function::parse("2*y", 1).unwrap(), 1.0, 0.0, 0.0).unwrap();
        assert!(!bad.check_lipschitz(&grid, 5.0, 100, 1).unwrap().within_bounds);
        assert!(!bad.lipschitz_verified);
        assert!(LipschitzDriver::new(Function::constant(0.0), -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn function_metadata() {
        let f = Function::parse("x1^2", 1).unwrap();
        assert!(!f.uses_y());
        assert_eq!(f.eval(0.0, &[3.0], 0.0, 0.0).unwrap(), 9.0);
        assert_eq!(Function::constant(0.0).as_constant(), Some(0.0));
        let n = Function::of_x("bad", |_| f64::NAN);
        assert!(n.eval(0.0, &[0.0], 0.0, 0.0).is_err());
    }
}
