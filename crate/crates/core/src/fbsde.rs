//! Backward least-squares Monte Carlo for
//!
//! ```text
//! Y = g(X_T) + int_.^T f(r, X_r, Y_r, Z_r) dV_r - (M_T - M_.),   Z = sqrt(d<M>/dV)
//! ```
//!
//! on one forward ensemble from `(s, x)`. Conditional expectations are
//! regressions on functions of `X_{t_i}`; `Z^2` is the regressed squared
//! one-step innovation divided by `dV_i`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{v_increments, SpaceTimeGrid};
use crate::mild::MildSolution;
use crate::problem::ProblemSpec;
use crate::processes::{PathEnsemble, PathSimulator};
use crate::rng::derive;
use crate::stats::{combined_stderr, mean_stderr, Estimate};

/// Regression features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegressionBasis {
    /// All monomials of total degree `<= p` in the standardized coordinates.
    Polynomial { degree: usize },
    /// Piecewise constant on equal-mass bins of the first coordinate.
    Bins { count: usize },
}

impl RegressionBasis {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RegressionBasis::Polynomial { degree } if degree > 12 => {
                Err(Error::Config("regression: polynomial degree above 12".into()))
            }
            RegressionBasis::Bins { count: 0 } => {
                Err(Error::Config("regression: bin count must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FitKind {
    Polynomial {
        exponents: Vec<Vec<u32>>,
        center: Vec<f64>,
        scale: Vec<f64>,
    },
    Bins {
        /// Upper edges of all but the last bin.
        edges: Vec<f64>,
    },
}

/// A fitted conditional-expectation function.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    kind: FitKind,
    coefficients: Vec<f64>,
    /// Root mean square of the in-sample residuals.
    pub residual_rms: f64,
}

impl Fit {
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.kind {
            FitKind::Polynomial {
                exponents,
                center,
                scale,
            } => {
                let mut acc = 0.0;
                for (e, c) in exponents.iter().zip(&self.coefficients) {
                    let mut term = *c;
                    for (k, &p) in e.iter().enumerate() {
                        if p > 0 {
                            term *= ((x[k] - center[k]) / scale[k]).powi(p as i32);
                        }
                    }
                    acc += term;
                }
                acc
            }
            FitKind::Bins { edges } => self.coefficients[edges.partition_point(|&e| e < x[0])],
        }
    }

    /// Polynomial coefficient of `x_k^p` in original (unstandardized) units,
    /// for a one-dimensional fit. `None` for bin fits.
    pub fn raw_polynomial_1d(&self) -> Option<Vec<f64>> {
        let FitKind::Polynomial {
            exponents,
            center,
            scale,
        } = &self.kind
        else {
            return None;
        };
        if center.len() != 1 {
            return None;
        }
        let degree = exponents.iter().map(|e| e[0] as usize).max().unwrap_or(0);
        let mut raw = vec![0.0; degree + 1];
        // sum_j c_j ((x - m) / s)^j expanded binomially
        for (e, c) in exponents.iter().zip(&self.coefficients) {
            let j = e[0] as usize;
            let factor = c / scale[0].powi(j as i32);
            for k in 0..=j {
                raw[k] += factor * binomial(j, k) * (-center[0]).powi((j - k) as i32);
            }
        }
        Some(raw)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub(crate) fn monomials(d: usize, degree: usize, active: &[bool]) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; d]];
    for total in 1..=degree {
        let mut current = vec![0u32; d];
        fn rec(axis: usize, left: u32, cur: &mut Vec<u32>, active: &[bool], out: &mut Vec<Vec<u32>>) {
            if axis == cur.len() - 1 {
                if left == 0 || active[axis] {
                    cur[axis] = left;
                    out.push(cur.clone());
                    cur[axis] = 0;
                }
                return;
            }
            let max = if active[axis] { left } else { 0 };
            for p in (0..=max).rev() {
                cur[axis] = p;
                rec(axis + 1, left - p, cur, active, out);
            }
            cur[axis] = 0;
        }
        rec(0, total as u32, &mut current, active, &mut out);
    }
    out
}

/// Least squares of `targets` on the basis evaluated at `xs` (row-major,
/// `n x d`), with ridge penalty `ridge` on the normalized Gram matrix.
/// Coordinates with zero spread are dropped from the polynomial features.
pub fn regress(xs: &[f64], d: usize, targets: &[f64], basis: RegressionBasis, ridge: f64) -> Result<Fit> {
    basis.validate()?;
    let n = targets.len();
    if d == 0 || xs.len() != n * d {
        return Err(Error::Input("regress: sample shape mismatch".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Config("regress: ridge must be >= 0".into()));
    }
    let fit = match basis {
        RegressionBasis::Polynomial { degree } => {
            let mut center = vec![0.0; d];
            let mut scale = vec![1.0; d];
            let mut active = vec![false; d];
            for k in 0..d {
                let col: Vec<f64> = (0..n).map(|p| xs[p * d + k]).collect();
                let e = mean_stderr(&col);
                let sd = e.stderr * (n as f64).sqrt();
                center[k] = e.mean;
                if sd > 1e-12 * (1.0 + e.mean.abs()) {
                    scale[k] = sd;
                    active[k] = true;
                }
            }
            let exponents = monomials(d, degree, &active);
            let k = exponents.len();
            if n < k && ridge == 0.0 {
                return Err(Error::Numerical(format!(
                    "regress: {n} samples for {k} basis functions without ridge"
                )));
            }
            let kind = FitKind::Polynomial {
                exponents,
                center,
                scale,
            };
            let probe = Fit {
                kind,
                coefficients: vec![0.0; k],
                residual_rms: 0.0,
            };
            let rows: Vec<Vec<f64>> = (0..n).map(|p| probe.features(&xs[p * d..(p + 1) * d])).collect();
            let mut gram = DMatrix::<f64>::zeros(k, k);
            let mut rhs = DVector::<f64>::zeros(k);
            for (row, y) in rows.iter().zip(targets) {
                for a in 0..k {
                    rhs[a] += row[a] * y;
                    for b in a..k {
                        gram[(a, b)] += row[a] * row[b];
                    }
                }
            }
            for a in 0..k {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            gram /= n as f64;
            rhs /= n as f64;
            for a in 0..k {
                gram[(a, a)] += ridge;
            }
            let solution = gram
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .filter(|s| s.iter().all(|v| v.is_finite()))
                .ok_or_else(|| {
                    Error::Numerical("regress: rank-deficient design matrix (add a ridge term)".into())
                })?;
            Fit {
                coefficients: solution.iter().copied().collect(),
                ..probe
            }
        }
        RegressionBasis::Bins { count } => {
            let mut sorted: Vec<f64> = (0..n).map(|p| xs[p * d]).collect();
            sorted.sort_by(f64::total_cmp);
            let mut edges: Vec<f64> = (1..count).map(|b| sorted[(b * n / count).min(n.saturating_sub(1))]).collect();
            edges.dedup();
            let bins = edges.len() + 1;
            let mut members: Vec<Vec<f64>> = vec![Vec::new(); bins];
            for p in 0..n {
                members[edges.partition_point(|&e| e < xs[p * d])].push(targets[p]);
            }
            let coefficients = members
                .iter()
                .map(|m| {
                    if m.is_empty() {
                        if ridge > 0.0 {
                            Ok(0.0)
                        } else {
                            Err(Error::Numerical("regress: empty bin without ridge".into()))
                        }
                    } else {
                        let mean = mean_stderr(m).mean;
                        Ok(mean * m.len() as f64 / (m.len() as f64 + ridge * n as f64 / bins as f64))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Fit {
                kind: FitKind::Bins { edges },
                coefficients,
                residual_rms: 0.0,
            }
        }
    };
    let sq: Vec<f64> = (0..n)
        .map(|p| {
            let r = targets[p] - fit.predict(&xs[p * d..(p + 1) * d]);
            r * r
        })
        .collect();
    let rms = if n == 0 { 0.0 } else { (crate::stats::pairwise_sum(&sq) / n as f64).sqrt() };
    Ok(Fit {
        residual_rms: rms,
        ..fit
    })
}

impl Fit {
    fn features(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            FitKind::Polynomial {
                exponents,
                center,
                scale,
            } => exponents
                .iter()
                .map(|e| {
                    e.iter()
                        .enumerate()
                        .filter(|(_, p)| **p > 0)
                        .map(|(k, &p)| ((x[k] - center[k]) / scale[k]).powi(p as i32))
                        .product()
                })
                .collect(),
            FitKind::Bins { .. } => unreachable!("bin fits are not built from features"),
        }
    }
}

/// Per-step diagnostics of the backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeStep {
    pub time: f64,
    /// Fit of `E[Y_{i+1} | X_i]`; `None` at the degenerate initial step.
    pub y_fit: Option<Fit>,
    /// Fit of `E[(Y_{i+1} - C_i)^2 | X_i]`.
    pub z_fit: Option<Fit>,
    pub residual_rms: f64,
    /// Mean over paths of the clamped `Z_i`.
    pub mean_z: f64,
    /// Paths whose regressed `Z^2` was negative and clamped.
    pub z_clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub s_index: usize,
    pub origin: Vec<f64>,
    /// `Y` at the origin.
    pub y0: Estimate,
    /// `Z` at the origin.
    pub z0: Estimate,
    /// Steps `s, ..., N-1`.
    pub steps: Vec<BsdeStep>,
    /// `Y_{t_N}` per path.
    pub terminal_y: Vec<f64>,
    pub seed: u64,
}

/// Settings of the backward solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsmcConfig {
    pub paths: usize,
    pub basis: RegressionBasis,
    pub ridge: f64,
}

impl Default for LsmcConfig {
    fn default() -> Self {
        LsmcConfig {
            paths: 100_000,
            basis: RegressionBasis::Polynomial { degree: 4 },
            ridge: 0.0,
        }
    }
}

const FIXED_POINT_ITERATIONS: usize = 50;
const FIXED_POINT_TOLERANCE: f64 = 1e-12;

/// Implicit one-step solve `y = c + f(t, x, y, z) dv` by fixed-point iteration.
fn implicit_step(problem: &ProblemSpec, t: f64, x: &[f64], c: f64, z: f64, dv: f64) -> Result<f64> {
    let mut y = c;
    for _ in 0..FIXED_POINT_ITERATIONS {
        let f = problem
            .driver
            .eval(t, x, y, z)
            .map_err(|e| Error::eval(format!("driver at t = {t}"), e))?;
        let next = c + f * dv;
        let done = (next - y).abs() <= FIXED_POINT_TOLERANCE * (1.0 + next.abs());
        y = next;
        if done || !problem.driver.f.uses_y() {
            break;
        }
    }
    Ok(y)
}

/// Solves the FBSDE from `(t_{s_index}, x)` on `grid` with `cfg.paths` paths.
pub fn lsmc_solve(
    problem: &ProblemSpec,
    s_index: usize,
    x: &[f64],
    grid: &SpaceTimeGrid,
    cfg: &LsmcConfig,
    seed: u64,
) -> Result<BsdeSolution> {
    lsmc_solve_with(&problem.generator, problem, s_index, x, grid, cfg, seed)
}

/// As [`lsmc_solve`] with an explicit path simulator.
pub fn lsmc_solve_with(
    simulator: &dyn PathSimulator,
    problem: &ProblemSpec,
    s_index: usize,
    x: &[f64],
    grid: &SpaceTimeGrid,
    cfg: &LsmcConfig,
    seed: u64,
) -> Result<BsdeSolution> {
    cfg.basis.validate()?;
    let dv = v_increments(grid, &problem.clock)?;
    let max_dv = dv.iter().copied().fold(0.0, f64::max);
    if problem.driver.k_y * max_dv >= 1.0 {
        return Err(Error::Config(format!(
            "fbsde: K_Y * max dV = {} must be below 1; refine the time grid",
            problem.driver.k_y * max_dv
        )));
    }
    if s_index >= grid.last_index() {
        return Err(Error::Config("fbsde: origin must precede the horizon".into()));
    }
    let ens = simulator.simulate_from(s_index, x, grid, &problem.clock, cfg.paths, seed)?;
    backward_sweep(problem, &ens, grid, &dv, cfg, seed)
}

fn backward_sweep(
    problem: &ProblemSpec,
    ens: &PathEnsemble,
    grid: &SpaceTimeGrid,
    dv: &[f64],
    cfg: &LsmcConfig,
    seed: u64,
) -> Result<BsdeSolution> {
    let s = ens.s_index();
    let d = ens.dimension();
    let m = ens.path_count();
    let n_steps = ens.times().len() - 1;
    let terminal_y = (0..m)
        .map(|p| {
            problem
                .g(ens.terminal(p))
                .map_err(|e| Error::eval(format!("terminal_g on path {p}"), e))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut y_next = terminal_y.clone();
    let mut z_next = vec![0.0; m];
    // pathwise driver integral, for the standard error of Y at the origin
    let mut integral = vec![0.0; m];
    let mut steps = Vec::with_capacity(n_steps);
    let mut xs = vec![0.0; m * d];
    let mut y0 = Estimate::exact(0.0);
    let mut z0 = Estimate::exact(0.0);

    for k in (0..n_steps).rev() {
        let i = s + k;
        let t = grid.times()[i];
        let w = dv[i];
        for p in 0..m {
            xs[p * d..(p + 1) * d].copy_from_slice(ens.point(p, k));
        }
        if k == 0 {
            // all paths sit at the origin: plain sample means
            let c = mean_stderr(&y_next);
            let sq: Vec<f64> = y_next.iter().map(|y| (y - c.mean) * (y - c.mean)).collect();
            let (z, z_se) = if w > 0.0 {
                let e2 = mean_stderr(&sq);
                let z = (e2.mean / w).max(0.0).sqrt();
                let se = if z > 0.0 { e2.stderr / w / (2.0 * z) } else { 0.0 };
                (z, se)
            } else {
                (mean_stderr(&z_next).mean, 0.0)
            };
            let y = implicit_step(problem, t, ens.point(0, 0), c.mean, z, w)?;
            let pathwise: Vec<f64> = terminal_y
                .iter()
                .zip(&integral)
                .map(|(g, a)| g + a + (y - c.mean))
                .collect();
            y0 = Estimate {
                mean: y,
                stderr: mean_stderr(&pathwise).stderr.max(c.stderr),
            };
            z0 = Estimate { mean: z, stderr: z_se };
            steps.push(BsdeStep {
                time: t,
                y_fit: None,
                z_fit: None,
                residual_rms: (crate::stats::pairwise_sum(&sq) / m as f64).sqrt(),
                mean_z: z,
                z_clamped: 0,
            });
            break;
        }
        let y_fit = regress(&xs, d, &y_next, cfg.basis, cfg.ridge)
            .map_err(|e| Error::Numerical(format!("fbsde step {i} (t = {t}), Y regression: {e}")))?;
        let cond: Vec<f64> = (0..m).map(|p| y_fit.predict(ens.point(p, k))).collect();
        let (z_fit, z_now, clamped) = if w > 0.0 {
            let sq: Vec<f64> = y_next.iter().zip(&cond).map(|(y, c)| (y - c) * (y - c)).collect();
            let fit = regress(&xs, d, &sq, cfg.basis, cfg.ridge)
                .map_err(|e| Error::Numerical(format!("fbsde step {i} (t = {t}), Z regression: {e}")))?;
            let mut clamped = 0usize;
            let z: Vec<f64> = (0..m)
                .map(|p| {
                    let q = fit.predict(ens.point(p, k));
                    if q < 0.0 {
                        clamped += 1;
                    }
                    (q.max(0.0) / w).sqrt()
                })
                .collect();
            (Some(fit), z, clamped)
        } else {
            (None, z_next.clone(), 0)
        };
        let y_now = (0..m)
            .into_par_iter()
            .map(|p| implicit_step(problem, t, ens.point(p, k), cond[p], z_now[p], w))
            .collect::<Result<Vec<f64>>>()?;
        for p in 0..m {
            integral[p] += y_now[p] - cond[p];
        }
        steps.push(BsdeStep {
            time: t,
            residual_rms: y_fit.residual_rms,
            y_fit: Some(y_fit),
            z_fit,
            mean_z: mean_stderr(&z_now).mean,
            z_clamped: clamped,
        });
        y_next = y_now;
        z_next = z_now;
    }
    steps.reverse();
    Ok(BsdeSolution {
        s_index: s,
        origin: ens.origin().to_vec(),
        y0,
        z0,
        steps,
        terminal_y,
        seed,
    })
}

/// One origin of a mild/FBSDE comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscheckRow {
    pub s: f64,
    pub x: Vec<f64>,
    pub u: Estimate,
    pub y0: Estimate,
    pub v: Estimate,
    pub z0: Estimate,
    /// Combined standard error of `u - y0`.
    pub combined_stderr: f64,
    /// Combined standard error of `v - z0`.
    pub combined_stderr_z: f64,
}

impl CrosscheckRow {
    pub fn u_gap(&self) -> f64 {
        (self.u.mean - self.y0.mean).abs()
    }

    pub fn v_gap(&self) -> f64 {
        (self.v.mean - self.z0.mean).abs()
    }
}

/// Runs the backward solver with fresh seeds at each `(time index, node)`
/// origin and pairs the results with the mild solution.
pub fn crosscheck(
    mild: &MildSolution,
    problem: &ProblemSpec,
    grid: &SpaceTimeGrid,
    origins: &[(usize, usize)],
    cfg: &LsmcConfig,
    seed: u64,
) -> Result<Vec<CrosscheckRow>> {
    if mild.u.value.grid() != grid {
        return Err(Error::Input("crosscheck: mild solution lives on another grid".into()));
    }
    origins
        .iter()
        .enumerate()
        .map(|(k, &(i, node))| {
            if i >= grid.last_index() || node >= grid.node_count() {
                return Err(Error::Config(format!("crosscheck: origin ({i}, {node}) is not an interior grid cell")));
            }
            let x = grid.node(node);
            let bsde = lsmc_solve(problem, i, &x, grid, cfg, derive(seed, 0xc0ffee + k as u64))?;
            let u = mild.u_at(i, node);
            let v = mild.v_at(i, node);
            Ok(CrosscheckRow {
                s: grid.times()[i],
                x,
                combined_stderr: combined_stderr(u.stderr, bsde.y0.stderr),
                combined_stderr_z: combined_stderr(v.stderr, bsde.z0.stderr),
                u,
                y0: bsde.y0,
                v,
                z0: bsde.z0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ClockV;
    use crate::problem::{Function, LipschitzDriver};
    use crate::processes::GeneratorSpec;
    use crate::rng::step_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_targets_are_captured_by_the_intercept() {
        let xs: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        for basis in [RegressionBasis::Polynomial { degree: 3 }, RegressionBasis::Bins { count: 7 }] {
            let fit = regress(&xs, 1, &vec![2.5; 100], basis, 0.0).unwrap();
            assert!(fit.residual_rms < 1e-12);
            assert!((fit.predict(&[3.3]) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_targets_fit_exactly() {
        let xs: Vec<f64> = (0..200).flat_map(|k| [(k as f64).sin(), (k as f64 * 0.7).cos()]).collect();
        let ys: Vec<f64> = xs.chunks(2).map(|x| 1.0 + 2.0 * x[0] - 3.0 * x[1]).collect();
        let fit = regress(&xs, 2, &ys, RegressionBasis::Polynomial { degree: 1 }, 0.0).unwrap();
        assert!(fit.residual_rms <= 1e-10, "{}", fit.residual_rms);
        assert!((fit.predict(&[0.3, -0.2]) - (1.0 + 0.6 + 0.6)).abs() < 1e-10);
    }

    #[test]
    fn quadratic_coefficient_matches_normal_equations() {
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for p in 0..n {
            let mut rng = step_rng(5, p as u64, 0);
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            xs.push(x);
            ys.push(x * x + e);
        }
        let fit = regress(&xs, 1, &ys, RegressionBasis::Polynomial { degree: 2 }, 0.0).unwrap();
        let raw = fit.raw_polynomial_1d().unwrap();
        // independent oracle: 3x3 normal equations in raw monomials
        let mut g = [[0.0f64; 3]; 3];
        let mut b = [0.0f64; 3];
        for (x, y) in xs.iter().zip(&ys) {
            let row = [1.0, *x, x * x];
            for i in 0..3 {
                b[i] += row[i] * y;
                for j in 0..3 {
                    g[i][j] += row[i] * row[j];
                }
            }
        }
        let oracle = solve3(g, b);
        for k in 0..3 {
            assert!((raw[k] - oracle[k]).abs() < 1e-8, "{raw:?} vs {oracle:?}");
        }
        assert!((raw[2] - 1.0).abs() < 0.05);
    }

    fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
        for c in 0..3 {
            let piv = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            for r in c + 1..3 {
                let f = a[r][c] / a[c][c];
                for k in c..3 {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = [0.0; 3];
        for r in (0..3).rev() {
            x[r] = (b[r] - (r + 1..3).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
        }
        x
    }

    #[test]
    fn underdetermined_without_ridge_is_an_error() {
        let xs = [0.0, 1.0];
        let err = regress(&xs, 1, &[1.0, 2.0], RegressionBasis::Polynomial { degree: 3 }, 0.0);
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert!(regress(&xs, 1, &[1.0, 2.0], RegressionBasis::Polynomial { degree: 3 }, 1e-3).is_ok());
    }

    fn problem(f: &str, k_y: f64, g: &str) -> ProblemSpec {
        let driver = LipschitzDriver::new(Function::parse(f, 1).unwrap(), k_y, 0.3, 0.0).unwrap();
        ProblemSpec::new(GeneratorSpec::brownian(1), driver, Function::parse(g, 1).unwrap(), 1.0, ClockV::Identity)
            .unwrap()
    }

    fn grid(steps: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::uniform(1.0, steps, vec![-4.0], vec![4.0], vec![41]).unwrap()
    }

    #[test]
    fn martingale_terminal_gives_unit_z() {
        let p = problem("0", 0.0, "x1");
        let cfg = LsmcConfig {
            paths: 20_000,
            ..Default::default()
        };
        let sol = lsmc_solve(&p, 0, &[0.7], &grid(20), &cfg, 3).unwrap();
        assert!((sol.y0.mean - 0.7).abs() < 3.0 * sol.y0.stderr);
        assert!((sol.z0.mean - 1.0).abs() < 0.1, "{:?}", sol.z0);
        for step in &sol.steps[1..] {
            assert!((step.mean_z - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn terminal_values_and_single_bin_tower_property() {
        let p = problem("0", 0.0, "sin(x1) + x1^2");
        let g = grid(10);
        let cfg = LsmcConfig {
            paths: 5000,
            basis: RegressionBasis::Bins { count: 1 },
            ridge: 0.0,
        };
        let sol = lsmc_solve(&p, 0, &[0.2], &g, &cfg, 8).unwrap();
        let ens = p.generator.simulate_from(0, &[0.2], &g, &ClockV::Identity, 5000, 8).unwrap();
        let direct: Vec<f64> = (0..5000).map(|q| {
            let x = ens.terminal(q)[0];
            x.sin() + x * x
        }).collect();
        assert_eq!(sol.terminal_y, direct);
        let plain = mean_stderr(&direct).mean;
        assert!((sol.y0.mean - plain).abs() <= 1e-12 * plain.abs().max(1.0));
        assert!(sol.steps.iter().all(|s| s.mean_z >= 0.0));
    }

    #[test]
    fn linear_driver_matches_integrating_factor() {
        let p = problem("0.5*y", 0.5, "x1^2");
        let cfg = LsmcConfig {
            paths: 50_000,
            ..Default::default()
        };
        let sol = lsmc_solve(&p, 0, &[0.0], &grid(50), &cfg, 12).unwrap();
        let exact = 0.5f64.exp();
        let tol = (3.0 * sol.y0.stderr).max(0.02 * exact);
        assert!((sol.y0.mean - exact).abs() < tol, "{:?}", sol.y0);
    }

    #[test]
    fn coarse_grid_violating_the_contraction_bound_is_rejected() {
        let p = problem("2*y", 2.0, "x1");
        let err = lsmc_solve(&p, 0, &[0.0], &grid(1), &LsmcConfig::default(), 1);
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("K_Y")));
    }
}
