//! Picard iteration for the decoupled mild solution `(u, v)`:
//!
//! ```text
//! u(s,x)   = P_{s,T}[g](x)   + int_s^T P_{s,r}[f(r, ., u, v)](x) dV_r
//! u^2(s,x) = P_{s,T}[g^2](x) - int_s^T P_{s,r}[v^2 - 2 u f](x) dV_r
//! ```
//!
//! Every semigroup term is estimated on the frozen cache, so one Picard step
//! is a deterministic map between fields. Running integrals use left-endpoint
//! sums over the grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{field_distance, ScalarField};
use crate::grid::SpaceTimeGrid;
use crate::problem::ProblemSpec;
use crate::processes::{PathEnsemble, PathSimulator};
use crate::semigroup::EnsembleCache;
use crate::stats::{mean_stderr, CompensatedSum, Estimate};

/// How `v` is identified from `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VScheme {
    /// Backward solve of the second mild line for `w = v^2`.
    Volterra,
    /// One-step conditional second moment of the increments of `u(t, X_t)`.
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardConfig {
    pub max_iterations: usize,
    /// Stop once the sup-norm change of `u` falls below this.
    pub tolerance: f64,
    pub v_scheme: VScheme,
    /// `u <- (1 - damping) u_k + damping * update`.
    pub damping: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iterations: 30,
            tolerance: 1e-4,
            v_scheme: VScheme::Variance,
            damping: 1.0,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("picard: max_iterations must be at least 1".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config("picard: tolerance must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config("picard: damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A field together with the per-node standard error of its estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEstimate {
    pub value: ScalarField,
    pub stderr: ScalarField,
}

/// Negative `v^2` estimates set to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClampTelemetry {
    pub count: usize,
    /// Sum of the clamped magnitudes.
    pub total: f64,
    pub max: f64,
}

impl ClampTelemetry {
    fn record(&mut self, w: f64) {
        if w < 0.0 {
            self.count += 1;
            self.total += -w;
            self.max = self.max.max(-w);
        }
    }

    fn merge(&mut self, other: &ClampTelemetry) {
        self.count += other.count;
        self.total += other.total;
        self.max = self.max.max(other.max);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VUpdate {
    pub v: FieldEstimate,
    pub clamps: ClampTelemetry,
    pub warnings: Vec<String>,
}

/// Sup-norm residual of one mild line.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LineResidual {
    /// `sup |LHS - RHS|` over the cells considered.
    pub sup: f64,
    /// Largest per-cell standard error of the right-hand side.
    pub stderr: f64,
    /// `sup_cells |LHS - RHS| / max(3 stderr_cell, relative * scale)`.
    pub normalized: f64,
}

impl LineResidual {
    fn absorb(&mut self, residual: f64, stderr: f64, allowance_floor: f64) {
        self.sup = self.sup.max(residual);
        self.stderr = self.stderr.max(stderr);
        let allowance = (3.0 * stderr).max(allowance_floor);
        let ratio = if residual == 0.0 {
            0.0
        } else if allowance > 0.0 {
            residual / allowance
        } else {
            f64::INFINITY
        };
        self.normalized = self.normalized.max(ratio);
    }
}

/// Plug-in residuals of both mild lines, over every cell and over the
/// resolved cells whose paths stay inside the spatial box at least 99% of
/// the time (elsewhere clamped evaluation dominates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MildResiduals {
    /// `u - (P[g] + int P[f])`.
    pub line_1: LineResidual,
    /// `u^2 - (P[g^2] - int P[v^2 - 2uf])`.
    pub line_2: LineResidual,
    pub resolved_1: LineResidual,
    pub resolved_2: LineResidual,
    pub cells: usize,
    pub resolved_cells: usize,
    /// `sup |u|` and `sup |u^2|`.
    pub scale_1: f64,
    pub scale_2: f64,
    /// Share of the scales granted in the normalized ratios.
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct MildSolution {
    pub u: FieldEstimate,
    pub v: FieldEstimate,
    pub iterations: usize,
    /// `||u_{k+1} - u_k||_sup` per iteration.
    pub deltas: Vec<f64>,
    pub converged: bool,
    pub residuals: MildResiduals,
    pub clamps: ClampTelemetry,
    /// Share of simulated path points outside the spatial box.
    pub out_of_bounds: f64,
    pub warnings: Vec<String>,
}

impl MildSolution {
    pub fn u_at(&self, time_index: usize, node: usize) -> Estimate {
        Estimate {
            mean: self.u.value.at(time_index, node),
            stderr: self.u.stderr.at(time_index, node),
        }
    }

    pub fn v_at(&self, time_index: usize, node: usize) -> Estimate {
        Estimate {
            mean: self.v.value.at(time_index, node),
            stderr: self.v.stderr.at(time_index, node),
        }
    }
}

fn check_inputs(problem: &ProblemSpec, cache: &EnsembleCache, fields: &[&ScalarField]) -> Result<()> {
    if !cache.matches(&problem.generator as &dyn PathSimulator, cache.grid(), &problem.clock) {
        return Err(Error::Config(
            "mild: cache was built for a different generator or clock".into(),
        ));
    }
    if (cache.grid().horizon() - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(Error::Config(format!(
            "mild: grid horizon {} differs from horizon_T {}",
            cache.grid().horizon(),
            problem.horizon
        )));
    }
    for f in fields {
        if f.grid() != cache.grid() {
            return Err(Error::Input("mild: field grid differs from the cache grid".into()));
        }
    }
    Ok(())
}

fn cell_context(grid: &SpaceTimeGrid, i: usize, node: usize) -> String {
    format!("cell (t = {}, x = {:?})", grid.times()[i], grid.node(node))
}

fn g_at(problem: &ProblemSpec, grid: &SpaceTimeGrid, x: &[f64], i: usize, node: usize) -> Result<f64> {
    problem
        .g(x)
        .map_err(|e| Error::eval(format!("terminal_g at {}", cell_context(grid, i, node)), e))
}

/// Driver value along a path point, reading `u` and `v` only when `f` uses them.
#[inline]
fn driver_at(
    problem: &ProblemSpec,
    u: &ScalarField,
    v: &ScalarField,
    i: usize,
    x: &[f64],
) -> std::result::Result<f64, crate::expr::EvalError> {
    let f = &problem.driver.f;
    let y = if f.uses_y() { u.value_at(i, x) } else { 0.0 };
    let z = if f.uses_z() { v.value_at(i, x) } else { 0.0 };
    problem.driver.eval(u.grid().times()[i], x, y, z)
}

/// Per-path `g(X_T) + sum_k f(t_k, X_k, u(t_k, X_k), v(t_k, X_k)) dV_k`.
fn line_one_samples(
    ens: &PathEnsemble,
    problem: &ProblemSpec,
    dv: &[f64],
    u: &ScalarField,
    v: &ScalarField,
    node: usize,
) -> Result<Vec<f64>> {
    let grid = u.grid();
    let s = ens.s_index();
    let steps = ens.times().len() - 1;
    let constant_f = problem.driver.f.as_constant();
    let mut out = Vec::with_capacity(ens.path_count());
    for p in 0..ens.path_count() {
        let mut acc = CompensatedSum::default();
        acc.add(g_at(problem, grid, ens.terminal(p), s, node)?);
        for k in 0..steps {
            let w = dv[s + k];
            let f = match constant_f {
                Some(c) => c,
                None => driver_at(problem, u, v, s + k, ens.point(p, k)).map_err(|e| {
                    Error::eval(format!("driver on path {p} from {}", cell_context(grid, s, node)), e)
                })?,
            };
            acc.add(f * w);
        }
        out.push(acc.value());
    }
    Ok(out)
}

fn cells(grid: &SpaceTimeGrid) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    let nodes = grid.node_count();
    (0..grid.times().len() * nodes)
        .into_par_iter()
        .map(move |c| (c / nodes, c % nodes))
}

fn assemble(grid: &SpaceTimeGrid, estimates: Vec<Estimate>) -> Result<FieldEstimate> {
    let (value, stderr): (Vec<f64>, Vec<f64>) = estimates.into_iter().map(|e| (e.mean, e.stderr)).unzip();
    Ok(FieldEstimate {
        value: ScalarField::from_values(grid, value)?,
        stderr: ScalarField::from_values(grid, stderr)?,
    })
}

/// One application of the first mild line: `P[g] + int P[f(., ., u_k, v_k)] dV`.
/// The terminal row is `g` at the nodes exactly.
pub fn update_u(
    u_k: &ScalarField,
    v_k: &ScalarField,
    problem: &ProblemSpec,
    cache: &EnsembleCache,
) -> Result<FieldEstimate> {
    check_inputs(problem, cache, &[u_k, v_k])?;
    let grid = cache.grid();
    let last = grid.last_index();
    let estimates = cells(grid)
        .map(|(i, node)| {
            if i == last {
                let x = grid.node(node);
                return Ok(Estimate::exact(g_at(problem, grid, &x, i, node)?));
            }
            let ens = cache.ensemble(i, node)?;
            let samples = line_one_samples(&ens, problem, cache.dv(), u_k, v_k, node)?;
            Ok(mean_stderr(&samples))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(grid, estimates)
}

/// Backward solve of the second mild line for `w = v^2`.
///
/// At `t_i` the left-endpoint term of `r = t_i` is `w(t_i, x) dV_i`, so
/// `w(t_i, x) dV_i = P[g^2] - u^2 + 2 u f dV_i - sum_{j > i} E[(w - 2uf)(t_j, X_j)] dV_j`
/// with `w` at later times taken from the same sweep.
pub fn update_v_volterra(
    u_next: &ScalarField,
    u_k: &ScalarField,
    v_k: &ScalarField,
    problem: &ProblemSpec,
    cache: &EnsembleCache,
) -> Result<VUpdate> {
    check_inputs(problem, cache, &[u_next, u_k, v_k])?;
    let _ = u_k;
    let grid = cache.grid();
    let nodes = grid.node_count();
    let n_times = grid.times().len();
    let dv = cache.dv();
    let mut w = vec![0.0; n_times * nodes];
    let mut se = vec![0.0; n_times * nodes];
    let mut clamps = ClampTelemetry::default();
    let mut warnings = Vec::new();
    let mut flat_levels = 0usize;

    for i in (0..n_times - 1).rev() {
        if dv[i] <= 0.0 {
            let (lo, hi) = w.split_at_mut((i + 1) * nodes);
            lo[i * nodes..].copy_from_slice(&hi[..nodes]);
            let (lo, hi) = se.split_at_mut((i + 1) * nodes);
            lo[i * nodes..].copy_from_slice(&hi[..nodes]);
            flat_levels += 1;
            continue;
        }
        let w_later = ScalarField::from_values(grid, w.clone())?;
        let level = (0..nodes)
            .into_par_iter()
            .map(|node| {
                let ens = cache.ensemble(i, node)?;
                let x = grid.node(node);
                let u0 = u_next.at(i, node);
                let f0 = driver_at(problem, u_next, v_k, i, &x)
                    .map_err(|e| Error::eval(format!("driver at {}", cell_context(grid, i, node)), e))?;
                let steps = ens.times().len() - 1;
                let mut influence = Vec::with_capacity(ens.path_count());
                let mut q_values = Vec::with_capacity(ens.path_count());
                for p in 0..ens.path_count() {
                    let gt = g_at(problem, grid, ens.terminal(p), i, node)?;
                    let mut q = CompensatedSum::default();
                    let mut a = CompensatedSum::default();
                    q.add(gt * gt);
                    a.add(gt);
                    a.add(f0 * dv[i]);
                    for k in 1..steps {
                        let j = i + k;
                        let xj = ens.point(p, k);
                        let uj = u_next.value_at(j, xj);
                        let fj = driver_at(problem, u_next, v_k, j, xj).map_err(|e| {
                            Error::eval(format!("driver on path {p} from {}", cell_context(grid, i, node)), e)
                        })?;
                        q.add(-(w_later.value_at(j, xj) - 2.0 * uj * fj) * dv[j]);
                        a.add(fj * dv[j]);
                    }
                    q_values.push(q.value());
                    influence.push(q.value() - 2.0 * u0 * a.value());
                }
                let q_mean = mean_stderr(&q_values).mean;
                let raw = (q_mean - u0 * u0 + 2.0 * u0 * f0 * dv[i]) / dv[i];
                let se = mean_stderr(&influence).stderr / dv[i];
                Ok((raw, se))
            })
            .collect::<Result<Vec<_>>>()?;
        for (node, (raw, s)) in level.into_iter().enumerate() {
            clamps.record(raw);
            w[i * nodes + node] = raw.max(0.0);
            se[i * nodes + node] = s;
        }
    }
    // the terminal level has no step of its own; use its left neighbour
    let last = n_times - 1;
    for node in 0..nodes {
        w[last * nodes + node] = w[(last - 1) * nodes + node];
        se[last * nodes + node] = se[(last - 1) * nodes + node];
    }
    if flat_levels == n_times - 1 {
        warnings.push("v undefined: the clock is flat on the whole grid; v set to 0".into());
    } else if flat_levels > 0 {
        warnings.push(format!("{flat_levels} time levels with dV = 0 carry v from the next level"));
    }
    Ok(VUpdate {
        v: root_fields(grid, &w, &se)?,
        clamps,
        warnings,
    })
}

/// `v = sqrt(w)` with the delta-method error `se_w / (2 v)`.
fn root_fields(grid: &SpaceTimeGrid, w: &[f64], se_w: &[f64]) -> Result<FieldEstimate> {
    let v: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let se: Vec<f64> = v
        .iter()
        .zip(se_w)
        .map(|(v, s)| if *v > 0.0 { s / (2.0 * v) } else { s.sqrt() })
        .collect();
    Ok(FieldEstimate {
        value: ScalarField::from_values(grid, v)?,
        stderr: ScalarField::from_values(grid, se)?,
    })
}

/// `v^2(t_i, x) = E[(u(t_{i+1}, X_{i+1}) - u(t_i, x) + f dV_i)^2] / dV_i` on
/// each cell's first step.
///
/// A step that leaves the spatial box is evaluated at its mirror image
/// `2x - X_{i+1}` about the cell's node, which keeps the leading term
/// `(grad u . dX)^2` of the squared increment where the clamped field is flat.
pub fn update_v_variance(
    u_next: &ScalarField,
    v_prev: &ScalarField,
    problem: &ProblemSpec,
    cache: &EnsembleCache,
) -> Result<VUpdate> {
    check_inputs(problem, cache, &[u_next, v_prev])?;
    let grid = cache.grid();
    let nodes = grid.node_count();
    let n_times = grid.times().len();
    let dv = cache.dv();
    let level_values = cells(grid)
        .map(|(i, node)| {
            if i == n_times - 1 || dv[i] <= 0.0 {
                return Ok(None);
            }
            let ens = cache.ensemble(i, node)?;
            let x = grid.node(node);
            let u0 = u_next.at(i, node);
            let f0 = driver_at(problem, u_next, v_prev, i, &x)
                .map_err(|e| Error::eval(format!("driver at {}", cell_context(grid, i, node)), e))?;
            let mut mirror = x.clone();
            let squares: Vec<f64> = (0..ens.path_count())
                .map(|p| {
                    let x1 = ens.point(p, 1);
                    let at = if grid.contains(x1) {
                        x1
                    } else {
                        for (m, (a, b)) in mirror.iter_mut().zip(x.iter().zip(x1)) {
                            *m = 2.0 * a - b;
                        }
                        &mirror[..]
                    };
                    let inc = u_next.value_at(i + 1, at) - u0 + f0 * dv[i];
                    inc * inc
                })
                .collect();
            let e = mean_stderr(&squares);
            Ok(Some((e.mean / dv[i], e.stderr / dv[i])))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = vec![0.0; n_times * nodes];
    let mut se = vec![0.0; n_times * nodes];
    let mut warnings = Vec::new();
    let mut flat = 0usize;
    // carry missing levels from the right, then fill the terminal level from the left
    for i in (0..n_times - 1).rev() {
        for node in 0..nodes {
            let k = i * nodes + node;
            match level_values[k] {
                Some((wv, s)) => {
                    w[k] = wv;
                    se[k] = s;
                }
                None => {
                    w[k] = w[k + nodes];
                    se[k] = se[k + nodes];
                }
            }
        }
        if dv[i] <= 0.0 {
            flat += 1;
        }
    }
    let last = n_times - 1;
    for node in 0..nodes {
        w[last * nodes + node] = w[(last - 1) * nodes + node];
        se[last * nodes + node] = se[(last - 1) * nodes + node];
    }
    if flat > 0 {
        warnings.push(format!("{flat} time levels with dV = 0 carry v from the next level"));
    }
    Ok(VUpdate {
        v: root_fields(grid, &w, &se)?,
        clamps: ClampTelemetry::default(),
        warnings,
    })
}

/// Plug-in check of both mild lines for a candidate pair on the frozen cache.
/// `relative` is the share of the field scale granted in the normalized ratios.
pub fn mild_residuals(
    u: &ScalarField,
    v: &ScalarField,
    problem: &ProblemSpec,
    cache: &EnsembleCache,
    relative: f64,
) -> Result<MildResiduals> {
    check_inputs(problem, cache, &[u, v])?;
    let grid = cache.grid();
    let dv = cache.dv();
    let last = grid.last_index();
    let scale_1 = u.sup_abs();
    let scale_2 = scale_1 * scale_1;
    let per_cell = cells(grid)
        .map(|(i, node)| {
            let lhs1 = u.at(i, node);
            if i == last {
                let x = grid.node(node);
                let g = g_at(problem, grid, &x, i, node)?;
                return Ok(((lhs1 - g).abs(), 0.0, (lhs1 * lhs1 - g * g).abs(), 0.0, true));
            }
            let ens = cache.ensemble(i, node)?;
            let rhs1 = mean_stderr(&line_one_samples(&ens, problem, dv, u, v, node)?);
            let steps = ens.times().len() - 1;
            let mut second = Vec::with_capacity(ens.path_count());
            let mut outside = 0usize;
            for p in 0..ens.path_count() {
                let gt = g_at(problem, grid, ens.terminal(p), i, node)?;
                let mut acc = CompensatedSum::default();
                acc.add(gt * gt);
                for k in 0..=steps {
                    let xj = ens.point(p, k);
                    if !grid.contains(xj) {
                        outside += 1;
                    }
                    if k == steps {
                        break;
                    }
                    let j = i + k;
                    let uj = u.value_at(j, xj);
                    let vj = v.value_at(j, xj);
                    let fj = driver_at(problem, u, v, j, xj).map_err(|e| {
                        Error::eval(format!("driver on path {p} from {}", cell_context(grid, i, node)), e)
                    })?;
                    acc.add(-(vj * vj - 2.0 * uj * fj) * dv[j]);
                }
                second.push(acc.value());
            }
            let rhs2 = mean_stderr(&second);
            let resolved = outside as f64 <= 0.01 * (ens.path_count() * (steps + 1)) as f64;
            Ok((
                (lhs1 - rhs1.mean).abs(),
                rhs1.stderr,
                (lhs1 * lhs1 - rhs2.mean).abs(),
                rhs2.stderr,
                resolved,
            ))
        })
        .collect::<Result<Vec<(f64, f64, f64, f64, bool)>>>()?;
    let mut r = MildResiduals {
        line_1: LineResidual::default(),
        line_2: LineResidual::default(),
        resolved_1: LineResidual::default(),
        resolved_2: LineResidual::default(),
        cells: per_cell.len(),
        resolved_cells: 0,
        scale_1,
        scale_2,
        relative,
    };
    for (r1, s1, r2, s2, resolved) in per_cell {
        r.line_1.absorb(r1, s1, relative * scale_1);
        r.line_2.absorb(r2, s2, relative * scale_2);
        if resolved {
            r.resolved_cells += 1;
            r.resolved_1.absorb(r1, s1, relative * scale_1);
            r.resolved_2.absorb(r2, s2, relative * scale_2);
        }
    }
    Ok(r)
}

fn out_of_bounds_share(cache: &EnsembleCache) -> Result<f64> {
    let grid = cache.grid();
    let counts = cells(grid)
        .map(|(i, node)| {
            let ens = cache.ensemble(i, node)?;
            let n = ens.path_count() * ens.times().len();
            let outside = (0..ens.path_count())
                .flat_map(|p| (0..ens.times().len()).map(move |k| (p, k)))
                .filter(|&(p, k)| !grid.contains(ens.point(p, k)))
                .count();
            Ok((outside, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (outside, total) = counts.iter().fold((0, 0), |(a, b), (o, n)| (a + o, b + n));
    Ok(outside as f64 / total.max(1) as f64)
}

/// Picard iteration from `u_0 = v_0 = 0` until the sup-norm `u` update falls
/// below the tolerance. Non-convergence is reported through `converged`.
pub fn picard_solve(
    problem: &ProblemSpec,
    grid: &SpaceTimeGrid,
    cache: &EnsembleCache,
    cfg: &PicardConfig,
) -> Result<MildSolution> {
    cfg.validate()?;
    if grid != cache.grid() {
        return Err(Error::Config("picard: grid differs from the cache grid".into()));
    }
    check_inputs(problem, cache, &[])?;
    let mut u = FieldEstimate {
        value: ScalarField::zeros(grid),
        stderr: ScalarField::zeros(grid),
    };
    let mut v = u.clone();
    let mut deltas = Vec::new();
    let mut clamps = ClampTelemetry::default();
    let mut warnings = Vec::new();
    let mut converged = false;
    // an update that ignores (u, v) reaches the fixed point at once
    let self_referential = problem.driver.f.uses_y() || problem.driver.f.uses_z();

    for iteration in 1..=cfg.max_iterations {
        let mut next = update_u(&u.value, &v.value, problem, cache)?;
        if cfg.damping < 1.0 {
            let theta = cfg.damping;
            let nodes = grid.node_count();
            let last = grid.last_index();
            let mut blended: Vec<f64> = u
                .value
                .values()
                .iter()
                .zip(next.value.values())
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect();
            blended[last * nodes..].copy_from_slice(next.value.row(last));
            let blended = ScalarField::from_values(grid, blended)?;
            next.value = blended;
        }
        let v_update = match cfg.v_scheme {
            VScheme::Variance => update_v_variance(&next.value, &v.value, problem, cache),
            VScheme::Volterra => update_v_volterra(&next.value, &u.value, &v.value, problem, cache),
        }
        .map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("iteration {iteration}: {m}")),
            other => other,
        })?;
        let delta = field_distance(&next.value, &u.value)?;
        if !delta.is_finite() {
            return Err(Error::Numerical(format!("iteration {iteration}: non-finite u update")));
        }
        deltas.push(delta);
        clamps = v_update.clamps;
        for w in v_update.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        u = next;
        v = v_update.v;
        if delta < cfg.tolerance || !self_referential {
            converged = true;
            break;
        }
    }
    let mut total_clamps = ClampTelemetry::default();
    total_clamps.merge(&clamps);
    let residuals = mild_residuals(&u.value, &v.value, problem, cache, 0.02)?;
    let out_of_bounds = out_of_bounds_share(cache)?;
    if out_of_bounds > 0.01 {
        warnings.push(format!(
            "{:.2}% of path points fall outside the spatial box and are clamped",
            100.0 * out_of_bounds
        ));
    }
    if !problem.driver.lipschitz_verified && self_referential {
        warnings.push("driver Lipschitz constants were not verified by sampling".into());
    }
    Ok(MildSolution {
        iterations: deltas.len(),
        u,
        v,
        deltas,
        converged,
        residuals,
        clamps: total_clamps,
        out_of_bounds,
        warnings,
    })
}
