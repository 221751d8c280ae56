//! Time-homogeneous Markov path simulators.
//!
//! Four generator families are supported: Euler-Maruyama diffusions, jump
//! diffusions with compound-Poisson jumps, exact symmetric alpha-stable
//! motion, and one-dimensional diffusions with a distributional drift `b'`
//! simulated through the h-transform.
//!
//! All times are measured on the clock `V`: a step `[t_i, t_{i+1}]` advances
//! by `dV_i = V(t_{i+1}) - V(t_i)`.

mod htransform;
mod stable;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;

pub use htransform::{build_h_transform, BTable, HTransform};
pub use stable::{fractional_laplacian_constant, sample_symmetric_stable};

use crate::error::{Error, Result};
use crate::grid::{v_increments, ClockV, SpaceTimeGrid};
use crate::problem::Function;
use crate::quad::{gauss_hermite_normal, gauss_laguerre};
use crate::rng::{fingerprint, step_rng};

/// One-dimensional jump-size law; in `d > 1` coordinates are i.i.d.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JumpLaw {
    /// `up` with probability `p_up`, otherwise `down`.
    TwoPoint { up: f64, down: f64, p_up: f64 },
    /// Centered normal with standard deviation `std`.
    Gaussian { std: f64 },
    /// Centered Laplace with density `exp(-|y| / scale) / (2 scale)`.
    Laplace { scale: f64 },
}

impl JumpLaw {
    pub fn deterministic(size: f64) -> Self {
        JumpLaw::TwoPoint {
            up: size,
            down: size,
            p_up: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            JumpLaw::TwoPoint { up, down, p_up } => {
                up.is_finite() && down.is_finite() && (0.0..=1.0).contains(&p_up)
            }
            JumpLaw::Gaussian { std } => std > 0.0 && std.is_finite(),
            JumpLaw::Laplace { scale } => scale > 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid jump law {self:?}")))
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match *self {
            JumpLaw::TwoPoint { up, down, p_up } => {
                (up == -down && p_up == 0.5) || (up == 0.0 && down == 0.0)
            }
            _ => true,
        }
    }

    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpLaw::TwoPoint { up, down, p_up } => {
                if rng.random::<f64>() < p_up {
                    up
                } else {
                    down
                }
            }
            JumpLaw::Gaussian { std } => std * rng.sample::<f64, _>(StandardNormal),
            JumpLaw::Laplace { scale } => {
                let e: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    scale * e
                } else {
                    -scale * e
                }
            }
        }
    }

    /// Quadrature rule for expectations under the law: exact for the
    /// two-point law, Gauss-Hermite for the normal, two-sided Gauss-Laguerre
    /// for the Laplace law.
    pub fn rule(&self, order: usize) -> (Vec<f64>, Vec<f64>) {
        match *self {
            JumpLaw::TwoPoint { up, down, p_up } => (vec![up, down], vec![p_up, 1.0 - p_up]),
            JumpLaw::Gaussian { std } => {
                let (x, w) = gauss_hermite_normal(order);
                (x.into_iter().map(|v| v * std).collect(), w)
            }
            JumpLaw::Laplace { scale } => {
                let (x, w) = gauss_laguerre(order);
                let mut nodes: Vec<f64> = x.iter().map(|v| -v * scale).collect();
                nodes.extend(x.iter().map(|v| v * scale));
                let mut weights: Vec<f64> = w.iter().map(|v| 0.5 * v).collect();
                weights.extend(w.iter().map(|v| 0.5 * v));
                (nodes, weights)
            }
        }
    }

    /// Tensor-product rule over `d` i.i.d. coordinates.
    pub fn tensor_rule(&self, d: usize, order: usize) -> Vec<(f64, Vec<f64>)> {
        let (x, w) = self.rule(order);
        let mut out = vec![(1.0, Vec::with_capacity(d))];
        for _ in 0..d {
            out = out
                .into_iter()
                .flat_map(|(wt, pt)| {
                    x.iter().zip(&w).map(move |(xv, wv)| {
                        let mut p = pt.clone();
                        p.push(*xv);
                        (wt * wv, p)
                    })
                })
                .filter(|(wt, _)| *wt > 0.0)
                .collect();
        }
        out
    }
}

/// Finite-activity Lévy kernel `K(dy) = rate * law(dy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jumps {
    /// Jump intensity per unit of the clock `V`.
    pub rate: f64,
    pub law: JumpLaw,
}

impl Jumps {
    /// Quadrature order used for expectations over the jump law.
    pub const RULE_ORDER: usize = 24;

    /// `rate * E[Y / (1 + |Y|^2)]`, the drift correction matching the
    /// truncated compensator of the integro-differential generator.
    pub fn compensator(&self, d: usize) -> Vec<f64> {
        if self.law.is_symmetric() || self.rate == 0.0 {
            return vec![0.0; d];
        }
        let mut out = vec![0.0; d];
        for (w, y) in self.law.tensor_rule(d, Self::RULE_ORDER) {
            let norm2: f64 = y.iter().map(|v| v * v).sum();
            for k in 0..d {
                out[k] += self.rate * w * y[k] / (1.0 + norm2);
            }
        }
        out
    }
}

/// Generator families with their parameters.
#[derive(Debug, Clone)]
pub enum GeneratorSpec {
    /// `dX = mu dV + sigma dW_V`; `vol` is the `d x d` matrix `sigma`, row-major.
    Diffusion { drift: Vec<Function>, vol: Vec<Function> },
    JumpDiffusion {
        drift: Vec<Function>,
        vol: Vec<Function>,
        jumps: Jumps,
    },
    /// Symbol `scale * |xi|^alpha` in one dimension.
    Stable { alpha: f64, scale: f64 },
    /// One-dimensional `L = sigma^2/2 d^2 + b' d`, `b` continuous.
    DistributionalDrift(Arc<HTransform>),
}

impl GeneratorSpec {
    pub fn diffusion(drift: Vec<Function>, vol: Vec<Function>) -> Result<Self> {
        check_coefficients(&drift, &vol)?;
        Ok(GeneratorSpec::Diffusion { drift, vol })
    }

    pub fn jump_diffusion(drift: Vec<Function>, vol: Vec<Function>, jumps: Jumps) -> Result<Self> {
        check_coefficients(&drift, &vol)?;
        jumps.law.validate()?;
        if !(jumps.rate >= 0.0 && jumps.rate.is_finite()) {
            return Err(Error::Config("jump rate must be finite and >= 0".into()));
        }
        if drift.len() > 3 && !jumps.law.is_symmetric() {
            return Err(Error::Unsupported(
                "asymmetric jump laws are limited to d <= 3".into(),
            ));
        }
        Ok(GeneratorSpec::JumpDiffusion { drift, vol, jumps })
    }

    pub fn stable(alpha: f64, scale: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::Config(format!("stable: alpha must lie in (0, 2], got {alpha}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config("stable: scale must be positive".into()));
        }
        Ok(GeneratorSpec::Stable { alpha, scale })
    }

    pub fn distributional_drift(transform: HTransform) -> Self {
        GeneratorSpec::DistributionalDrift(Arc::new(transform))
    }

    /// Standard Brownian motion in `d` dimensions (generator `d_t + Delta/2`).
    pub fn brownian(d: usize) -> Self {
        let vol = (0..d * d)
            .map(|k| Function::constant(if k % (d + 1) == 0 { 1.0 } else { 0.0 }))
            .collect();
        GeneratorSpec::Diffusion {
            drift: vec![Function::constant(0.0); d],
            vol,
        }
    }

    /// Constant paths.
    pub fn frozen(d: usize) -> Self {
        GeneratorSpec::Diffusion {
            drift: vec![Function::constant(0.0); d],
            vol: vec![Function::constant(0.0); d * d],
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            GeneratorSpec::Diffusion { drift, .. } | GeneratorSpec::JumpDiffusion { drift, .. } => {
                drift.len()
            }
            GeneratorSpec::Stable { .. } | GeneratorSpec::DistributionalDrift(_) => 1,
        }
    }

    pub fn describe(&self) -> String {
        let coeffs = |drift: &[Function], vol: &[Function]| {
            let d: Vec<String> = drift.iter().map(Function::describe).collect();
            let v: Vec<String> = vol.iter().map(Function::describe).collect();
            format!("drift=[{}];vol=[{}]", d.join(","), v.join(","))
        };
        match self {
            GeneratorSpec::Diffusion { drift, vol } => format!("diffusion({})", coeffs(drift, vol)),
            GeneratorSpec::JumpDiffusion { drift, vol, jumps } => format!(
                "jump_diffusion({};rate={:?};law={:?})",
                coeffs(drift, vol),
                jumps.rate,
                jumps.law
            ),
            GeneratorSpec::Stable { alpha, scale } => format!("stable(alpha={alpha:?};scale={scale:?})"),
            GeneratorSpec::DistributionalDrift(t) => {
                let table_id = t
                    .nodes()
                    .iter()
                    .chain(t.b_values())
                    .fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits());
                format!(
                    "distributional_drift(nodes={};table={table_id:016x};sigma={})",
                    t.nodes().len(),
                    t.sigma_function().describe()
                )
            }
        }
    }

    /// Whether all coefficients are independent of time.
    pub fn is_time_homogeneous(&self) -> bool {
        match self {
            GeneratorSpec::Diffusion { drift, vol } | GeneratorSpec::JumpDiffusion { drift, vol, .. } => {
                !drift.iter().chain(vol).any(Function::uses_t)
            }
            _ => true,
        }
    }
}

fn check_coefficients(drift: &[Function], vol: &[Function]) -> Result<()> {
    let d = drift.len();
    if d == 0 {
        return Err(Error::Config("generator: dimension must be at least 1".into()));
    }
    if vol.len() != d * d {
        return Err(Error::Config(format!(
            "generator: volatility must be a {d}x{d} matrix ({} entries given)",
            vol.len()
        )));
    }
    Ok(())
}

/// `M` trajectories from a common origin on a sub-grid `[s, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    s_index: usize,
    origin: Vec<f64>,
    times: Vec<f64>,
    dimension: usize,
    paths: Vec<f64>,
    seed: u64,
    fingerprint: u64,
}

impl PathEnsemble {
    pub fn s_index(&self) -> usize {
        self.s_index
    }

    pub fn origin_time(&self) -> f64 {
        self.times[0]
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Grid times `t_s, ..., t_N`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn path_count(&self) -> usize {
        self.paths.len() / (self.times.len() * self.dimension)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Position of path `p` at local time index `k` (grid index `s_index + k`).
    #[inline]
    pub fn point(&self, p: usize, k: usize) -> &[f64] {
        let d = self.dimension;
        let base = (p * self.times.len() + k) * d;
        &self.paths[base..base + d]
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.times.len() * self.dimension;
        &self.paths[p * len..(p + 1) * len]
    }

    pub fn terminal(&self, p: usize) -> &[f64] {
        self.point(p, self.times.len() - 1)
    }

    pub fn raw(&self) -> &[f64] {
        &self.paths
    }

    pub fn memory_bytes(&self) -> usize {
        self.paths.len() * std::mem::size_of::<f64>()
    }
}

/// Anything that can produce path ensembles on a grid.
pub trait PathSimulator: Sync {
    fn dimension(&self) -> usize;

    fn fingerprint(&self) -> u64;

    /// Simulates `paths` trajectories from `(t_{s_index}, x)`. Path `p` uses
    /// random streams keyed by `(seed, p, absolute step)`.
    fn simulate_from(
        &self,
        s_index: usize,
        x: &[f64],
        grid: &SpaceTimeGrid,
        clock: &ClockV,
        paths: usize,
        seed: u64,
    ) -> Result<PathEnsemble>;
}

/// Simulates `paths` trajectories of `gen` from `(s, x)`, where `s` must be a grid time.
pub fn simulate(
    gen: &GeneratorSpec,
    s: f64,
    x: &[f64],
    grid: &SpaceTimeGrid,
    clock: &ClockV,
    paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let s_index = grid
        .time_index(s)
        .ok_or_else(|| Error::Config(format!("simulate: s = {s} is not a grid time")))?;
    gen.simulate_from(s_index, x, grid, clock, paths, seed)
}

/// Shared path-filling driver: validates, then fills each path in parallel
/// with `step(p, k, state, dv, out)` semantics provided by `fill`.
pub(crate) fn build_ensemble<F>(
    s_index: usize,
    x: &[f64],
    grid: &SpaceTimeGrid,
    paths: usize,
    dimension: usize,
    seed: u64,
    fingerprint: u64,
    fill: F,
) -> Result<PathEnsemble>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    if paths == 0 {
        return Err(Error::Config("simulate: path count must be at least 1".into()));
    }
    if x.len() != dimension {
        return Err(Error::Config(format!(
            "simulate: origin has dimension {}, generator has {dimension}",
            x.len()
        )));
    }
    if grid.dimension() != dimension {
        return Err(Error::Config(format!(
            "simulate: grid dimension {} differs from generator dimension {dimension}",
            grid.dimension()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("simulate: origin must be finite".into()));
    }
    if s_index >= grid.times().len() {
        return Err(Error::Config(format!("simulate: time index {s_index} out of range")));
    }
    let times = grid.times()[s_index..].to_vec();
    let len = times.len() * dimension;
    let mut data = vec![0.0; paths * len];
    let results: Vec<Result<()>> = data
        .par_chunks_mut(len)
        .enumerate()
        .map(|(p, out)| {
            out[..dimension].copy_from_slice(x);
            fill(p, out)?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("simulate: path {p} left the finite range")));
            }
            Ok(())
        })
        .collect();
    if let Some(err) = results.into_iter().find_map(|r| r.err()) {
        return Err(err);
    }
    Ok(PathEnsemble {
        s_index,
        origin: x.to_vec(),
        times,
        dimension,
        paths: data,
        seed,
        fingerprint,
    })
}

impl PathSimulator for GeneratorSpec {
    fn dimension(&self) -> usize {
        GeneratorSpec::dimension(self)
    }

    fn fingerprint(&self) -> u64 {
        fingerprint(&self.describe())
    }

    fn simulate_from(
        &self,
        s_index: usize,
        x: &[f64],
        grid: &SpaceTimeGrid,
        clock: &ClockV,
        paths: usize,
        seed: u64,
    ) -> Result<PathEnsemble> {
        let d = self.dimension();
        if let GeneratorSpec::Stable { .. } = self {
            if grid.dimension() != 1 {
                return Err(Error::Config("stable generator requires d = 1".into()));
            }
        }
        let dv_all = v_increments(grid, clock)?;
        let dv = &dv_all[s_index.min(dv_all.len())..];
        let times = &grid.times()[s_index.min(grid.times().len() - 1)..];
        let fp = PathSimulator::fingerprint(self);
        match self {
            GeneratorSpec::Diffusion { drift, vol } => {
                build_ensemble(s_index, x, grid, paths, d, seed, fp, |p, out| {
                    euler_path(drift, vol, None, times, dv, s_index, seed, p, out)
                })
            }
            GeneratorSpec::JumpDiffusion { drift, vol, jumps } => {
                let comp = jumps.compensator(d);
                build_ensemble(s_index, x, grid, paths, d, seed, fp, |p, out| {
                    euler_path(drift, vol, Some((jumps, &comp)), times, dv, s_index, seed, p, out)
                })
            }
            GeneratorSpec::Stable { alpha, scale } => {
                build_ensemble(s_index, x, grid, paths, d, seed, fp, |p, out| {
                    for (k, &dvk) in dv.iter().enumerate() {
                        let mut rng = step_rng(seed, p as u64, (s_index + k) as u64);
                        let jump = sample_symmetric_stable(*alpha, &mut rng);
                        out[k + 1] = out[k] + (scale * dvk).powf(1.0 / alpha) * jump;
                    }
                    Ok(())
                })
            }
            GeneratorSpec::DistributionalDrift(t) => {
                build_ensemble(s_index, x, grid, paths, d, seed, fp, |p, out| {
                    let mut y = t.h(out[0]);
                    for (k, &dvk) in dv.iter().enumerate() {
                        let mut rng = step_rng(seed, p as u64, (s_index + k) as u64);
                        let xi: f64 = rng.sample(StandardNormal);
                        y += t.sigma0(y)? * dvk.sqrt() * xi;
                        out[k + 1] = t.h_inv(y);
                    }
                    Ok(())
                })
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn euler_path(
    drift: &[Function],
    vol: &[Function],
    jumps: Option<(&Jumps, &Vec<f64>)>,
    times: &[f64],
    dv: &[f64],
    s_index: usize,
    seed: u64,
    p: usize,
    out: &mut [f64],
) -> Result<()> {
    let d = drift.len();
    let mut mu = [0.0f64; 8];
    let mut xi = [0.0f64; 8];
    if d > 8 {
        return Err(Error::Unsupported("diffusions are limited to d <= 8".into()));
    }
    for (k, &dvk) in dv.iter().enumerate() {
        let t = times[k];
        let (cur, next) = out.split_at_mut((k + 1) * d);
        let x = &cur[k * d..];
        let next = &mut next[..d];
        let mut rng = step_rng(seed, p as u64, (s_index + k) as u64);
        for i in 0..d {
            mu[i] = drift[i]
                .eval(t, x, 0.0, 0.0)
                .map_err(|e| Error::eval(format!("drift[{i}] on path {p}"), e))?;
            xi[i] = rng.sample(StandardNormal);
        }
        let sq = dvk.sqrt();
        for i in 0..d {
            let mut diffusion = 0.0;
            for j in 0..d {
                let s = vol[i * d + j]
                    .eval(t, x, 0.0, 0.0)
                    .map_err(|e| Error::eval(format!("vol[{i},{j}] on path {p}"), e))?;
                diffusion += s * xi[j];
            }
            next[i] = x[i] + mu[i] * dvk + diffusion * sq;
        }
        if let Some((jumps, comp)) = jumps {
            let lambda = jumps.rate * dvk;
            if lambda > 0.0 {
                let count = Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("poisson({lambda}): {e}")))?
                    .sample(&mut rng) as u64;
                for _ in 0..count {
                    for v in next.iter_mut() {
                        *v += jumps.law.sample(&mut rng);
                    }
                }
                for i in 0..d {
                    next[i] -= comp[i] * dvk;
                }
            }
        }
    }
    Ok(())
}
