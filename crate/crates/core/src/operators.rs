//! Carré du champ operators `Gamma(phi, psi) = a(phi psi) - phi a(psi) - psi a(phi)`,
//! generator actions on smooth test functions, the classical-solution
//! residual and statistical martingale-problem tests.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::fbsde::monomials;
use crate::field::ScalarField;
use crate::grid::{v_increments, ClockV, SpaceTimeGrid};
use crate::problem::{Function, ProblemSpec};
use crate::processes::{fractional_laplacian_constant, GeneratorSpec, HTransform, Jumps, PathSimulator};
use crate::quad::integrate;

type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// A function of `(t, x)` with optional closed-form partials; missing
/// partials fall back to central differences with step `h = fd_scale (1 + |x|)`.
#[derive(Clone)]
pub struct SmoothTestFunction {
    label: String,
    dimension: usize,
    value: ScalarFn,
    time_derivative: Option<ScalarFn>,
    gradient: Option<VectorFn>,
    hessian: Option<VectorFn>,
    fd_scale: f64,
}

impl fmt::Debug for SmoothTestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothTestFunction")
            .field("label", &self.label)
            .field("dimension", &self.dimension)
            .field("closed_form", &self.has_closed_form())
            .finish()
    }
}

pub const DEFAULT_FD_SCALE: f64 = 1e-4;

impl SmoothTestFunction {
    pub fn new(
        dimension: usize,
        label: impl Into<String>,
        value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SmoothTestFunction {
            label: label.into(),
            dimension,
            value: Arc::new(value),
            time_derivative: None,
            gradient: None,
            hessian: None,
            fd_scale: DEFAULT_FD_SCALE,
        }
    }

    pub fn with_time_derivative(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.time_derivative = Some(Arc::new(f));
        self
    }

    pub fn with_gradient(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(f));
        self
    }

    /// Row-major `d x d` Hessian.
    pub fn with_hessian(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(f));
        self
    }

    pub fn with_fd_scale(mut self, scale: f64) -> Self {
        self.fd_scale = scale;
        self
    }

    /// Wraps a parsed expression of `(t, x)`; all partials by finite differences.
    pub fn from_function(function: Function, dimension: usize) -> Self {
        let label = function.describe();
        SmoothTestFunction::new(dimension, label, move |t, x| {
            function.eval(t, x, 0.0, 0.0).unwrap_or(f64::NAN)
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn has_closed_form(&self) -> bool {
        self.time_derivative.is_some() && self.gradient.is_some() && self.hessian.is_some()
    }

    #[inline]
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.value)(t, x)
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        match &self.time_derivative {
            Some(f) => f(t, x),
            None => self.fd_time_derivative(t, x),
        }
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(f) => {
                let mut out = vec![0.0; self.dimension];
                f(t, x, &mut out);
                out
            }
            None => self.fd_gradient(t, x),
        }
    }

    pub fn hessian(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match &self.hessian {
            Some(f) => {
                let mut out = vec![0.0; self.dimension * self.dimension];
                f(t, x, &mut out);
                out
            }
            None => self.fd_hessian(t, x),
        }
    }

    fn step(&self, v: f64) -> f64 {
        self.fd_scale * (1.0 + v.abs())
    }

    pub fn fd_time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let h = self.step(t);
        (self.value(t + h, x) - self.value(t - h, x)) / (2.0 * h)
    }

    pub fn fd_gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..self.dimension)
            .map(|k| {
                let h = self.step(x[k]);
                probe[k] = x[k] + h;
                let up = self.value(t, &probe);
                probe[k] = x[k] - h;
                let down = self.value(t, &probe);
                probe[k] = x[k];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    pub fn fd_hessian(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dimension;
        let mut out = vec![0.0; d * d];
        let mut probe = x.to_vec();
        let center = self.value(t, x);
        for i in 0..d {
            let hi = self.step(x[i]);
            probe[i] = x[i] + hi;
            let up = self.value(t, &probe);
            probe[i] = x[i] - hi;
            let down = self.value(t, &probe);
            probe[i] = x[i];
            out[i * d + i] = (up - 2.0 * center + down) / (hi * hi);
            for j in 0..i {
                let hj = self.step(x[j]);
                let mut corner = |si: f64, sj: f64| {
                    probe[i] = x[i] + si * hi;
                    probe[j] = x[j] + sj * hj;
                    let v = self.value(t, &probe);
                    probe[i] = x[i];
                    probe[j] = x[j];
                    v
                };
                let mixed =
                    (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * hi * hj);
                out[i * d + j] = mixed;
                out[j * d + i] = mixed;
            }
        }
        out
    }

    /// Pointwise product, with product-rule partials when both factors have them.
    pub fn product(&self, other: &SmoothTestFunction) -> SmoothTestFunction {
        let (a, b) = (self.clone(), other.clone());
        let d = self.dimension;
        let (va, vb) = (a.value.clone(), b.value.clone());
        let mut out = SmoothTestFunction::new(d, format!("({})*({})", a.label, b.label), move |t, x| {
            va(t, x) * vb(t, x)
        })
        .with_fd_scale(self.fd_scale.min(other.fd_scale));
        if let (Some(ta), Some(tb)) = (&a.time_derivative, &b.time_derivative) {
            let (ta, tb, va, vb) = (ta.clone(), tb.clone(), a.value.clone(), b.value.clone());
            out = out.with_time_derivative(move |t, x| ta(t, x) * vb(t, x) + va(t, x) * tb(t, x));
        }
        if let (Some(ga), Some(gb)) = (&a.gradient, &b.gradient) {
            let (ga, gb, va, vb) = (ga.clone(), gb.clone(), a.value.clone(), b.value.clone());
            out = out.with_gradient(move |t, x, g| {
                let mut gx = vec![0.0; g.len()];
                ga(t, x, g);
                gb(t, x, &mut gx);
                let (fa, fb) = (va(t, x), vb(t, x));
                for k in 0..g.len() {
                    g[k] = g[k] * fb + fa * gx[k];
                }
            });
        }
        if let (Some(ga), Some(gb), Some(ha), Some(hb)) = (&a.gradient, &b.gradient, &a.hessian, &b.hessian) {
            let (ga, gb, ha, hb) = (ga.clone(), gb.clone(), ha.clone(), hb.clone());
            let (va, vb) = (a.value.clone(), b.value.clone());
            out = out.with_hessian(move |t, x, h| {
                let mut da = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut hb_v = vec![0.0; d * d];
                ga(t, x, &mut da);
                gb(t, x, &mut db);
                ha(t, x, h);
                hb(t, x, &mut hb_v);
                let (fa, fb) = (va(t, x), vb(t, x));
                for i in 0..d {
                    for j in 0..d {
                        h[i * d + j] = h[i * d + j] * fb + da[i] * db[j] + da[j] * db[i] + fa * hb_v[i * d + j];
                    }
                }
            });
        }
        out
    }

    /// `ca * a + cb * b`.
    pub fn linear_combination(a: &SmoothTestFunction, ca: f64, b: &SmoothTestFunction, cb: f64) -> SmoothTestFunction {
        let d = a.dimension;
        let (va, vb) = (a.value.clone(), b.value.clone());
        let mut out = SmoothTestFunction::new(d, format!("{ca}*({}) + {cb}*({})", a.label, b.label), move |t, x| {
            ca * va(t, x) + cb * vb(t, x)
        })
        .with_fd_scale(a.fd_scale.min(b.fd_scale));
        if let (Some(ta), Some(tb)) = (&a.time_derivative, &b.time_derivative) {
            let (ta, tb) = (ta.clone(), tb.clone());
            out = out.with_time_derivative(move |t, x| ca * ta(t, x) + cb * tb(t, x));
        }
        let combine = |fa: &VectorFn, fb: &VectorFn| {
            let (fa, fb) = (fa.clone(), fb.clone());
            move |t: f64, x: &[f64], g: &mut [f64]| {
                let mut gb = vec![0.0; g.len()];
                fa(t, x, g);
                fb(t, x, &mut gb);
                for k in 0..g.len() {
                    g[k] = ca * g[k] + cb * gb[k];
                }
            }
        };
        if let (Some(ga), Some(gb)) = (&a.gradient, &b.gradient) {
            out = out.with_gradient(combine(ga, gb));
        }
        if let (Some(ha), Some(hb)) = (&a.hessian, &b.hessian) {
            out = out.with_hessian(combine(ha, hb));
        }
        out
    }

    /// The one-dimensional function applied to coordinate `k` of `R^d`.
    pub fn along_axis(&self, dimension: usize, k: usize) -> SmoothTestFunction {
        if dimension == 1 && self.dimension == 1 {
            return self.clone();
        }
        let f = self.clone();
        let (g, h, tf) = (self.clone(), self.clone(), self.clone());
        let mut out = SmoothTestFunction::new(dimension, format!("{}[x{}]", self.label, k + 1), move |t, x| {
            f.value(t, &[x[k]])
        })
        .with_fd_scale(self.fd_scale);
        if self.has_closed_form() {
            out = out
                .with_time_derivative(move |t, x| tf.time_derivative(t, &[x[k]]))
                .with_gradient(move |t, x, out| {
                    out.fill(0.0);
                    out[k] = g.gradient(t, &[x[k]])[0];
                })
                .with_hessian(move |t, x, out| {
                    out.fill(0.0);
                    out[k * dimension + k] = h.hessian(t, &[x[k]])[0];
                });
        }
        out
    }

    /// `x_k` in `d` dimensions.
    pub fn coordinate(dimension: usize, k: usize) -> SmoothTestFunction {
        SmoothTestFunction::new(dimension, format!("x{}", k + 1), move |_, x| x[k])
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(move |_, _, g| {
                g.fill(0.0);
                g[k] = 1.0;
            })
            .with_hessian(|_, _, h| h.fill(0.0))
    }

    /// `x^p` in one dimension.
    pub fn power(p: i32) -> SmoothTestFunction {
        let pf = p as f64;
        SmoothTestFunction::new(1, format!("x^{p}"), move |_, x| x[0].powi(p))
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(move |_, x, g| g[0] = if p == 0 { 0.0 } else { pf * x[0].powi(p - 1) })
            .with_hessian(move |_, x, h| h[0] = if p < 2 { 0.0 } else { pf * (pf - 1.0) * x[0].powi(p - 2) })
    }

    /// `sin(w x + shift)` in one dimension.
    pub fn sinusoid(frequency: f64, shift: f64) -> SmoothTestFunction {
        SmoothTestFunction::new(1, format!("sin({frequency}*x + {shift})"), move |_, x| {
            (frequency * x[0] + shift).sin()
        })
        .with_time_derivative(|_, _| 0.0)
        .with_gradient(move |_, x, g| g[0] = frequency * (frequency * x[0] + shift).cos())
        .with_hessian(move |_, x, h| h[0] = -frequency * frequency * (frequency * x[0] + shift).sin())
    }

    /// `exp(-((x - center) / width)^2)` in one dimension.
    pub fn gaussian_bump(center: f64, width: f64) -> SmoothTestFunction {
        let w2 = width * width;
        SmoothTestFunction::new(1, format!("bump({center}, {width})"), move |_, x| {
            (-(x[0] - center).powi(2) / w2).exp()
        })
        .with_time_derivative(|_, _| 0.0)
        .with_gradient(move |_, x, g| {
            let u = x[0] - center;
            g[0] = -2.0 * u / w2 * (-u * u / w2).exp();
        })
        .with_hessian(move |_, x, h| {
            let u = x[0] - center;
            h[0] = (4.0 * u * u / (w2 * w2) - 2.0 / w2) * (-u * u / w2).exp();
        })
    }

    /// `atan(x)` in one dimension.
    pub fn arctan() -> SmoothTestFunction {
        SmoothTestFunction::new(1, "atan(x)", |_, x| x[0].atan())
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(|_, x, g| g[0] = 1.0 / (1.0 + x[0] * x[0]))
            .with_hessian(|_, x, h| h[0] = -2.0 * x[0] / (1.0 + x[0] * x[0]).powi(2))
    }
}

/// `dt/dV` at `t`: 1 for the identity clock, the inverse segment slope otherwise.
fn time_rate(clock: &ClockV, t: f64) -> Result<f64> {
    match clock {
        ClockV::Identity => Ok(1.0),
        ClockV::Tabulated(s) => {
            let k = s.partition_point(|(ts, _)| *ts <= t).clamp(1, s.len() - 1);
            let (ta, va) = s[k - 1];
            let (tb, vb) = s[k];
            let slope = (vb - va) / (tb - ta);
            if slope > 0.0 {
                Ok(1.0 / slope)
            } else {
                Err(Error::Unsupported(format!(
                    "generator: time derivative undefined where the clock is flat (t = {t})"
                )))
            }
        }
    }
}

fn time_part(phi: &SmoothTestFunction, clock: &ClockV, t: f64, x: &[f64]) -> Result<f64> {
    let dt = phi.time_derivative(t, x);
    if dt == 0.0 {
        return Ok(0.0);
    }
    Ok(dt * time_rate(clock, t)?)
}

/// Pointwise application of a generator `a` (relative to `dV`, including
/// the time derivative) to smooth test functions.
pub trait GeneratorAction: Sync {
    fn apply(&self, phi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64>;
}

/// `d_t + mu . grad + (1/2) sigma sigma^T : Hess` plus the finite-activity
/// jump part `rate E[phi(x + Y) - phi(x) - grad phi . Y / (1 + |Y|^2)]`.
#[derive(Debug, Clone)]
pub struct LocalGenerator {
    drift: Vec<Function>,
    vol: Vec<Function>,
    jumps: Option<(Jumps, Vec<(f64, Vec<f64>)>, Vec<f64>)>,
    clock: ClockV,
}

impl LocalGenerator {
    pub fn new(drift: Vec<Function>, vol: Vec<Function>, jumps: Option<Jumps>, clock: ClockV) -> Self {
        let d = drift.len();
        let jumps = jumps.map(|j| (j, j.law.tensor_rule(d, Jumps::RULE_ORDER), j.compensator(d)));
        LocalGenerator {
            drift,
            vol,
            jumps,
            clock,
        }
    }

    pub fn dimension(&self) -> usize {
        self.drift.len()
    }
}

fn eval_all(fs: &[Function], t: f64, x: &[f64], what: &str) -> Result<Vec<f64>> {
    fs.iter()
        .map(|f| f.eval(t, x, 0.0, 0.0).map_err(|e| Error::eval(format!("{what} at t = {t}"), e)))
        .collect()
}

/// `sigma sigma^T`, row-major.
fn diffusion_matrix(vol: &[f64], d: usize) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| vol[i * d + k] * vol[j * d + k]).sum();
        }
    }
    a
}

impl GeneratorAction for LocalGenerator {
    fn apply(&self, phi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        let d = self.dimension();
        let mu = eval_all(&self.drift, t, x, "drift")?;
        let sigma = eval_all(&self.vol, t, x, "volatility")?;
        let alpha = diffusion_matrix(&sigma, d);
        let grad = phi.gradient(t, x);
        let hess = phi.hessian(t, x);
        let mut out = time_part(phi, &self.clock, t, x)?;
        for i in 0..d {
            out += mu[i] * grad[i];
            for j in 0..d {
                out += 0.5 * alpha[i * d + j] * hess[i * d + j];
            }
        }
        if let Some((jumps, rule, comp)) = &self.jumps {
            let base = phi.value(t, x);
            let mut shifted = vec![0.0; d];
            let mut acc = 0.0;
            for (w, y) in rule {
                for k in 0..d {
                    shifted[k] = x[k] + y[k];
                }
                acc += w * (phi.value(t, &shifted) - base);
            }
            out += jumps.rate * acc - comp.iter().zip(&grad).map(|(c, g)| c * g).sum::<f64>();
        }
        Ok(out)
    }
}

/// `d_t - scale (-Delta)^{alpha/2}` in one dimension by quadrature of the
/// symmetric second difference; requires bounded `phi`.
#[derive(Debug, Clone)]
pub struct FractionalGenerator {
    pub alpha: f64,
    pub scale: f64,
    pub clock: ClockV,
}

impl GeneratorAction for FractionalGenerator {
    fn apply(&self, phi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        check_alpha(self.alpha)?;
        let x0 = x[0];
        let center = phi.value(t, x);
        let second = |y: f64| 2.0 * center - phi.value(t, &[x0 + y]) - phi.value(t, &[x0 - y]);
        let integral = fractional_integral(second, -phi.hessian(t, x)[0], self.alpha);
        let c = fractional_laplacian_constant(self.alpha);
        Ok(time_part(phi, &self.clock, t, x)? - self.scale * c * integral.value)
    }
}

/// `d_t + sigma^2/2 d^2 + b' d` with `b'` the slope of the tabulated `b`.
#[derive(Debug, Clone)]
pub struct DriftTableGenerator {
    pub transform: Arc<HTransform>,
    pub clock: ClockV,
}

impl DriftTableGenerator {
    fn b_slope(&self, x: f64) -> f64 {
        let xs = self.transform.nodes();
        let b = self.transform.b_values();
        if x < xs[0] || x > xs[xs.len() - 1] {
            return 0.0;
        }
        let k = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
        (b[k] - b[k - 1]) / (xs[k] - xs[k - 1])
    }
}

impl GeneratorAction for DriftTableGenerator {
    fn apply(&self, phi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        let sigma = self
            .transform
            .sigma_function()
            .eval(t, x, 0.0, 0.0)
            .map_err(|e| Error::eval(format!("sigma at x = {}", x[0]), e))?;
        let grad = phi.gradient(t, x)[0];
        let hess = phi.hessian(t, x)[0];
        Ok(time_part(phi, &self.clock, t, x)? + 0.5 * sigma * sigma * hess + self.b_slope(x[0]) * grad)
    }
}

/// Reference evaluation of `d_t - scale (-Delta)^{alpha/2}` by FFT on a
/// periodized window of half-width `half_width` centred at the evaluation
/// point, multiplier `|xi|^alpha`. A test oracle for functions decaying
/// well inside the window, not a solver path.
#[derive(Debug, Clone)]
pub struct SpectralFractional {
    pub alpha: f64,
    pub scale: f64,
    pub half_width: f64,
    pub points: usize,
    pub clock: ClockV,
}

impl SpectralFractional {
    pub fn new(alpha: f64, scale: f64) -> Self {
        SpectralFractional {
            alpha,
            scale,
            half_width: 200.0,
            points: 1 << 16,
            clock: ClockV::Identity,
        }
    }

    /// `-scale (-Delta)^{alpha/2} f` sampled at `x_j = x0 + (j - n/2) dx`, at `x0`.
    fn spatial(&self, f: impl Fn(f64) -> f64, x0: f64) -> f64 {
        let n = self.points;
        let dx = 2.0 * self.half_width / n as f64;
        let mut data: Vec<Complex<f64>> = (0..n)
            .map(|j| Complex::new(f(x0 + (j as f64 - (n / 2) as f64) * dx), 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut data);
        let dk = 2.0 * std::f64::consts::PI / (n as f64 * dx);
        for (j, c) in data.iter_mut().enumerate() {
            let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            *c *= (k * dk).abs().powf(self.alpha);
        }
        planner.plan_fft_inverse(n).process(&mut data);
        -self.scale * data[n / 2].re / n as f64
    }
}

impl GeneratorAction for SpectralFractional {
    fn apply(&self, phi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        check_alpha(self.alpha)?;
        Ok(time_part(phi, &self.clock, t, x)? + self.spatial(|y| phi.value(t, &[y]), x[0]))
    }
}

/// The action matching a simulator's generator family.
pub fn generator_action(generator: &GeneratorSpec, clock: &ClockV) -> Box<dyn GeneratorAction + Send + Sync> {
    match generator {
        GeneratorSpec::Diffusion { drift, vol } => {
            Box::new(LocalGenerator::new(drift.clone(), vol.clone(), None, clock.clone()))
        }
        GeneratorSpec::JumpDiffusion { drift, vol, jumps } => {
            Box::new(LocalGenerator::new(drift.clone(), vol.clone(), Some(*jumps), clock.clone()))
        }
        GeneratorSpec::Stable { alpha, scale } => Box::new(FractionalGenerator {
            alpha: *alpha,
            scale: *scale,
            clock: clock.clone(),
        }),
        GeneratorSpec::DistributionalDrift(t) => Box::new(DriftTableGenerator {
            transform: t.clone(),
            clock: clock.clone(),
        }),
    }
}

/// `Gamma(phi, psi)` at a point.
pub trait CarreDuChamp: Sync {
    fn gamma(&self, phi: &SmoothTestFunction, psi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64>;
}

/// Lévy kernels of the non-local part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevyKernel {
    FiniteActivity(Jumps),
    Stable { alpha: f64, scale: f64 },
}

type MatrixFn = Arc<dyn Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// `sum_ij alpha_ij d_i phi d_j psi + int (phi(x+y) - phi)(psi(x+y) - psi) K(dy)`.
#[derive(Clone)]
pub struct LocalGamma {
    alpha: MatrixFn,
    jumps: Option<(f64, Vec<(f64, Vec<f64>)>)>,
}

impl fmt::Debug for LocalGamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalGamma").field("jumps", &self.jumps.as_ref().map(|j| j.0)).finish()
    }
}

impl LocalGamma {
    /// `alpha(t, x)` returns the row-major `d x d` matrix `sigma sigma^T`.
    pub fn new(
        dimension: usize,
        alpha: impl Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
        kernel: Option<LevyKernel>,
    ) -> Result<Self> {
        let jumps = match kernel {
            None => None,
            Some(LevyKernel::FiniteActivity(j)) => Some((j.rate, j.law.tensor_rule(dimension, Jumps::RULE_ORDER))),
            Some(LevyKernel::Stable { .. }) => {
                return Err(Error::Unsupported(
                    "gamma_local: the stable kernel has infinite activity; use the fractional carré du champ".into(),
                ))
            }
        };
        Ok(LocalGamma {
            alpha: Arc::new(alpha),
            jumps,
        })
    }

    /// Constant diffusion matrix.
    pub fn constant(alpha: Vec<f64>, kernel: Option<LevyKernel>) -> Result<Self> {
        let d = (alpha.len() as f64).sqrt() as usize;
        if d * d != alpha.len() {
            return Err(Error::Config("gamma_local: alpha must be square".into()));
        }
        LocalGamma::new(d, move |_, _| Ok(alpha.clone()), kernel)
    }

    /// The local carré du champ of a generator family.
    pub fn for_generator(generator: &GeneratorSpec) -> Result<Self> {
        let d = generator.dimension();
        match generator {
            GeneratorSpec::Diffusion { vol, .. } | GeneratorSpec::JumpDiffusion { vol, .. } => {
                let vol = vol.clone();
                let kernel = match generator {
                    GeneratorSpec::JumpDiffusion { jumps, .. } => Some(LevyKernel::FiniteActivity(*jumps)),
                    _ => None,
                };
                LocalGamma::new(
                    d,
                    move |t, x| Ok(diffusion_matrix(&eval_all(&vol, t, x, "volatility")?, d)),
                    kernel,
                )
            }
            GeneratorSpec::DistributionalDrift(tr) => {
                let sigma = tr.sigma_function().clone();
                LocalGamma::new(
                    1,
                    move |t, x| {
                        let s = sigma
                            .eval(t, x, 0.0, 0.0)
                            .map_err(|e| Error::eval(format!("sigma at x = {}", x[0]), e))?;
                        Ok(vec![s * s])
                    },
                    None,
                )
            }
            GeneratorSpec::Stable { alpha, scale } => LocalGamma::new(
                1,
                |_, _| Ok(vec![0.0]),
                Some(LevyKernel::Stable {
                    alpha: *alpha,
                    scale: *scale,
                }),
            ),
        }
    }
}

/// Free-function form of [`LocalGamma`].
pub fn gamma_local(
    phi: &SmoothTestFunction,
    psi: &SmoothTestFunction,
    local: &LocalGamma,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    local.gamma(phi, psi, t, x)
}

impl CarreDuChamp for LocalGamma {
    fn gamma(&self, phi: &SmoothTestFunction, psi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        let d = x.len();
        let alpha = (self.alpha)(t, x)?;
        if alpha.len() != d * d {
            return Err(Error::Config(format!("gamma_local: alpha has {} entries for d = {d}", alpha.len())));
        }
        let gp = phi.gradient(t, x);
        let gq = psi.gradient(t, x);
        let mut out = 0.0;
        for i in 0..d {
            for j in 0..d {
                out += alpha[i * d + j] * gp[i] * gq[j];
            }
        }
        if let Some((rate, rule)) = &self.jumps {
            let (p0, q0) = (phi.value(t, x), psi.value(t, x));
            let mut shifted = vec![0.0; d];
            let mut acc = 0.0;
            for (w, y) in rule {
                for k in 0..d {
                    shifted[k] = x[k] + y[k];
                }
                acc += w * (phi.value(t, &shifted) - p0) * (psi.value(t, &shifted) - q0);
            }
            out += rate * acc;
        }
        Ok(out)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("fractional: alpha must lie in (0, 2), got {alpha}")))
    }
}

/// Fractional integral with its error budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionalValue {
    pub value: f64,
    /// Summed quadrature error estimates.
    pub quadrature_error: f64,
    /// Contribution from `|y| > R`.
    pub tail: f64,
    /// `sup |F| R^{-alpha} / alpha` over the sampled tail, bounding `|tail|`.
    pub tail_bound: f64,
}

/// Truncation radius separating the middle and tail pieces.
pub const FRACTIONAL_CUTOFF: f64 = 50.0;

/// Radius below which `F` is replaced by its leading term `c2 y^2`.
const TAYLOR_RADIUS: f64 = 1e-3;

/// `int_0^inf F(y) y^{-1-alpha} dy` for `F = c2 y^2 + O(y^4)` at zero and
/// bounded at infinity. `[0, delta]` is integrated from the leading term,
/// `[delta, 1]` under `y = w^{1/(2-alpha)}` and the tail `[R, inf)` under
/// `y = R w^{-1/alpha}`; both maps remove the power weight.
fn fractional_integral(f: impl Fn(f64) -> f64, c2: f64, alpha: f64) -> FractionalValue {
    let m = 1.0 / (2.0 - alpha);
    let delta = TAYLOR_RADIUS;
    let head = c2 * delta.powf(2.0 - alpha) / (2.0 - alpha);
    let inner = integrate(
        |w: f64| {
            let y = w.powf(m);
            f(y) * y.powf(-1.0 - alpha) * m * w.powf(m - 1.0)
        },
        delta.powf(2.0 - alpha),
        1.0,
        1e-13,
        1e-11,
        4000,
    );
    let middle = integrate(|y: f64| f(y) * y.powf(-1.0 - alpha), 1.0, FRACTIONAL_CUTOFF, 1e-13, 1e-11, 4000);
    let mut sup = 0.0f64;
    let r = FRACTIONAL_CUTOFF;
    let tail = integrate(
        |w: f64| {
            if w <= 0.0 {
                return 0.0;
            }
            let v = f(r * w.powf(-1.0 / alpha));
            sup = sup.max(v.abs());
            v
        },
        0.0,
        1.0,
        1e-13,
        1e-11,
        4000,
    );
    let tail_scale = r.powf(-alpha) / alpha;
    FractionalValue {
        value: head + inner.value + middle.value + tail.value * tail_scale,
        quadrature_error: inner.error + middle.error + tail.error * tail_scale,
        tail: tail.value * tail_scale,
        tail_bound: sup * tail_scale,
    }
}

/// `scale c_alpha int (phi(x+y) - phi(x))(psi(x+y) - psi(x)) |y|^{-1-alpha} dy`
/// in one dimension.
pub fn gamma_fractional(
    phi: &SmoothTestFunction,
    psi: &SmoothTestFunction,
    alpha: f64,
    scale: f64,
    t: f64,
    x: &[f64],
) -> Result<FractionalValue> {
    check_alpha(alpha)?;
    if x.len() != 1 {
        return Err(Error::Unsupported("gamma_fractional: only d = 1".into()));
    }
    let x0 = x[0];
    let (p0, q0) = (phi.value(t, x), psi.value(t, x));
    let both = |y: f64| {
        let up = (phi.value(t, &[x0 + y]) - p0) * (psi.value(t, &[x0 + y]) - q0);
        let down = (phi.value(t, &[x0 - y]) - p0) * (psi.value(t, &[x0 - y]) - q0);
        up + down
    };
    let c2 = 2.0 * phi.gradient(t, x)[0] * psi.gradient(t, x)[0];
    let raw = fractional_integral(both, c2, alpha);
    let c = scale * fractional_laplacian_constant(alpha);
    Ok(FractionalValue {
        value: c * raw.value,
        quadrature_error: c * raw.quadrature_error,
        tail: c * raw.tail,
        tail_bound: c * raw.tail_bound,
    })
}

/// [`gamma_fractional`] as a [`CarreDuChamp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionalGamma {
    pub alpha: f64,
    pub scale: f64,
}

impl CarreDuChamp for FractionalGamma {
    fn gamma(&self, phi: &SmoothTestFunction, psi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        Ok(gamma_fractional(phi, psi, self.alpha, self.scale, t, x)?.value)
    }
}

/// `a(phi psi) - phi a(psi) - psi a(phi)`.
pub fn gamma_from_generator(
    action: &dyn GeneratorAction,
    phi: &SmoothTestFunction,
    psi: &SmoothTestFunction,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let product = phi.product(psi);
    let a_prod = action.apply(&product, t, x)?;
    let a_phi = action.apply(phi, t, x)?;
    let a_psi = action.apply(psi, t, x)?;
    Ok(a_prod - phi.value(t, x) * a_psi - psi.value(t, x) * a_phi)
}

/// [`gamma_from_generator`] as a [`CarreDuChamp`].
pub struct GeneratorGamma<'a>(pub &'a dyn GeneratorAction);

impl CarreDuChamp for GeneratorGamma<'_> {
    fn gamma(&self, phi: &SmoothTestFunction, psi: &SmoothTestFunction, t: f64, x: &[f64]) -> Result<f64> {
        gamma_from_generator(self.0, phi, psi, t, x)
    }
}

/// `a(u) + f(t, x, u, sqrt(Gamma(u, u)))` at every grid node. `Gamma` below
/// `-tolerance (1 + |Gamma|)` is reported as a broken implementation.
pub fn classical_residual(
    u: &SmoothTestFunction,
    problem: &ProblemSpec,
    grid: &SpaceTimeGrid,
    action: &dyn GeneratorAction,
    gamma: &dyn CarreDuChamp,
    tolerance: f64,
) -> Result<ScalarField> {
    let n = grid.node_count();
    let mut values = Vec::with_capacity(grid.times().len() * n);
    let mut x = vec![0.0; grid.dimension()];
    for &t in grid.times() {
        for node in 0..n {
            grid.node_into(node, &mut x);
            let g = gamma.gamma(u, u, t, &x)?;
            if g < -tolerance * (1.0 + g.abs()) {
                return Err(Error::Numerical(format!(
                    "classical_residual: Gamma(u, u) = {g} < 0 at t = {t}, x = {x:?}; the carré du champ implementation is broken"
                )));
            }
            let value = u.value(t, &x);
            let f = problem
                .driver
                .eval(t, &x, value, g.max(0.0).sqrt())
                .map_err(|e| Error::eval(format!("driver at t = {t}, x = {x:?}"), e))?;
            values.push(action.apply(u, t, &x)? + f);
        }
    }
    ScalarField::from_values(grid, values)
}

/// Regressors for the martingale tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestBasis {
    /// Monomials of degree `<= 2` in the standardized state.
    Polynomial { degree: usize },
    /// Monomials of degree `<= 2` in `atan` of the state; bounded regressors
    /// for heavy-tailed laws.
    Arctan { degree: usize },
}

impl Default for TestBasis {
    fn default() -> Self {
        TestBasis::Polynomial { degree: 2 }
    }
}

/// Per-step coefficient z-scores and their maximum modulus.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// `z_scores[k]` holds the coefficients for the step `t_{s+k} -> t_{s+k+1}`.
    pub z_scores: Vec<Vec<f64>>,
    pub max_abs_z: f64,
    pub worst_step: usize,
}

/// Ordinary least squares with heteroscedasticity-consistent (HC0) errors.
/// Returns `(coefficients, standard errors)`.
pub fn ols_hc0(rows: &[Vec<f64>], targets: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = rows.first().map_or(0, Vec::len);
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (row, y) in rows.iter().zip(targets) {
        for a in 0..k {
            rhs[a] += row[a] * y;
            for b in 0..k {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    let inverse = gram
        .try_inverse()
        .ok_or_else(|| Error::Numerical("ols: singular design matrix".into()))?;
    let beta = &inverse * rhs;
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for (row, y) in rows.iter().zip(targets) {
        let fitted: f64 = row.iter().zip(beta.iter()).map(|(r, b)| r * b).sum();
        let e2 = (y - fitted).powi(2);
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] += e2 * row[a] * row[b];
            }
        }
    }
    let cov = &inverse * meat * &inverse;
    let se = (0..k).map(|a| cov[(a, a)].max(0.0).sqrt()).collect();
    Ok((beta.iter().copied().collect(), se))
}

fn design(points: &[&[f64]], basis: TestBasis) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, |p| p.len());
    let (degree, map): (usize, fn(f64) -> f64) = match basis {
        TestBasis::Polynomial { degree } => (degree.min(2), |v| v),
        TestBasis::Arctan { degree } => (degree.min(2), f64::atan),
    };
    let n = points.len() as f64;
    let mut center = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut active = vec![false; d];
    for k in 0..d {
        let mean = points.iter().map(|p| map(p[k])).sum::<f64>() / n;
        let var = points.iter().map(|p| (map(p[k]) - mean).powi(2)).sum::<f64>() / n;
        center[k] = mean;
        if var.sqrt() > 1e-12 * (1.0 + mean.abs()) {
            scale[k] = var.sqrt();
            active[k] = true;
        }
    }
    let exps = monomials(d, degree, &active);
    points
        .iter()
        .map(|p| {
            exps.iter()
                .map(|e| {
                    e.iter()
                        .enumerate()
                        .filter(|(_, q)| **q > 0)
                        .map(|(k, &q)| ((map(p[k]) - center[k]) / scale[k]).powi(q as i32))
                        .product()
                })
                .collect()
        })
        .collect()
}

fn z_scores(coef: &[f64], se: &[f64]) -> Vec<f64> {
    coef.iter()
        .zip(se)
        .map(|(c, s)| {
            if *c == 0.0 {
                0.0
            } else if *s > 0.0 {
                c / s
            } else {
                f64::INFINITY.copysign(*c)
            }
        })
        .collect()
}

fn report(z: Vec<Vec<f64>>) -> MartingaleReport {
    let (worst_step, max_abs_z) = z
        .iter()
        .enumerate()
        .map(|(k, row)| (k, row.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    MartingaleReport {
        z_scores: z,
        max_abs_z,
        worst_step,
    }
}

/// Tests that `D_t = phi(t, X_t) - int_s^t a(phi)(r, X_r) dV_r` has
/// conditionally centred increments: per step, the increment (Simpson
/// compensator on the step midpoint) is regressed on the basis at `X_{t_i}`.
#[allow(clippy::too_many_arguments)]
pub fn martingale_test(
    simulator: &dyn PathSimulator,
    phi: &SmoothTestFunction,
    a_phi: &(dyn Fn(f64, &[f64]) -> Result<f64> + Sync),
    s_index: usize,
    x: &[f64],
    grid: &SpaceTimeGrid,
    clock: &ClockV,
    paths: usize,
    seed: u64,
    basis: TestBasis,
) -> Result<MartingaleReport> {
    increment_test(simulator, phi, a_phi, None, s_index, x, grid, clock, paths, seed, basis)
}

/// Tests that the squared increment of `phi(X)` over each step, divided by
/// `dV`, matches `Gamma(phi, phi)` in conditional mean after the drift
/// correction `2 (phi - phi(X_{t_i})) a(phi)`, both integrated by
/// Simpson's rule.
#[allow(clippy::too_many_arguments)]
pub fn bracket_test(
    simulator: &dyn PathSimulator,
    phi: &SmoothTestFunction,
    a_phi: &(dyn Fn(f64, &[f64]) -> Result<f64> + Sync),
    gamma_phi: &(dyn Fn(f64, &[f64]) -> Result<f64> + Sync),
    s_index: usize,
    x: &[f64],
    grid: &SpaceTimeGrid,
    clock: &ClockV,
    paths: usize,
    seed: u64,
    basis: TestBasis,
) -> Result<MartingaleReport> {
    increment_test(simulator, phi, a_phi, Some(gamma_phi), s_index, x, grid, clock, paths, seed, basis)
}

/// Simulation sub-steps per regression step, limiting the discretization
/// error of Euler-type simulators.
pub const TEST_SUBSTEPS: usize = 20;

/// Paths simulated per chunk; chunk `c` uses the seed `derive(seed, c)`.
const TEST_CHUNK: usize = 10_000;

fn refine(grid: &SpaceTimeGrid, s_index: usize, substeps: usize) -> Result<SpaceTimeGrid> {
    let coarse = &grid.times()[s_index..];
    let mut times = Vec::with_capacity((coarse.len() - 1) * substeps + 1);
    for w in coarse.windows(2) {
        for j in 0..substeps {
            times.push(w[0] + (w[1] - w[0]) * j as f64 / substeps as f64);
        }
    }
    times.push(coarse[coarse.len() - 1]);
    SpaceTimeGrid::new(
        times,
        grid.space_min().to_vec(),
        grid.space_max().to_vec(),
        grid.space_nodes().to_vec(),
    )
}

/// Three-point rule on `[0, h1 + h2]` with nodes `0, h1, h1 + h2`, exact
/// for quadratics; the trapezoid rule when either part is empty.
fn simpson_weights(h1: f64, h2: f64) -> [f64; 3] {
    let h = h1 + h2;
    if h1 <= 0.0 || h2 <= 0.0 {
        return [0.5 * h, 0.0, 0.5 * h];
    }
    [h / 6.0 * (2.0 - h2 / h1), h * h * h / (6.0 * h1 * h2), h / 6.0 * (2.0 - h1 / h2)]
}

#[allow(clippy::too_many_arguments)]
fn increment_test(
    simulator: &dyn PathSimulator,
    phi: &SmoothTestFunction,
    a_phi: &(dyn Fn(f64, &[f64]) -> Result<f64> + Sync),
    gamma_phi: Option<&(dyn Fn(f64, &[f64]) -> Result<f64> + Sync)>,
    s_index: usize,
    x: &[f64],
    grid: &SpaceTimeGrid,
    clock: &ClockV,
    paths: usize,
    seed: u64,
    basis: TestBasis,
) -> Result<MartingaleReport> {
    use rayon::prelude::*;
    if paths == 0 {
        return Err(Error::Config("martingale test: path count must be at least 1".into()));
    }
    if s_index >= grid.last_index() {
        return Err(Error::Config("martingale test: origin must precede the horizon".into()));
    }
    let fine = refine(grid, s_index, TEST_SUBSTEPS)?;
    let fine_dv = v_increments(&fine, clock)?;
    let steps = grid.last_index() - s_index;
    let half = TEST_SUBSTEPS / 2;
    let dv: Vec<f64> = fine_dv.chunks(TEST_SUBSTEPS).map(|c| c.iter().sum()).collect();
    let weights: Vec<[f64; 3]> = fine_dv
        .chunks(TEST_SUBSTEPS)
        .map(|c| simpson_weights(c[..half].iter().sum(), c[half..].iter().sum()))
        .collect();
    let fine_times = fine.times();
    let d = x.len();
    // per step: regression points and targets, path-major
    let mut points = vec![Vec::with_capacity(paths * d); steps];
    let mut targets = vec![Vec::with_capacity(paths); steps];
    for chunk in 0..paths.div_ceil(TEST_CHUNK) {
        let n = TEST_CHUNK.min(paths - chunk * TEST_CHUNK);
        let ens = simulator.simulate_from(0, x, &fine, clock, n, crate::rng::derive(seed, chunk as u64))?;
        let rows = (0..n)
            .into_par_iter()
            .map(|p| {
                let eval = |j: usize| -> Result<(f64, f64, f64)> {
                    let (t, xj) = (fine_times[j], ens.point(p, j));
                    let g = gamma_phi.map_or(Ok(0.0), |g| g(t, xj))?;
                    Ok((phi.value(t, xj), a_phi(t, xj)?, g))
                };
                let mut out = Vec::with_capacity(steps);
                let mut left = eval(0)?;
                for k in 0..steps {
                    let mid = eval(k * TEST_SUBSTEPS + half)?;
                    let right = eval((k + 1) * TEST_SUBSTEPS)?;
                    let [wl, wm, wr] = weights[k];
                    let target = match gamma_phi {
                        // E[(phi_1 - phi_0)^2] = E int (Gamma + 2 (phi - phi_0) a(phi)) dV
                        Some(_) if dv[k] > 0.0 => {
                            let g = |v: (f64, f64, f64)| v.2 + 2.0 * (v.0 - left.0) * v.1;
                            let diff = right.0 - left.0;
                            (diff * diff - wl * left.2 - wm * g(mid) - wr * g(right)) / dv[k]
                        }
                        Some(_) => 0.0,
                        None => right.0 - left.0 - (wl * left.1 + wm * mid.1 + wr * right.1),
                    };
                    out.push(target);
                    left = right;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, row) in rows.iter().enumerate() {
            for k in 0..steps {
                points[k].extend_from_slice(ens.point(p, k * TEST_SUBSTEPS));
                targets[k].push(row[k]);
            }
        }
    }
    let mut z = Vec::with_capacity(steps);
    for k in 0..steps {
        if gamma_phi.is_some() && dv[k] == 0.0 {
            z.push(Vec::new());
            continue;
        }
        if let Some(bad) = targets[k].iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("martingale test: non-finite increment on path {bad}, step {k}")));
        }
        let pts: Vec<&[f64]> = points[k].chunks(d).collect();
        let rows = design(&pts, basis);
        let (coef, se) = ols_hc0(&rows, &targets[k])?;
        z.push(z_scores(&coef, &se));
    }
    Ok(report(z))
}

type PointFn = Arc<dyn Fn(f64, &[f64]) -> Result<f64> + Send + Sync>;

/// A test function with its generator action and carré du champ.
#[derive(Clone)]
pub struct MartingaleFixture {
    pub phi: SmoothTestFunction,
    pub a_phi: PointFn,
    pub gamma_phi: PointFn,
    pub basis: TestBasis,
}

impl fmt::Debug for MartingaleFixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MartingaleFixture")
            .field("phi", &self.phi)
            .field("basis", &self.basis)
            .finish()
    }
}

/// Five smooth test functions per generator family with actions and
/// brackets in closed form where the family allows it. Diffusions and jump
/// diffusions use `x_1`, `x_1^2`, `sin`, `atan` and a Gaussian bump in the
/// first coordinate; the stable family uses sinusoids, which are
/// eigenfunctions of its generator; the distributional-drift family uses
/// `psi(h(x))`, for which `a = sigma0(h)^2 psi''(h) / 2`.
pub fn martingale_fixtures(generator: &GeneratorSpec, clock: &ClockV) -> Result<Vec<MartingaleFixture>> {
    let d = generator.dimension();
    match generator {
        GeneratorSpec::Diffusion { .. } | GeneratorSpec::JumpDiffusion { .. } => {
            let action: Arc<dyn GeneratorAction + Send + Sync> = Arc::from(generator_action(generator, clock));
            let gamma = Arc::new(LocalGamma::for_generator(generator)?);
            let base = [
                SmoothTestFunction::power(1),
                SmoothTestFunction::power(2),
                SmoothTestFunction::sinusoid(1.0, 0.0),
                SmoothTestFunction::arctan(),
                SmoothTestFunction::gaussian_bump(0.0, 1.0),
            ];
            Ok(base
                .iter()
                .map(|f| {
                    let phi = f.along_axis(d, 0);
                    let (p1, p2) = (phi.clone(), phi.clone());
                    let (a, g) = (action.clone(), gamma.clone());
                    MartingaleFixture {
                        a_phi: Arc::new(move |t, x| a.apply(&p1, t, x)),
                        gamma_phi: Arc::new(move |t, x| g.gamma(&p2, &p2, t, x)),
                        phi,
                        basis: TestBasis::Polynomial { degree: 2 },
                    }
                })
                .collect())
        }
        GeneratorSpec::Stable { alpha, scale } => {
            let (alpha, scale) = (*alpha, *scale);
            let modes: [(f64, f64); 5] = [(1.0, 0.0), (1.0, std::f64::consts::FRAC_PI_2), (2.0, 0.3), (0.5, 1.0), (1.5, -0.7)];
            Ok(modes
                .iter()
                .map(|&(w, c)| {
                    let lambda = scale * w.abs().powf(alpha);
                    let lambda2 = scale * (2.0 * w).abs().powf(alpha);
                    MartingaleFixture {
                        phi: SmoothTestFunction::sinusoid(w, c),
                        a_phi: Arc::new(move |_, x| Ok(-lambda * (w * x[0] + c).sin())),
                        // a(phi^2) - 2 phi a(phi) with phi^2 = (1 - cos 2 theta) / 2
                        gamma_phi: Arc::new(move |_, x| {
                            let theta = w * x[0] + c;
                            Ok(0.5 * lambda2 * (2.0 * theta).cos() + 2.0 * lambda * theta.sin().powi(2))
                        }),
                        basis: TestBasis::Arctan { degree: 2 },
                    }
                })
                .collect())
        }
        GeneratorSpec::DistributionalDrift(tr) => {
            let psis = [
                SmoothTestFunction::power(1),
                SmoothTestFunction::power(2),
                SmoothTestFunction::sinusoid(1.0, 0.0),
                SmoothTestFunction::arctan(),
                SmoothTestFunction::gaussian_bump(0.0, 1.0),
            ];
            Ok(psis
                .into_iter()
                .map(|psi| {
                    let (t1, t2, t3) = (tr.clone(), tr.clone(), tr.clone());
                    let (q1, q2, q3) = (psi.clone(), psi.clone(), psi.clone());
                    let phi = SmoothTestFunction::new(1, format!("{} o h", psi.label()), move |t, x| {
                        q1.value(t, &[t1.h(x[0])])
                    });
                    MartingaleFixture {
                        phi,
                        a_phi: Arc::new(move |t, x| {
                            let y = t2.h(x[0]);
                            let s0 = t2.sigma0(y)?;
                            Ok(0.5 * s0 * s0 * q2.hessian(t, &[y])[0])
                        }),
                        gamma_phi: Arc::new(move |t, x| {
                            let y = t3.h(x[0]);
                            let s0 = t3.sigma0(y)?;
                            Ok((s0 * q3.gradient(t, &[y])[0]).powi(2))
                        }),
                        basis: TestBasis::Polynomial { degree: 2 },
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::LipschitzDriver;
    use crate::processes::JumpLaw;
    use proptest::prelude::*;

    fn brownian_action() -> LocalGenerator {
        LocalGenerator::new(vec![Function::constant(0.0)], vec![Function::constant(1.0)], None, ClockV::Identity)
    }

    fn unit_gamma() -> LocalGamma {
        LocalGamma::constant(vec![1.0], None).unwrap()
    }

    #[test]
    fn closed_form_partials_agree_with_differences_at_second_order() {
        let f = SmoothTestFunction::gaussian_bump(0.3, 0.9);
        for &x in &[-1.3, 0.0, 0.4, 2.1] {
            let exact = f.hessian(0.0, &[x])[0];
            let err = |h: f64| (f.clone().with_fd_scale(h).fd_gradient(0.0, &[x])[0] - f.gradient(0.0, &[x])[0]).abs();
            assert!(err(1e-2) > 3.0 * err(5e-3), "first derivative order at {x}");
            assert!((f.fd_hessian(0.0, &[x])[0] - exact).abs() < 1e-6);
        }
        let g = SmoothTestFunction::new(2, "x1^2 x2", |_, x| x[0] * x[0] * x[1]);
        let h = g.fd_hessian(0.0, &[0.5, 2.0]);
        assert!((h[0] - 4.0).abs() < 1e-5 && (h[1] - 1.0).abs() < 1e-6 && h[3].abs() < 1e-6);
    }

    #[test]
    fn diffusion_gamma_examples() {
        let x = SmoothTestFunction::power(1);
        let x2 = SmoothTestFunction::power(2);
        let g = unit_gamma();
        assert_eq!(g.gamma(&x, &x, 0.0, &[0.7]).unwrap(), 1.0);
        assert!((g.gamma(&x2, &x2, 0.0, &[1.5]).unwrap() - 9.0).abs() < 1e-12);
        let jumps = Jumps {
            rate: 2.0,
            law: JumpLaw::deterministic(1.0),
        };
        let gj = LocalGamma::constant(vec![1.0], Some(LevyKernel::FiniteActivity(jumps))).unwrap();
        assert!((gj.gamma(&x, &x, 0.0, &[-0.4]).unwrap() - 3.0).abs() < 1e-12);
        let err = LocalGamma::constant(vec![1.0], Some(LevyKernel::Stable { alpha: 1.0, scale: 1.0 }));
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn generator_route_matches_local_formula() {
        let a = brownian_action();
        let x2 = SmoothTestFunction::power(2);
        // a(x^4) = 6x^2, a(x^2) = 1
        assert!((a.apply(&x2.product(&x2), 0.0, &[1.3]).unwrap() - 6.0 * 1.69).abs() < 1e-12);
        let g = gamma_from_generator(&a, &x2, &x2, 0.0, &[1.3]).unwrap();
        assert!((g - 4.0 * 1.69).abs() < 1e-8);
        let c = SmoothTestFunction::power(0);
        assert_eq!(gamma_from_generator(&a, &c, &c, 0.0, &[0.2]).unwrap(), 0.0);
    }

    #[test]
    fn jump_generator_route_matches_local_formula() {
        let jumps = Jumps {
            rate: 1.5,
            law: JumpLaw::TwoPoint {
                up: 0.7,
                down: -0.2,
                p_up: 0.3,
            },
        };
        let a = LocalGenerator::new(vec![Function::constant(0.1)], vec![Function::constant(0.8)], Some(jumps), ClockV::Identity);
        let local = LocalGamma::constant(vec![0.64], Some(LevyKernel::FiniteActivity(jumps))).unwrap();
        let phi = SmoothTestFunction::sinusoid(1.3, 0.2);
        let psi = SmoothTestFunction::gaussian_bump(0.1, 1.2);
        for &x in &[-1.0, 0.3, 2.0] {
            let via_a = gamma_from_generator(&a, &phi, &psi, 0.0, &[x]).unwrap();
            let direct = local.gamma(&phi, &psi, 0.0, &[x]).unwrap();
            assert!((via_a - direct).abs() < 1e-8, "{via_a} vs {direct}");
        }
    }

    #[test]
    fn fractional_quadrature_matches_cosine_eigenvalue() {
        for &alpha in &[0.5, 1.0, 1.5] {
            let a = FractionalGenerator {
                alpha,
                scale: 1.0,
                clock: ClockV::Identity,
            };
            let f = SmoothTestFunction::sinusoid(2.0, std::f64::consts::FRAC_PI_2);
            let got = a.apply(&f, 0.0, &[0.3]).unwrap();
            let exact = -(2f64).powf(alpha) * (0.6f64).cos();
            assert!((got - exact).abs() < 1e-3 * exact.abs(), "alpha {alpha}: {got} vs {exact}");
        }
    }

    #[test]
    fn fractional_gamma_of_constant_is_zero() {
        let c = SmoothTestFunction::power(0);
        let v = gamma_fractional(&c, &c, 1.2, 1.0, 0.0, &[0.4]).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(matches!(gamma_fractional(&c, &c, 2.0, 1.0, 0.0, &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn spectral_oracle_matches_cauchy_closed_form() {
        // (-Delta)^{1/2} of 1/(1+x^2) is (1 - x^2)/(1 + x^2)^2 at alpha = 1
        let f = SmoothTestFunction::new(1, "lorentz", |_, x| 1.0 / (1.0 + x[0] * x[0]));
        let s = SpectralFractional::new(1.0, 1.0);
        let got = s.apply(&f, 0.0, &[0.5]).unwrap();
        let exact = -(1.0 - 0.25) / (1.25f64 * 1.25);
        assert!((got - exact).abs() < 5e-3, "{got} vs {exact}");
        let q = FractionalGenerator {
            alpha: 1.0,
            scale: 1.0,
            clock: ClockV::Identity,
        };
        assert!((q.apply(&f, 0.0, &[0.5]).unwrap() - exact).abs() < 1e-6);
    }

    #[test]
    fn heat_polynomial_has_zero_residual() {
        let u = SmoothTestFunction::new(1, "x^2 + 1 - t", |t, x| x[0] * x[0] + 1.0 - t)
            .with_time_derivative(|_, _| -1.0)
            .with_gradient(|_, x, g| g[0] = 2.0 * x[0])
            .with_hessian(|_, _, h| h[0] = 2.0);
        let problem = ProblemSpec::new(
            GeneratorSpec::brownian(1),
            LipschitzDriver::zero(),
            Function::parse("x1^2", 1).unwrap(),
            1.0,
            ClockV::Identity,
        )
        .unwrap();
        let grid = SpaceTimeGrid::uniform(1.0, 4, vec![-2.0], vec![2.0], vec![9]).unwrap();
        let r = classical_residual(&u, &problem, &grid, &brownian_action(), &unit_gamma(), 1e-9).unwrap();
        assert_eq!(r.sup_abs(), 0.0);
    }

    #[test]
    fn manufactured_solution_and_perturbation() {
        // u* = sin(x) e^{-(T - s)}: a(u*) = u*/2, so f = -y/2 makes u* exact
        let make = |shift: f64| {
            SmoothTestFunction::new(1, "sin e", move |t, x| x[0].sin() * (t - 1.0).exp() + shift)
                .with_time_derivative(|t, x| x[0].sin() * (t - 1.0).exp())
                .with_gradient(|t, x, g| g[0] = x[0].cos() * (t - 1.0).exp())
                .with_hessian(|t, x, h| h[0] = -x[0].sin() * (t - 1.0).exp())
        };
        let driver = LipschitzDriver::new(Function::parse("-0.5*y", 1).unwrap(), 0.5, 0.0, 0.0).unwrap();
        let problem = ProblemSpec::new(
            GeneratorSpec::brownian(1),
            driver,
            Function::parse("sin(x1)", 1).unwrap(),
            1.0,
            ClockV::Identity,
        )
        .unwrap();
        let grid = SpaceTimeGrid::uniform(1.0, 5, vec![-3.0], vec![3.0], vec![13]).unwrap();
        let exact = classical_residual(&make(0.0), &problem, &grid, &brownian_action(), &unit_gamma(), 1e-9).unwrap();
        assert!(exact.sup_abs() <= 1e-10, "{}", exact.sup_abs());
        let off = classical_residual(&make(0.1), &problem, &grid, &brownian_action(), &unit_gamma(), 1e-9).unwrap();
        assert!(off.values().iter().all(|v| (v + 0.05).abs() < 1e-10));
    }

    struct Negative;
    impl CarreDuChamp for Negative {
        fn gamma(&self, _: &SmoothTestFunction, _: &SmoothTestFunction, _: f64, _: &[f64]) -> Result<f64> {
            Ok(-1.0)
        }
    }

    #[test]
    fn negative_gamma_is_flagged() {
        let problem = ProblemSpec::new(
            GeneratorSpec::brownian(1),
            LipschitzDriver::zero(),
            Function::parse("0", 1).unwrap(),
            1.0,
            ClockV::Identity,
        )
        .unwrap();
        let grid = SpaceTimeGrid::uniform(1.0, 2, vec![-1.0], vec![1.0], vec![3]).unwrap();
        let u = SmoothTestFunction::power(1);
        let err = classical_residual(&u, &problem, &grid, &brownian_action(), &Negative, 1e-9);
        assert!(matches!(err, Err(Error::Numerical(m)) if m.contains("broken")));
    }

    #[test]
    fn hc0_errors_match_closed_form_for_a_mean() {
        let ys = [1.0, 2.0, 4.0, 7.0];
        let rows: Vec<Vec<f64>> = ys.iter().map(|_| vec![1.0]).collect();
        let (b, se) = ols_hc0(&rows, &ys).unwrap();
        assert!((b[0] - 3.5).abs() < 1e-14);
        let ss: f64 = ys.iter().map(|y| (y - 3.5) * (y - 3.5)).sum();
        assert!((se[0] - ss.sqrt() / 4.0).abs() < 1e-14);
    }

    #[test]
    fn brownian_square_is_a_martingale_only_with_its_compensator() {
        let gen = GeneratorSpec::brownian(1);
        let grid = SpaceTimeGrid::uniform(1.0, 10, vec![-4.0], vec![4.0], vec![9]).unwrap();
        let x2 = SmoothTestFunction::power(2);
        let good = martingale_test(&gen, &x2, &|_, _| Ok(1.0), 0, &[0.0], &grid, &ClockV::Identity, 20_000, 4, TestBasis::default()).unwrap();
        assert!(good.max_abs_z < 4.0, "{}", good.max_abs_z);
        let bad = martingale_test(&gen, &x2, &|_, _| Ok(0.0), 0, &[0.0], &grid, &ClockV::Identity, 20_000, 4, TestBasis::default()).unwrap();
        assert!(bad.max_abs_z > 10.0);
        let gamma = |_: f64, x: &[f64]| Ok(4.0 * x[0] * x[0]);
        let br = bracket_test(&gen, &x2, &|_, _| Ok(1.0), &gamma, 0, &[0.0], &grid, &ClockV::Identity, 20_000, 5, TestBasis::default()).unwrap();
        assert!(br.max_abs_z < 4.0, "{}", br.max_abs_z);
    }

    fn fixture(k: u8) -> SmoothTestFunction {
        match k % 4 {
            0 => SmoothTestFunction::sinusoid(1.1, 0.3),
            1 => SmoothTestFunction::gaussian_bump(-0.2, 0.8),
            2 => SmoothTestFunction::arctan(),
            _ => SmoothTestFunction::sinusoid(0.4, -1.0),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gamma_is_symmetric_bilinear_and_nonnegative(
            i in 0u8..4, j in 0u8..4, k in 0u8..4, c in -2.0f64..2.0, x in -2.0f64..2.0,
        ) {
            let (p, q, r) = (fixture(i), fixture(j), fixture(k));
            let jumps = Jumps { rate: 0.8, law: JumpLaw::Gaussian { std: 0.5 } };
            let local = LocalGamma::constant(vec![0.5], Some(LevyKernel::FiniteActivity(jumps))).unwrap();
            let frac = FractionalGamma { alpha: 1.3, scale: 1.0 };
            let impls: [(&dyn CarreDuChamp, f64); 2] = [(&local, 1e-10), (&frac, 1e-7)];
            for (g, tol) in impls {
                let pq = g.gamma(&p, &q, 0.0, &[x]).unwrap();
                let qp = g.gamma(&q, &p, 0.0, &[x]).unwrap();
                prop_assert!((pq - qp).abs() <= tol * (1.0 + pq.abs()));
                let combo = SmoothTestFunction::linear_combination(&p, c, &r, 1.0);
                let lhs = g.gamma(&combo, &q, 0.0, &[x]).unwrap();
                let rhs = c * pq + g.gamma(&r, &q, 0.0, &[x]).unwrap();
                prop_assert!((lhs - rhs).abs() <= tol * (1.0 + lhs.abs() + rhs.abs()) * 10.0);
                prop_assert!(g.gamma(&p, &p, 0.0, &[x]).unwrap() >= -tol);
            }
        }
    }
}
