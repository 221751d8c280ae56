//! Phase orchestration and artifact emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};

use pseudopde::fbsde::{lsmc_solve, BsdeSolution};
use pseudopde::mild::{picard_solve, LineResidual, MildSolution};
use pseudopde::operators::{
    bracket_test, gamma_fractional, gamma_from_generator, generator_action, martingale_fixtures, martingale_test,
    CarreDuChamp, LocalGamma, SmoothTestFunction, SpectralFractional,
};
use pseudopde::rng::derive;
use pseudopde::semigroup::{build_cache, EnsembleCache};
use pseudopde::stats::combined_stderr;
use pseudopde::GeneratorSpec;

use crate::config::{check, parse_config, Built, Phase, RunConfig};
use crate::output::{coordinate_header, field_csv, float, sha256_hex, Csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

/// Thresholds of the operator report.
pub const MARTINGALE_Z_LIMIT: f64 = 4.0;
pub const GAMMA_FLOOR: f64 = -1e-9;
pub const LOCAL_ROUTE_TOLERANCE: f64 = 1e-8;
pub const TABLE_ROUTE_TOLERANCE: f64 = 1e-4;
pub const FRACTIONAL_ROUTE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub phases: Option<Vec<Phase>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Value,
}

/// One line of `operator_report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorCheck {
    pub check: String,
    pub generator: String,
    pub function: String,
    pub statistic: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Reads the config, applies flag overrides and validates the result.
pub fn load_config(path: &Path, seed: Option<u64>, phases: Option<&[Phase]>) -> Result<RunConfig, Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    if seed.is_none() && phases.is_none() {
        return parse_config(&text).map_err(|e| e.0);
    }
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| vec![format!("<document>: invalid JSON: {e}")])?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(seed) = seed {
            obj.insert("seed".into(), json!(seed));
        }
        if let Some(phases) = phases {
            obj.insert("phases".into(), json!(phases));
        }
    }
    parse_config(&value.to_string()).map_err(|e| e.0)
}

struct Session<'a> {
    config: &'a RunConfig,
    built: Built,
    out: &'a Path,
    hash: String,
    manifest: Map<String, Value>,
    artifacts: Map<String, Value>,
    cache: Option<EnsembleCache>,
    mild: Option<MildSolution>,
    bsde: Vec<BsdeSolution>,
    not_converged: bool,
}

impl Session<'_> {
    fn write_csv(&mut self, name: &str, csv: &Csv) -> Result<(), String> {
        let digest = csv.write(&self.out.join(name)).map_err(|e| format!("writing {name}: {e}"))?;
        self.artifacts.insert(name.into(), json!(digest));
        Ok(())
    }

    fn ensure_cache(&mut self) -> Result<(), String> {
        if self.cache.is_none() {
            let p = &self.built.problem;
            let cache = build_cache(&p.generator, &self.built.grid, &p.clock, &self.built.cache).map_err(|e| e.to_string())?;
            let report = cache.storage();
            self.manifest.insert(
                "cache".into(),
                json!({
                    "cells": report.cells,
                    "paths_per_cell": report.paths_per_cell,
                    "values": report.values,
                    "resident_bytes": report.resident_bytes,
                    "required_bytes": report.required_bytes,
                    "fingerprint": format!("{:016x}", cache.fingerprint()),
                }),
            );
            self.cache = Some(cache);
        }
        Ok(())
    }

    fn mild(&mut self) -> Result<(), String> {
        self.ensure_cache()?;
        let seed = self.config.seed;
        let lipschitz = self
            .built
            .problem
            .driver
            .check_lipschitz(&self.built.grid, 10.0, 4096, derive(seed, 0x11b5))
            .map_err(|e| e.to_string())?;
        let cache = self.cache.as_ref().expect("cache built");
        let solution = picard_solve(&self.built.problem, &self.built.grid, cache, &self.built.picard).map_err(|e| e.to_string())?;
        let grid = &self.built.grid;
        let u = field_csv(&self.hash, grid, &solution.u);
        let v = field_csv(&self.hash, grid, &solution.v);
        let mut deltas = Csv::new(&self.hash, &["iteration".into(), "sup_delta".into()]);
        for (k, delta) in solution.deltas.iter().enumerate() {
            deltas.row(&[(k + 1).to_string(), float(*delta)]);
        }
        self.write_csv("u.csv", &u)?;
        self.write_csv("v.csv", &v)?;
        self.write_csv("deltas.csv", &deltas)?;
        let r = &solution.residuals;
        let line = |l: &LineResidual| json!({"sup": l.sup, "stderr": l.stderr, "normalized": l.normalized});
        self.manifest.insert(
            "mild".into(),
            json!({
                "converged": solution.converged,
                "iterations": solution.iterations,
                "final_delta": solution.deltas.last().copied(),
                "tolerance": self.built.picard.tolerance,
                "residuals": {
                    "line_1": line(&r.line_1),
                    "line_2": line(&r.line_2),
                    "resolved_1": line(&r.resolved_1),
                    "resolved_2": line(&r.resolved_2),
                    "cells": r.cells,
                    "resolved_cells": r.resolved_cells,
                    "scale_1": r.scale_1,
                    "scale_2": r.scale_2,
                    "relative": r.relative,
                },
                "clamps": {
                    "count": solution.clamps.count,
                    "total": solution.clamps.total,
                    "max": solution.clamps.max,
                },
                "out_of_bounds_share": solution.out_of_bounds,
                "lipschitz_check": {
                    "max_quotient_y": lipschitz.max_quotient_y,
                    "max_quotient_z": lipschitz.max_quotient_z,
                    "samples": lipschitz.samples,
                    "within_bounds": lipschitz.within_bounds,
                },
                "warnings": solution.warnings,
            }),
        );
        if !solution.converged {
            self.not_converged = true;
        }
        self.mild = Some(solution);
        Ok(())
    }

    fn fbsde(&mut self) -> Result<(), String> {
        let grid = &self.built.grid;
        let d = grid.dimension();
        let mut csv = Csv::new(
            &self.hash,
            &coordinate_header(d, &["s"], &["y0", "y0_stderr", "z0", "z0_stderr", "z_clamped"]),
        );
        let mut summary = Vec::new();
        for (k, &(i, node)) in self.built.origins.iter().enumerate() {
            let x = grid.node(node);
            // same seeds as the library crosscheck, independent of the mild cache
            let seed = derive(self.config.seed, 0xc0ffee + k as u64);
            let sol = lsmc_solve(&self.built.problem, i, &x, grid, &self.built.lsmc, seed)
                .map_err(|e| format!("origin {k}: {e}"))?;
            let clamped: usize = sol.steps.iter().map(|s| s.z_clamped).sum();
            let mut row = vec![float(grid.times()[i])];
            row.extend(x.iter().map(|v| float(*v)));
            row.extend([
                float(sol.y0.mean),
                float(sol.y0.stderr),
                float(sol.z0.mean),
                float(sol.z0.stderr),
                clamped.to_string(),
            ]);
            csv.row(&row);
            summary.push(json!({"s": grid.times()[i], "x": x, "z_clamped": clamped}));
            self.bsde.push(sol);
        }
        self.write_csv("fbsde.csv", &csv)?;
        self.manifest.insert("fbsde".into(), json!({ "origins": summary }));
        Ok(())
    }

    fn crosscheck(&mut self) -> Result<(), String> {
        let mild = self.mild.as_ref().ok_or("crosscheck needs the mild solution")?;
        let grid = &self.built.grid;
        let mut csv = Csv::new(
            &self.hash,
            &coordinate_header(grid.dimension(), &["s"], &["u", "y0", "v", "z0", "combined_stderr"]),
        );
        let mut summary = Vec::new();
        for (&(i, node), sol) in self.built.origins.iter().zip(&self.bsde) {
            let (u, v) = (mild.u_at(i, node), mild.v_at(i, node));
            let se = combined_stderr(u.stderr, sol.y0.stderr);
            let mut row = vec![float(grid.times()[i])];
            row.extend(sol.origin.iter().map(|v| float(*v)));
            row.extend([float(u.mean), float(sol.y0.mean), float(v.mean), float(sol.z0.mean), float(se)]);
            csv.row(&row);
            summary.push(json!({
                "s": grid.times()[i],
                "x": sol.origin,
                "u_gap": (u.mean - sol.y0.mean).abs(),
                "combined_stderr": se,
                "v_gap": (v.mean - sol.z0.mean).abs(),
                "combined_stderr_z": combined_stderr(v.stderr, sol.z0.stderr),
            }));
        }
        self.write_csv("crosscheck.csv", &csv)?;
        self.manifest.insert("crosscheck".into(), json!({ "origins": summary }));
        Ok(())
    }

    fn operators(&mut self) -> Result<(), String> {
        let checks = operator_checks(&self.built, &self.config.operators.origin, self.config.operators.paths, self.config.seed)
            .map_err(|e| e.to_string())?;
        let mut csv = Csv::new(
            &self.hash,
            &["check", "generator", "function", "statistic", "value", "threshold", "pass"].map(String::from),
        );
        for c in &checks {
            csv.row(&[
                c.check.clone(),
                quote(&c.generator),
                quote(&c.function),
                c.statistic.clone(),
                float(c.value),
                float(c.threshold),
                c.pass.to_string(),
            ]);
        }
        self.write_csv("operator_report.csv", &csv)?;
        let failed: Vec<Value> = checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| json!({"check": c.check, "function": c.function, "value": c.value}))
            .collect();
        self.manifest.insert(
            "operators".into(),
            json!({"checks": checks.len(), "failed": failed}),
        );
        Ok(())
    }
}

fn quote(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Martingale, bracket, nonnegativity and route-agreement checks for the
/// configured generator.
pub fn operator_checks(built: &Built, origin: &[f64], paths: usize, seed: u64) -> pseudopde::Result<Vec<OperatorCheck>> {
    let problem = &built.problem;
    let grid = &built.operator_grid;
    let generator = &problem.generator;
    let clock = &problem.clock;
    let name = generator.describe();
    let fixtures = martingale_fixtures(generator, clock)?;
    let mut out = Vec::new();
    let push = |out: &mut Vec<OperatorCheck>, check: &str, function: &str, statistic: &str, value: f64, threshold: f64, pass: bool| {
        out.push(OperatorCheck {
            check: check.into(),
            generator: name.clone(),
            function: function.into(),
            statistic: statistic.into(),
            value,
            threshold,
            pass,
        })
    };
    let t0 = grid.times()[0];
    let nodes: Vec<Vec<f64>> = (0..grid.node_count()).map(|n| grid.node(n)).collect();
    for (k, f) in fixtures.iter().enumerate() {
        let label = f.phi.label().to_string();
        let m = martingale_test(
            generator,
            &f.phi,
            f.a_phi.as_ref(),
            0,
            origin,
            grid,
            clock,
            paths,
            derive(seed, 0x0be7_0000 + 2 * k as u64),
            f.basis,
        )?;
        push(&mut out, "martingale", &label, "max_abs_z", m.max_abs_z, MARTINGALE_Z_LIMIT, m.max_abs_z < MARTINGALE_Z_LIMIT);
        let b = bracket_test(
            generator,
            &f.phi,
            f.a_phi.as_ref(),
            f.gamma_phi.as_ref(),
            0,
            origin,
            grid,
            clock,
            paths,
            derive(seed, 0x0be7_0001 + 2 * k as u64),
            f.basis,
        )?;
        push(&mut out, "bracket", &label, "max_abs_z", b.max_abs_z, MARTINGALE_Z_LIMIT, b.max_abs_z < MARTINGALE_Z_LIMIT);
        let mut min_gamma = f64::INFINITY;
        for x in &nodes {
            min_gamma = min_gamma.min((f.gamma_phi)(t0, x)?);
        }
        push(&mut out, "gamma_nonnegative", &label, "min_gamma", min_gamma, GAMMA_FLOOR, min_gamma >= GAMMA_FLOOR);
    }
    match generator {
        GeneratorSpec::Diffusion { .. } | GeneratorSpec::JumpDiffusion { .. } | GeneratorSpec::DistributionalDrift(_) => {
            let local = LocalGamma::for_generator(generator)?;
            let action = generator_action(generator, clock);
            let tolerance = match generator {
                GeneratorSpec::DistributionalDrift(_) => TABLE_ROUTE_TOLERANCE,
                _ => LOCAL_ROUTE_TOLERANCE,
            };
            for f in &fixtures {
                let mut worst = 0.0f64;
                for x in &nodes {
                    let a = local.gamma(&f.phi, &f.phi, t0, x)?;
                    let b = gamma_from_generator(action.as_ref(), &f.phi, &f.phi, t0, x)?;
                    worst = worst.max((a - b).abs() / (1.0 + a.abs()));
                }
                push(&mut out, "gamma_route_local_vs_generator", f.phi.label(), "max_rel_diff", worst, tolerance, worst <= tolerance);
            }
        }
        GeneratorSpec::Stable { alpha, scale } => {
            let spectral = SpectralFractional::new(*alpha, *scale);
            let bump = SmoothTestFunction::gaussian_bump(origin[0], 1.0);
            let quad = gamma_fractional(&bump, &bump, *alpha, *scale, t0, origin)?.value;
            let oracle = gamma_from_generator(&spectral, &bump, &bump, t0, origin)?;
            let rel = (quad - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
            push(
                &mut out,
                "gamma_route_fractional_vs_spectral",
                bump.label(),
                "rel_diff",
                rel,
                FRACTIONAL_ROUTE_TOLERANCE,
                rel <= FRACTIONAL_ROUTE_TOLERANCE,
            );
            for f in &fixtures {
                let quad = gamma_fractional(&f.phi, &f.phi, *alpha, *scale, t0, origin)?.value;
                let exact = (f.gamma_phi)(t0, origin)?;
                let rel = (quad - exact).abs() / exact.abs().max(1e-12);
                push(
                    &mut out,
                    "gamma_route_fractional_vs_closed_form",
                    f.phi.label(),
                    "rel_diff",
                    rel,
                    FRACTIONAL_ROUTE_TOLERANCE,
                    rel <= FRACTIONAL_ROUTE_TOLERANCE,
                );
            }
        }
    }
    Ok(out)
}

fn write_manifest(out: &Path, manifest: &Value) {
    let text = serde_json::to_string_pretty(manifest).unwrap_or_default() + "\n";
    if let Err(e) = fs::write(out.join("manifest.json"), text) {
        eprintln!("error: writing manifest.json: {e}");
    }
}

fn base_manifest(opts: &RunOptions) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("tool".into(), json!("pseudopde"));
    m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("config_path".into(), json!(opts.config.display().to_string()));
    m.insert("threads".into(), json!(opts.threads));
    m
}

fn failure(opts: &RunOptions, mut manifest: Map<String, Value>, phase: &str, messages: Vec<String>) -> RunOutcome {
    for msg in &messages {
        eprintln!("error: {msg}");
    }
    manifest.insert("status".into(), json!("error"));
    manifest.insert("exit_code".into(), json!(EXIT_ERROR));
    manifest.insert("error".into(), json!({"phase": phase, "messages": messages}));
    let manifest = Value::Object(manifest);
    write_manifest(&opts.out, &manifest);
    RunOutcome {
        exit_code: EXIT_ERROR,
        manifest,
    }
}

/// Executes the requested phases and writes every artifact into `opts.out`.
pub fn run(opts: &RunOptions) -> RunOutcome {
    let mut manifest = base_manifest(opts);
    if let Err(e) = fs::create_dir_all(&opts.out) {
        eprintln!("error: creating {}: {e}", opts.out.display());
        manifest.insert("status".into(), json!("error"));
        return RunOutcome {
            exit_code: EXIT_ERROR,
            manifest: Value::Object(manifest),
        };
    }
    let config = match load_config(&opts.config, opts.seed, opts.phases.as_deref()) {
        Ok(c) => c,
        Err(errors) => return failure(opts, manifest, "config", errors),
    };
    let built = match check(&config) {
        Ok(b) => b,
        Err(e) => return failure(opts, manifest, "config", e.0),
    };
    let config_text = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
    let hash = sha256_hex(config_text.as_bytes());
    manifest.insert("config_sha256".into(), json!(hash));
    manifest.insert("seed".into(), json!(config.seed));
    manifest.insert("phases".into(), json!(config.phases));
    if let Err(e) = fs::write(opts.out.join("config.json"), &config_text) {
        return failure(opts, manifest, "config", vec![format!("writing config.json: {e}")]);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(opts.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => return failure(opts, manifest, "threads", vec![e.to_string()]),
    };
    let mut session = Session {
        config: &config,
        built,
        out: &opts.out,
        hash,
        manifest,
        artifacts: Map::new(),
        cache: None,
        mild: None,
        bsde: Vec::new(),
        not_converged: false,
    };
    let mut timings = Map::new();
    let mut error = None;
    pool.install(|| {
        for &phase in &config.phases {
            let start = Instant::now();
            let result = match phase {
                Phase::Simulate => session.ensure_cache(),
                Phase::Mild => session.mild(),
                Phase::Fbsde => session.fbsde(),
                Phase::Crosscheck => session.crosscheck(),
                Phase::Operators => session.operators(),
            };
            timings.insert(phase.name().into(), json!(start.elapsed().as_secs_f64()));
            if let Err(message) = result {
                eprintln!("error: {} phase: {message}", phase.name());
                error = Some(json!({"phase": phase.name(), "messages": [message]}));
                break;
            }
        }
    });
    let Session {
        mut manifest,
        artifacts,
        not_converged,
        ..
    } = session;
    let (status, exit_code) = match (&error, not_converged) {
        (Some(_), _) => ("error", EXIT_ERROR),
        (None, true) => ("not_converged", EXIT_NOT_CONVERGED),
        (None, false) => ("ok", EXIT_OK),
    };
    manifest.insert("timings_seconds".into(), Value::Object(timings));
    manifest.insert("artifacts_sha256".into(), Value::Object(artifacts));
    manifest.insert("status".into(), json!(status));
    manifest.insert("exit_code".into(), json!(exit_code));
    manifest.insert("error".into(), error.unwrap_or(Value::Null));
    let manifest = Value::Object(manifest);
    write_manifest(&opts.out, &manifest);
    RunOutcome { exit_code, manifest }
}
