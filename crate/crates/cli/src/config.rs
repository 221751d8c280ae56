//! Run configuration: parsing with path-qualified error collection,
//! cross-field validation and conversion into solver inputs.

use std::fmt;

use serde::Serialize;
use serde_json::{Map, Value};

use pseudopde::fbsde::{LsmcConfig, RegressionBasis};
use pseudopde::mild::{PicardConfig, VScheme};
use pseudopde::processes::{build_h_transform, BTable, JumpLaw, Jumps};
use pseudopde::semigroup::{CacheConfig, CrnMode, StorageMode};
use pseudopde::{v_increments, ClockV, Function, GeneratorSpec, LipschitzDriver, ProblemSpec, SpaceTimeGrid};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Simulate,
    Mild,
    Fbsde,
    Crosscheck,
    Operators,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Simulate, Phase::Mild, Phase::Fbsde, Phase::Crosscheck, Phase::Operators];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Simulate => "simulate",
            Phase::Mild => "mild",
            Phase::Fbsde => "fbsde",
            Phase::Crosscheck => "crosscheck",
            Phase::Operators => "operators",
        }
    }

    pub fn parse(text: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.name() == text.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpLawConfig {
    TwoPoint { up: f64, down: f64, p_up: f64 },
    Gaussian { std: f64 },
    Laplace { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpsConfig {
    pub rate: f64,
    pub law: JumpLawConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Brownian,
    Diffusion {
        drift: Vec<String>,
        vol: Vec<String>,
    },
    JumpDiffusion {
        drift: Vec<String>,
        vol: Vec<String>,
        jumps: JumpsConfig,
    },
    Stable {
        alpha: f64,
        scale: f64,
    },
    DistributionalDrift {
        b: String,
        sigma: String,
        table_min: f64,
        table_max: f64,
        table_nodes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriverConfig {
    pub expr: String,
    #[serde(rename = "K_Y")]
    pub k_y: f64,
    #[serde(rename = "K_Z")]
    pub k_z: f64,
    #[serde(rename = "C_prime")]
    pub c_prime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExprConfig {
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockConfig {
    Identity,
    Tabulated { samples: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemConfig {
    pub generator: GeneratorConfig,
    pub driver: DriverConfig,
    pub terminal_g: ExprConfig,
    #[serde(rename = "horizon_T")]
    pub horizon: f64,
    pub clock: ClockConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub time_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    pub space_min: Vec<f64>,
    pub space_max: Vec<f64>,
    pub space_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MildConfig {
    pub paths_per_cell: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub v_scheme: String,
    pub damping: f64,
    pub crn: String,
    pub storage: String,
    pub memory_cap_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisConfig {
    Polynomial { degree: usize },
    Bins { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OriginConfig {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FbsdeConfig {
    pub paths: usize,
    pub basis: BasisConfig,
    pub ridge: f64,
    pub origins: Vec<OriginConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorsConfig {
    pub paths: usize,
    pub time_steps: usize,
    pub origin: Vec<f64>,
}

/// Normalized configuration with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub schema: u64,
    pub seed: u64,
    pub phases: Vec<Phase>,
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub mild: MildConfig,
    pub fbsde: FbsdeConfig,
    pub operators: OperatorsConfig,
}

/// All violations found in a configuration, each prefixed by its path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("\n"))
    }
}

impl std::error::Error for ConfigErrors {}

struct Reader {
    errors: Vec<String>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Reader {
    fn error(&mut self, path: impl AsRef<str>, msg: impl fmt::Display) {
        self.errors.push(format!("{}: {msg}", path.as_ref()));
    }

    fn object<'a>(&mut self, value: &'a Value, path: &str) -> Option<&'a Map<String, Value>> {
        match value.as_object() {
            Some(m) => Some(m),
            None => {
                self.error(path, "expected an object");
                None
            }
        }
    }

    fn unknown(&mut self, obj: &Map<String, Value>, path: &str, known: &[&str]) {
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                self.error(join(path, key), "unknown field");
            }
        }
    }

    fn section<'a>(&mut self, obj: &'a Map<String, Value>, path: &str, key: &str) -> Option<&'a Map<String, Value>> {
        match obj.get(key) {
            None => {
                self.error(join(path, key), "required");
                None
            }
            Some(v) => self.object(v, &join(path, key)),
        }
    }

    fn number(&mut self, value: &Value, path: &str) -> Option<f64> {
        match value.as_f64() {
            Some(v) if v.is_finite() => Some(v),
            _ => {
                self.error(path, "expected a finite number");
                None
            }
        }
    }

    fn req_f64(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<f64> {
        match obj.get(key) {
            None => {
                self.error(join(path, key), "required");
                None
            }
            Some(v) => self.number(v, &join(path, key)),
        }
    }

    fn opt_f64(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: f64) -> f64 {
        match obj.get(key) {
            None => default,
            Some(v) => self.number(v, &join(path, key)).unwrap_or(default),
        }
    }

    fn integer(&mut self, value: &Value, path: &str) -> Option<u64> {
        match value.as_u64() {
            Some(v) => Some(v),
            None => {
                self.error(path, "expected a non-negative integer");
                None
            }
        }
    }

    fn opt_usize(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: usize) -> usize {
        match obj.get(key) {
            None => default,
            Some(v) => self.integer(v, &join(path, key)).map_or(default, |v| v as usize),
        }
    }

    fn string(&mut self, value: &Value, path: &str) -> Option<String> {
        match value.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                self.error(path, "expected a string");
                None
            }
        }
    }

    fn req_str(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<String> {
        match obj.get(key) {
            None => {
                self.error(join(path, key), "required");
                None
            }
            Some(v) => self.string(v, &join(path, key)),
        }
    }

    fn opt_str(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: &str) -> String {
        match obj.get(key) {
            None => default.to_string(),
            Some(v) => self.string(v, &join(path, key)).unwrap_or_else(|| default.to_string()),
        }
    }

    fn list<T>(
        &mut self,
        obj: &Map<String, Value>,
        path: &str,
        key: &str,
        item: impl Fn(&mut Self, &Value, &str) -> Option<T>,
    ) -> Option<Vec<T>> {
        let p = join(path, key);
        match obj.get(key) {
            None => {
                self.error(&p, "required");
                None
            }
            Some(Value::Array(items)) => {
                let parsed: Vec<Option<T>> = items
                    .iter()
                    .enumerate()
                    .map(|(k, v)| item(self, v, &format!("{p}[{k}]")))
                    .collect();
                parsed.into_iter().collect()
            }
            Some(_) => {
                self.error(&p, "expected an array");
                None
            }
        }
    }

    /// An expression given as `"text"` or `{"expr": "text"}`.
    fn expression(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Option<String> {
        let p = join(path, key);
        match obj.get(key) {
            None => {
                self.error(&p, "required");
                None
            }
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Object(m)) => {
                self.unknown(m, &p, &["expr"]);
                self.req_str(m, &p, "expr")
            }
            Some(_) => {
                self.error(&p, "expected an expression string or {\"expr\": ...}");
                None
            }
        }
    }
}

fn parse_jumps(r: &mut Reader, obj: &Map<String, Value>, path: &str) -> Option<JumpsConfig> {
    let j = r.section(obj, path, "jumps")?;
    let jp = join(path, "jumps");
    r.unknown(j, &jp, &["rate", "law"]);
    let rate = r.req_f64(j, &jp, "rate");
    let law_obj = r.section(j, &jp, "law");
    let lp = join(&jp, "law");
    let law = law_obj.and_then(|l| {
        let kind = r.req_str(l, &lp, "kind")?;
        match kind.as_str() {
            "two_point" => {
                r.unknown(l, &lp, &["kind", "up", "down", "p_up"]);
                let up = r.req_f64(l, &lp, "up");
                let down = r.req_f64(l, &lp, "down");
                let p_up = r.req_f64(l, &lp, "p_up");
                Some(JumpLawConfig::TwoPoint {
                    up: up?,
                    down: down?,
                    p_up: p_up?,
                })
            }
            "gaussian" => {
                r.unknown(l, &lp, &["kind", "std"]);
                Some(JumpLawConfig::Gaussian {
                    std: r.req_f64(l, &lp, "std")?,
                })
            }
            "laplace" => {
                r.unknown(l, &lp, &["kind", "scale"]);
                Some(JumpLawConfig::Laplace {
                    scale: r.req_f64(l, &lp, "scale")?,
                })
            }
            other => {
                r.error(join(&lp, "kind"), format!("unknown jump law '{other}' (two_point, gaussian, laplace)"));
                None
            }
        }
    });
    Some(JumpsConfig { rate: rate?, law: law? })
}

fn parse_generator(r: &mut Reader, obj: &Map<String, Value>, path: &str) -> Option<GeneratorConfig> {
    let g = r.section(obj, path, "generator")?;
    let gp = join(path, "generator");
    let kind = r.req_str(g, &gp, "kind")?;
    let strings = |r: &mut Reader, key: &str| r.list(g, &gp, key, |r, v, p| r.string(v, p));
    match kind.as_str() {
        "brownian" => {
            r.unknown(g, &gp, &["kind"]);
            Some(GeneratorConfig::Brownian)
        }
        "diffusion" => {
            r.unknown(g, &gp, &["kind", "drift", "vol"]);
            let drift = strings(r, "drift");
            let vol = strings(r, "vol");
            Some(GeneratorConfig::Diffusion { drift: drift?, vol: vol? })
        }
        "jump_diffusion" => {
            r.unknown(g, &gp, &["kind", "drift", "vol", "jumps"]);
            let drift = strings(r, "drift");
            let vol = strings(r, "vol");
            let jumps = parse_jumps(r, g, &gp);
            Some(GeneratorConfig::JumpDiffusion {
                drift: drift?,
                vol: vol?,
                jumps: jumps?,
            })
        }
        "stable" => {
            r.unknown(g, &gp, &["kind", "alpha", "scale"]);
            let alpha = r.req_f64(g, &gp, "alpha");
            let scale = r.opt_f64(g, &gp, "scale", 1.0);
            Some(GeneratorConfig::Stable { alpha: alpha?, scale })
        }
        "distributional_drift" => {
            r.unknown(g, &gp, &["kind", "b", "sigma", "table_min", "table_max", "table_nodes"]);
            let b = r.expression(g, &gp, "b");
            let sigma = r.opt_str(g, &gp, "sigma", "1");
            let table_min = r.opt_f64(g, &gp, "table_min", -20.0);
            let table_max = r.opt_f64(g, &gp, "table_max", 20.0);
            let table_nodes = r.opt_usize(g, &gp, "table_nodes", 10_001);
            Some(GeneratorConfig::DistributionalDrift {
                b: b?,
                sigma,
                table_min,
                table_max,
                table_nodes,
            })
        }
        other => {
            r.error(
                join(&gp, "kind"),
                format!("unknown generator '{other}' (brownian, diffusion, jump_diffusion, stable, distributional_drift)"),
            );
            None
        }
    }
}

fn parse_problem(r: &mut Reader, root: &Map<String, Value>) -> Option<ProblemConfig> {
    let p = r.section(root, "", "problem")?;
    let path = "problem";
    r.unknown(p, path, &["generator", "driver", "terminal_g", "horizon_T", "clock"]);
    let generator = parse_generator(r, p, path);
    // a bare string is shorthand for {"expr": ...}
    let driver_obj = match p.get("driver") {
        Some(Value::String(s)) => Some(Map::from_iter([("expr".to_string(), Value::String(s.clone()))])),
        _ => r.section(p, path, "driver").cloned(),
    };
    let driver = driver_obj.as_ref().and_then(|d| {
        let dp = "problem.driver";
        r.unknown(d, dp, &["expr", "K_Y", "K_Z", "C_prime"]);
        let expr = r.req_str(d, dp, "expr");
        let k_y = d.get("K_Y").map(|v| r.number(v, "problem.driver.K_Y"));
        let k_z = d.get("K_Z").map(|v| r.number(v, "problem.driver.K_Z"));
        let c_prime = r.opt_f64(d, dp, "C_prime", 0.0);
        let expr = expr?;
        // constants are required only for the arguments the driver uses
        let uses = |var: &str| expr.split(|c: char| !c.is_ascii_alphanumeric() && c != '_').any(|tok| tok == var);
        let k_y = match k_y {
            Some(v) => v?,
            None if uses("y") => {
                r.error("problem.driver.K_Y", "required when the driver depends on y");
                return None;
            }
            None => 0.0,
        };
        let k_z = match k_z {
            Some(v) => v?,
            None if uses("z") => {
                r.error("problem.driver.K_Z", "required when the driver depends on z");
                return None;
            }
            None => 0.0,
        };
        Some(DriverConfig { expr, k_y, k_z, c_prime })
    });
    let terminal_g = r.expression(p, path, "terminal_g").map(|expr| ExprConfig { expr });
    let horizon = r.req_f64(p, path, "horizon_T");
    let clock = match p.get("clock") {
        None => Some(ClockConfig::Identity),
        Some(v) => r.object(v, "problem.clock").and_then(|c| {
            let kind = r.req_str(c, "problem.clock", "kind")?;
            match kind.as_str() {
                "identity" => {
                    r.unknown(c, "problem.clock", &["kind"]);
                    Some(ClockConfig::Identity)
                }
                "tabulated" => {
                    r.unknown(c, "problem.clock", &["kind", "samples"]);
                    let samples = r.list(c, "problem.clock", "samples", |r, v, p| match v.as_array() {
                        Some(pair) if pair.len() == 2 => Some([r.number(&pair[0], p)?, r.number(&pair[1], p)?]),
                        _ => {
                            r.error(p, "expected a [t, V] pair");
                            None
                        }
                    })?;
                    Some(ClockConfig::Tabulated { samples })
                }
                other => {
                    r.error("problem.clock.kind", format!("unknown clock '{other}' (identity, tabulated)"));
                    None
                }
            }
        }),
    };
    Some(ProblemConfig {
        generator: generator?,
        driver: driver?,
        terminal_g: terminal_g?,
        horizon: horizon?,
        clock: clock?,
    })
}

fn parse_grid(r: &mut Reader, root: &Map<String, Value>) -> Option<GridConfig> {
    let g = r.section(root, "", "grid")?;
    let path = "grid";
    r.unknown(g, path, &["time_steps", "times", "space_min", "space_max", "space_nodes"]);
    let times = match g.get("times") {
        None => None,
        Some(_) => r.list(g, path, "times", |r, v, p| r.number(v, p)),
    };
    let time_steps = match (&times, g.get("time_steps")) {
        (Some(t), None) => t.len().saturating_sub(1),
        (_, Some(v)) => r.integer(v, "grid.time_steps").unwrap_or(0) as usize,
        (None, None) => 50,
    };
    let space_min = r.list(g, path, "space_min", |r, v, p| r.number(v, p));
    let space_max = r.list(g, path, "space_max", |r, v, p| r.number(v, p));
    let space_nodes = r.list(g, path, "space_nodes", |r, v, p| r.integer(v, p).map(|n| n as usize));
    Some(GridConfig {
        time_steps,
        times,
        space_min: space_min?,
        space_max: space_max?,
        space_nodes: space_nodes?,
    })
}

fn parse_mild(r: &mut Reader, root: &Map<String, Value>) -> MildConfig {
    let defaults = PicardConfig::default();
    let cache = CacheConfig::default();
    let empty = Map::new();
    let m = match root.get("mild") {
        None => &empty,
        Some(v) => r.object(v, "mild").unwrap_or(&empty),
    };
    let path = "mild";
    r.unknown(
        m,
        path,
        &[
            "paths_per_cell",
            "max_iterations",
            "tolerance",
            "v_scheme",
            "damping",
            "crn",
            "storage",
            "memory_cap_bytes",
        ],
    );
    MildConfig {
        paths_per_cell: r.opt_usize(m, path, "paths_per_cell", cache.paths),
        max_iterations: r.opt_usize(m, path, "max_iterations", defaults.max_iterations),
        tolerance: r.opt_f64(m, path, "tolerance", defaults.tolerance),
        v_scheme: r.opt_str(m, path, "v_scheme", "variance"),
        damping: r.opt_f64(m, path, "damping", defaults.damping),
        crn: r.opt_str(m, path, "crn", "shared"),
        storage: r.opt_str(m, path, "storage", "stored"),
        memory_cap_bytes: r.opt_usize(m, path, "memory_cap_bytes", cache.memory_cap),
    }
}

/// Default bin count for stable generators, whose tails defeat polynomial fits.
const STABLE_BINS: usize = 100;

fn parse_fbsde(r: &mut Reader, root: &Map<String, Value>, stable: bool) -> FbsdeConfig {
    let defaults = LsmcConfig::default();
    let empty = Map::new();
    let f = match root.get("fbsde") {
        None => &empty,
        Some(v) => r.object(v, "fbsde").unwrap_or(&empty),
    };
    let path = "fbsde";
    r.unknown(f, path, &["paths", "basis", "ridge", "origins"]);
    let basis = match f.get("basis") {
        None if stable => BasisConfig::Bins { count: STABLE_BINS },
        None => match defaults.basis {
            RegressionBasis::Polynomial { degree } => BasisConfig::Polynomial { degree },
            RegressionBasis::Bins { count } => BasisConfig::Bins { count },
        },
        Some(v) => {
            let bp = "fbsde.basis";
            match r.object(v, bp) {
                None => BasisConfig::Polynomial { degree: 4 },
                Some(b) => match r.req_str(b, bp, "kind").as_deref() {
                    Some("polynomial") => {
                        r.unknown(b, bp, &["kind", "degree"]);
                        BasisConfig::Polynomial {
                            degree: r.opt_usize(b, bp, "degree", 4),
                        }
                    }
                    Some("bins") => {
                        r.unknown(b, bp, &["kind", "count"]);
                        BasisConfig::Bins {
                            count: r.opt_usize(b, bp, "count", 40),
                        }
                    }
                    Some(other) => {
                        r.error("fbsde.basis.kind", format!("unknown basis '{other}' (polynomial, bins)"));
                        BasisConfig::Polynomial { degree: 4 }
                    }
                    None => BasisConfig::Polynomial { degree: 4 },
                },
            }
        }
    };
    let origins = match f.get("origins") {
        None => None,
        Some(_) => r.list(f, path, "origins", |r, v, p| {
            let o = r.object(v, p)?;
            r.unknown(o, p, &["t", "x"]);
            let t = r.req_f64(o, p, "t");
            let x = r.list(o, p, "x", |r, v, p| r.number(v, p));
            Some(OriginConfig { t: t?, x: x? })
        }),
    };
    FbsdeConfig {
        paths: r.opt_usize(f, path, "paths", defaults.paths),
        basis,
        ridge: r.opt_f64(f, path, "ridge", defaults.ridge),
        origins: origins.unwrap_or_default(),
    }
}

fn parse_operators(r: &mut Reader, root: &Map<String, Value>) -> OperatorsConfig {
    let empty = Map::new();
    let o = match root.get("operators") {
        None => &empty,
        Some(v) => r.object(v, "operators").unwrap_or(&empty),
    };
    let path = "operators";
    r.unknown(o, path, &["paths", "time_steps", "origin"]);
    let origin = match o.get("origin") {
        None => Vec::new(),
        Some(_) => r.list(o, path, "origin", |r, v, p| r.number(v, p)).unwrap_or_default(),
    };
    OperatorsConfig {
        paths: r.opt_usize(o, path, "paths", 100_000),
        time_steps: r.opt_usize(o, path, "time_steps", 10),
        origin,
    }
}

/// Parses and normalizes a configuration document, then checks every
/// cross-field constraint. All violations are returned together.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("<document>: invalid JSON: {e}")]))?;
    let mut r = Reader { errors: Vec::new() };
    let Some(root) = r.object(&value, "<document>") else {
        return Err(ConfigErrors(r.errors));
    };
    r.unknown(root, "", &["schema", "seed", "phases", "problem", "grid", "mild", "fbsde", "operators"]);
    let schema = match root.get("schema") {
        None => SCHEMA_VERSION,
        Some(v) => r.integer(v, "schema").unwrap_or(SCHEMA_VERSION),
    };
    if schema != SCHEMA_VERSION {
        r.error("schema", format!("unsupported schema version {schema} (expected {SCHEMA_VERSION})"));
    }
    let seed = match root.get("seed") {
        None => 0,
        Some(v) => r.integer(v, "seed").unwrap_or(0),
    };
    let phases = match root.get("phases") {
        None => Some(Phase::ALL.to_vec()),
        Some(_) => r.list(root, "", "phases", |r, v, p| {
            let name = r.string(v, p)?;
            let phase = Phase::parse(&name);
            if phase.is_none() {
                r.error(p, format!("unknown phase '{name}' (simulate, mild, fbsde, crosscheck, operators)"));
            }
            phase
        }),
    };
    let problem = parse_problem(&mut r, root);
    let grid = parse_grid(&mut r, root);
    let mild = parse_mild(&mut r, root);
    let stable = matches!(problem.as_ref().map(|p| &p.generator), Some(GeneratorConfig::Stable { .. }));
    let fbsde = parse_fbsde(&mut r, root, stable);
    let operators = parse_operators(&mut r, root);
    let (Some(problem), Some(grid), Some(phases)) = (problem, grid, phases) else {
        return Err(ConfigErrors(r.errors));
    };
    let mut phases = phases;
    phases.sort();
    phases.dedup();
    let mut config = RunConfig {
        schema,
        seed,
        phases,
        problem,
        grid,
        mild,
        fbsde,
        operators,
    };
    normalize(&mut config);
    r.errors.extend(check(&config).err().map(|e| e.0).unwrap_or_default());
    if r.errors.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(r.errors))
    }
}

fn normalize(config: &mut RunConfig) {
    if config.fbsde.origins.is_empty() {
        config.fbsde.origins.push(OriginConfig {
            t: 0.0,
            x: center(&config.grid),
        });
    }
    if config.operators.origin.is_empty() {
        config.operators.origin = center(&config.grid);
    }
}

fn center(grid: &GridConfig) -> Vec<f64> {
    grid.space_min
        .iter()
        .zip(&grid.space_max)
        .map(|(a, b)| 0.5 * (a + b))
        .collect()
}

/// Solver inputs assembled from a valid configuration.
pub struct Built {
    pub problem: ProblemSpec,
    pub grid: SpaceTimeGrid,
    pub cache: CacheConfig,
    pub picard: PicardConfig,
    pub lsmc: LsmcConfig,
    /// `(time index, node)` of each crosscheck origin.
    pub origins: Vec<(usize, usize)>,
    pub operator_grid: SpaceTimeGrid,
}

fn build_generator(g: &GeneratorConfig, d: usize) -> Result<GeneratorSpec, Vec<String>> {
    let path = "problem.generator";
    let parse_list = |key: &str, items: &[String]| -> Result<Vec<Function>, Vec<String>> {
        let mut errors = Vec::new();
        let fs: Vec<Function> = items
            .iter()
            .enumerate()
            .filter_map(|(k, e)| match Function::parse(e, d) {
                Ok(f) => Some(f),
                Err(err) => {
                    errors.push(format!("{path}.{key}[{k}]: {err}"));
                    None
                }
            })
            .collect();
        if errors.is_empty() {
            Ok(fs)
        } else {
            Err(errors)
        }
    };
    let coefficients = |drift: &[String], vol: &[String]| -> Result<(Vec<Function>, Vec<Function>), Vec<String>> {
        let mut errors = Vec::new();
        if drift.len() != d {
            errors.push(format!("{path}.drift: {} entries for dimension {d}", drift.len()));
        }
        if vol.len() != d * d {
            errors.push(format!("{path}.vol: {} entries; a {d}x{d} row-major matrix is required", vol.len()));
        }
        let dr = parse_list("drift", drift);
        let vo = parse_list("vol", vol);
        if let Err(e) = &dr {
            errors.extend(e.clone());
        }
        if let Err(e) = &vo {
            errors.extend(e.clone());
        }
        if errors.is_empty() {
            Ok((dr.unwrap(), vo.unwrap()))
        } else {
            Err(errors)
        }
    };
    let lib = |e: pseudopde::Error| vec![format!("{path}: {e}")];
    match g {
        GeneratorConfig::Brownian => Ok(GeneratorSpec::brownian(d)),
        GeneratorConfig::Diffusion { drift, vol } => {
            let (drift, vol) = coefficients(drift, vol)?;
            GeneratorSpec::diffusion(drift, vol).map_err(lib)
        }
        GeneratorConfig::JumpDiffusion { drift, vol, jumps } => {
            let (drift, vol) = coefficients(drift, vol)?;
            let law = match jumps.law {
                JumpLawConfig::TwoPoint { up, down, p_up } => JumpLaw::TwoPoint { up, down, p_up },
                JumpLawConfig::Gaussian { std } => JumpLaw::Gaussian { std },
                JumpLawConfig::Laplace { scale } => JumpLaw::Laplace { scale },
            };
            GeneratorSpec::jump_diffusion(drift, vol, Jumps { rate: jumps.rate, law }).map_err(|e| {
                vec![format!("{path}.jumps: {e}")]
            })
        }
        GeneratorConfig::Stable { alpha, scale } => {
            let mut errors = Vec::new();
            if d != 1 {
                errors.push(format!("{path}: the stable generator requires d = 1 (grid has d = {d})"));
            }
            match GeneratorSpec::stable(*alpha, *scale) {
                Ok(g) if errors.is_empty() => Ok(g),
                Ok(_) => Err(errors),
                Err(e) => {
                    errors.push(format!("{path}.alpha: {e}"));
                    Err(errors)
                }
            }
        }
        GeneratorConfig::DistributionalDrift {
            b,
            sigma,
            table_min,
            table_max,
            table_nodes,
        } => {
            if d != 1 {
                return Err(vec![format!("{path}: the distributional-drift generator requires d = 1")]);
            }
            let b_fn = Function::parse(b, 1).map_err(|e| vec![format!("{path}.b: {e}")])?;
            let sigma_fn = Function::parse(sigma, 1).map_err(|e| vec![format!("{path}.sigma: {e}")])?;
            let table = BTable::from_fn(*table_min, *table_max, *table_nodes, |x| {
                b_fn.eval(0.0, &[x], 0.0, 0.0).unwrap_or(f64::NAN)
            })
            .map_err(|e| vec![format!("{path}.b: {e}")])?;
            let transform = build_h_transform(&table, sigma_fn, (*table_min, *table_max))
                .map_err(|e| vec![format!("{path}: {e}")])?;
            Ok(GeneratorSpec::distributional_drift(transform))
        }
    }
}

/// Cross-field checks; returns the solver inputs on success.
pub fn check(config: &RunConfig) -> Result<Built, ConfigErrors> {
    let mut errors = Vec::new();
    let g = &config.grid;
    let d = g.space_min.len();
    if d == 0 {
        errors.push("grid.space_min: at least one dimension is required".to_string());
    }
    if g.space_max.len() != d || g.space_nodes.len() != d {
        errors.push(format!(
            "grid: space_min, space_max and space_nodes must have equal lengths ({}, {}, {})",
            d,
            g.space_max.len(),
            g.space_nodes.len()
        ));
    }
    for k in 0..d.min(g.space_max.len()) {
        if !(g.space_min[k] < g.space_max[k]) {
            errors.push(format!("grid.space_max[{k}]: must exceed space_min[{k}]"));
        }
    }
    if g.space_nodes.iter().any(|&n| n < 2) {
        errors.push("grid.space_nodes: every axis needs at least 2 nodes".to_string());
    }
    if g.time_steps == 0 {
        errors.push("grid.time_steps: must be at least 1".to_string());
    }
    let p = &config.problem;
    if !(p.horizon > 0.0) {
        errors.push("problem.horizon_T: must be positive".to_string());
    }
    if let Some(times) = &g.times {
        if times.len() < 2 || times[0] != 0.0 || (times[times.len() - 1] - p.horizon).abs() > 0.0 {
            errors.push("grid.times: must run from 0 to horizon_T".to_string());
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            errors.push("grid.times: must be strictly increasing".to_string());
        }
    }
    let m = &config.mild;
    let v_scheme = match m.v_scheme.as_str() {
        "variance" => Some(VScheme::Variance),
        "volterra" => Some(VScheme::Volterra),
        other => {
            errors.push(format!("mild.v_scheme: unknown scheme '{other}' (variance, volterra)"));
            None
        }
    };
    let crn = match m.crn.as_str() {
        "shared" => Some(CrnMode::Shared),
        "per_cell" => Some(CrnMode::PerCell),
        other => {
            errors.push(format!("mild.crn: unknown mode '{other}' (shared, per_cell)"));
            None
        }
    };
    let storage = match m.storage.as_str() {
        "stored" => Some(StorageMode::Stored),
        "streaming" => Some(StorageMode::Streaming),
        other => {
            errors.push(format!("mild.storage: unknown mode '{other}' (stored, streaming)"));
            None
        }
    };
    if m.paths_per_cell == 0 {
        errors.push("mild.paths_per_cell: must be at least 1".to_string());
    }
    let picard = PicardConfig {
        max_iterations: m.max_iterations,
        tolerance: m.tolerance,
        v_scheme: v_scheme.unwrap_or(VScheme::Variance),
        damping: m.damping,
    };
    if let Err(e) = picard.validate() {
        errors.push(format!("mild: {e}"));
    }
    let f = &config.fbsde;
    if f.paths < 2 {
        errors.push("fbsde.paths: at least 2 paths are required".to_string());
    }
    if !(f.ridge >= 0.0) {
        errors.push("fbsde.ridge: must be >= 0".to_string());
    }
    let basis = match f.basis {
        BasisConfig::Polynomial { degree } => RegressionBasis::Polynomial { degree },
        BasisConfig::Bins { count } => RegressionBasis::Bins { count },
    };
    if let Err(e) = basis.validate() {
        errors.push(format!("fbsde.basis: {e}"));
    }
    if config.operators.paths < 2 {
        errors.push("operators.paths: at least 2 paths are required".to_string());
    }
    if config.operators.time_steps == 0 {
        errors.push("operators.time_steps: must be at least 1".to_string());
    }
    let has = |ph: Phase| config.phases.contains(&ph);
    if has(Phase::Crosscheck) && !(has(Phase::Mild) && has(Phase::Fbsde)) {
        errors.push("phases: crosscheck requires the mild and fbsde phases".to_string());
    }

    let clock = match &p.clock {
        ClockConfig::Identity => Some(ClockV::Identity),
        ClockConfig::Tabulated { samples } => match ClockV::tabulated(samples.iter().map(|s| (s[0], s[1])).collect()) {
            Ok(c) => Some(c),
            Err(e) => {
                errors.push(format!("problem.clock.samples: {e}"));
                None
            }
        },
    };
    if let Some(c) = &clock {
        if !c.covers(p.horizon) {
            errors.push("problem.clock: does not cover [0, horizon_T]".to_string());
        }
    }

    let generator = if d > 0 {
        match build_generator(&p.generator, d) {
            Ok(g) => Some(g),
            Err(e) => {
                errors.extend(e);
                None
            }
        }
    } else {
        None
    };
    let driver_fn = Function::parse(&p.driver.expr, d.max(1))
        .map_err(|e| errors.push(format!("problem.driver.expr: {e}")))
        .ok();
    let terminal = Function::parse(&p.terminal_g.expr, d.max(1))
        .map_err(|e| errors.push(format!("problem.terminal_g.expr: {e}")))
        .ok();
    let driver = driver_fn.and_then(|f| {
        LipschitzDriver::new(f, p.driver.k_y, p.driver.k_z, p.driver.c_prime)
            .map_err(|e| errors.push(format!("problem.driver: {e}")))
            .ok()
    });

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }

    let grid = match &g.times {
        Some(times) => SpaceTimeGrid::new(times.clone(), g.space_min.clone(), g.space_max.clone(), g.space_nodes.clone()),
        None => SpaceTimeGrid::uniform(p.horizon, g.time_steps, g.space_min.clone(), g.space_max.clone(), g.space_nodes.clone()),
    }
    .map_err(|e| ConfigErrors(vec![format!("grid: {e}")]))?;
    let operator_grid = SpaceTimeGrid::uniform(
        p.horizon,
        config.operators.time_steps,
        g.space_min.clone(),
        g.space_max.clone(),
        g.space_nodes.clone(),
    )
    .map_err(|e| ConfigErrors(vec![format!("operators: {e}")]))?;
    let clock = clock.expect("checked above");
    let problem = ProblemSpec::new(
        generator.expect("checked above"),
        driver.expect("checked above"),
        terminal.expect("checked above"),
        p.horizon,
        clock.clone(),
    )
    .map_err(|e| ConfigErrors(vec![format!("problem: {e}")]))?;

    let dv = v_increments(&grid, &clock).map_err(|e| ConfigErrors(vec![format!("problem.clock: {e}")]))?;
    let max_dv = dv.iter().copied().fold(0.0, f64::max);
    if (has(Phase::Fbsde) || has(Phase::Crosscheck)) && p.driver.k_y * max_dv >= 1.0 {
        errors.push(format!(
            "problem.driver.K_Y: K_Y * max dV = {} violates K_Y * dV < 1 required by the fbsde phase; increase grid.time_steps",
            p.driver.k_y * max_dv
        ));
    }
    if config.operators.origin.len() != d {
        errors.push(format!("operators.origin: expected {d} coordinates"));
    }
    let mut origins = Vec::new();
    for (k, o) in f.origins.iter().enumerate() {
        let path = format!("fbsde.origins[{k}]");
        let i = grid.time_index(o.t);
        let node = if o.x.len() == d { grid.node_index_of(&o.x) } else { None };
        match (i, node) {
            (Some(i), Some(node)) if i < grid.last_index() => origins.push((i, node)),
            (Some(_), Some(_)) => errors.push(format!("{path}.t: must precede horizon_T")),
            (None, _) => errors.push(format!("{path}.t: {} is not a grid time", o.t)),
            (_, None) => errors.push(format!("{path}.x: {:?} is not a grid node", o.x)),
        }
    }
    let cache = CacheConfig {
        paths: m.paths_per_cell,
        master_seed: config.seed,
        crn: crn.expect("checked above"),
        storage: storage.expect("checked above"),
        memory_cap: m.memory_cap_bytes,
    };
    if has(Phase::Mild) || has(Phase::Simulate) {
        let required = stored_bytes(&grid, cache.paths);
        if cache.storage == StorageMode::Stored && required > cache.memory_cap {
            errors.push(format!(
                "mild.memory_cap_bytes: the stored cache needs {required} bytes (cap {}); use storage = \"streaming\" or raise the cap",
                cache.memory_cap
            ));
        }
    }
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    Ok(Built {
        problem,
        grid,
        cache,
        picard,
        lsmc: LsmcConfig {
            paths: f.paths,
            basis,
            ridge: f.ridge,
        },
        origins,
        operator_grid,
    })
}

fn stored_bytes(grid: &SpaceTimeGrid, paths: usize) -> usize {
    let n = grid.times().len();
    let d = grid.dimension();
    let points: usize = (0..n).map(|i| n - i).sum();
    points
        .saturating_mul(grid.node_count())
        .saturating_mul(paths)
        .saturating_mul(d)
        .saturating_mul(std::mem::size_of::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": 1,
        "seed": 7,
        "problem": {
            "generator": {"kind": "brownian"},
            "driver": {"expr": "0"},
            "terminal_g": {"expr": "x1^2"},
            "horizon_T": 1.0
        },
        "grid": {"time_steps": 10, "space_min": [-2], "space_max": [2], "space_nodes": [9]}
    }"#;

    #[test]
    fn minimal_config_is_filled_with_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.phases, Phase::ALL.to_vec());
        assert_eq!(c.fbsde.origins, vec![OriginConfig { t: 0.0, x: vec![0.0] }]);
        assert_eq!(c.mild.v_scheme, "variance");
        assert_eq!(c.problem.clock, ClockConfig::Identity);
        let built = check(&c).unwrap();
        assert_eq!(built.origins, vec![(0, 4)]);
        // the normalized echo parses back to itself
        let echo = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&echo).unwrap(), c);
    }

    #[test]
    fn missing_terminal_condition_is_named() {
        let text = MINIMAL.replace(r#""terminal_g": {"expr": "x1^2"},"#, "");
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.contains(&"problem.terminal_g: required".to_string()), "{err}");
    }

    #[test]
    fn all_violations_are_reported_together() {
        let text = MINIMAL
            .replace(r#""horizon_T": 1.0"#, r#""horizon_T": "one""#)
            .replace(r#""kind": "brownian""#, r#""kind": "levy""#)
            .replace(r#""space_nodes": [9]"#, r#""space_nodes": [9], "extra": 1"#);
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.len() >= 3, "{err}");
        assert!(err.0.iter().any(|e| e.starts_with("problem.horizon_T")));
        assert!(err.0.iter().any(|e| e.starts_with("problem.generator.kind")));
        assert!(err.0.iter().any(|e| e.starts_with("grid.extra")));
    }

    #[test]
    fn contraction_rule_is_enforced_for_fbsde_runs() {
        let text = MINIMAL
            .replace(r#""expr": "0""#, r#""expr": "2*y", "K_Y": 2"#)
            .replace(r#""time_steps": 10"#, r#""time_steps": 1"#);
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.iter().any(|e| e.contains("K_Y * dV < 1")), "{err}");
        let mild_only = text.replace(r#""schema": 1,"#, r#""schema": 1, "phases": ["mild"],"#);
        assert!(parse_config(&mild_only).is_ok());
    }

    #[test]
    fn stable_requires_one_dimension() {
        let text = MINIMAL
            .replace(r#""kind": "brownian""#, r#""kind": "stable", "alpha": 1.5"#)
            .replace(r#""space_min": [-2], "space_max": [2], "space_nodes": [9]"#, r#""space_min": [-2, -2], "space_max": [2, 2], "space_nodes": [5, 5]"#)
            .replace(r#""x1^2""#, r#""x1^2 + x2""#);
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.iter().any(|e| e.contains("requires d = 1")), "{err}");
    }

    #[test]
    fn driver_constants_are_required_for_used_arguments() {
        let text = MINIMAL.replace(r#""expr": "0""#, r#""expr": "0.3*z""#);
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.0, vec!["problem.driver.K_Z: required when the driver depends on z".to_string()]);
    }

    #[test]
    fn stable_generators_default_to_bins() {
        assert_eq!(parse_config(MINIMAL).unwrap().fbsde.basis, BasisConfig::Polynomial { degree: 4 });
        let text = MINIMAL.replace(r#""kind": "brownian""#, r#""kind": "stable", "alpha": 1.5"#);
        assert_eq!(parse_config(&text).unwrap().fbsde.basis, BasisConfig::Bins { count: STABLE_BINS });
    }

    #[test]
    fn driver_accepts_a_bare_expression() {
        let text = MINIMAL.replace(r#""driver": {"expr": "0"}"#, r#""driver": "sin(x1)""#);
        assert_eq!(parse_config(&text).unwrap().problem.driver.expr, "sin(x1)");
        let text = MINIMAL.replace(r#""driver": {"expr": "0"}"#, r#""driver": "y""#);
        assert!(parse_config(&text).unwrap_err().0[0].contains("K_Y"));
    }

    #[test]
    fn off_grid_origins_and_memory_cap_are_rejected() {
        let text = MINIMAL.replace(
            r#""grid""#,
            r#""fbsde": {"origins": [{"t": 0.05, "x": [0.0]}, {"t": 0.0, "x": [0.3]}]}, "mild": {"memory_cap_bytes": 10}, "grid""#,
        );
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.iter().any(|e| e.starts_with("fbsde.origins[0].t")), "{err}");
        assert!(err.0.iter().any(|e| e.starts_with("fbsde.origins[1].x")), "{err}");
        assert!(err.0.iter().any(|e| e.starts_with("mild.memory_cap_bytes")), "{err}");
    }
}
