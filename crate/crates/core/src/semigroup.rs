//! Monte-Carlo estimators of `P_{s,T}[phi](x)` and
//! `E^{s,x}[int_s^T psi(r, X_r) dV_r]` over a frozen path cache.
//!
//! The cache holds one ensemble per grid cell `(time index, space node)`.
//! Because the cache is frozen, every estimator is a deterministic function
//! of its arguments, which makes the Picard map of [`crate::mild`] a
//! deterministic map between fields.

use std::borrow::Cow;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{v_increments, ClockV, SpaceTimeGrid};
use crate::processes::{GeneratorSpec, PathEnsemble, PathSimulator};
use crate::rng::derive;
use crate::stats::{mean_stderr, CompensatedSum, Estimate};

/// How cell seeds are derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrnMode {
    /// Every cell uses the same stream family, so path `j` of every cell is
    /// driven by the same noise at the same absolute step. Estimates are then
    /// smooth in space and time.
    Shared,
    /// Cell `(i, n)` uses a seed derived from `(master, i, n)`.
    PerCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StorageMode {
    /// Simulate every cell once and keep all paths in memory.
    Stored,
    /// Keep only seeds; regenerate a cell's ensemble on every visit.
    Streaming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    /// Paths per cell.
    pub paths: usize,
    pub master_seed: u64,
    pub crn: CrnMode,
    pub storage: StorageMode,
    /// Upper bound on stored path data, in bytes.
    pub memory_cap: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            paths: 2000,
            master_seed: 0,
            crn: CrnMode::Shared,
            storage: StorageMode::Stored,
            memory_cap: 2 << 30,
        }
    }
}

impl CacheConfig {
    pub fn new(paths: usize, master_seed: u64) -> Self {
        CacheConfig {
            paths,
            master_seed,
            ..Default::default()
        }
    }
}

/// Size of the cache's path data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageReport {
    pub cells: usize,
    pub paths_per_cell: usize,
    /// `f64` values across all cells (`M x points x d`).
    pub values: usize,
    /// Bytes held in memory (zero in streaming mode).
    pub resident_bytes: usize,
    /// Bytes the stored mode needs.
    pub required_bytes: usize,
}

/// One path ensemble per `(time index, node)`, produced deterministically from
/// the master seed.
pub struct EnsembleCache {
    simulator: Arc<dyn PathSimulator + Send + Sync>,
    grid: SpaceTimeGrid,
    clock: ClockV,
    dv: Vec<f64>,
    config: CacheConfig,
    fingerprint: u64,
    cells: Option<Vec<PathEnsemble>>,
    required_bytes: usize,
}

impl std::fmt::Debug for EnsembleCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleCache")
            .field("config", &self.config)
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint))
            .field("cells", &self.cell_count())
            .finish()
    }
}

/// Builds the cache for a generator.
pub fn build_cache(
    gen: &GeneratorSpec,
    grid: &SpaceTimeGrid,
    clock: &ClockV,
    config: &CacheConfig,
) -> Result<EnsembleCache> {
    EnsembleCache::build(Arc::new(gen.clone()), grid, clock, config)
}

impl EnsembleCache {
    pub fn build(
        simulator: Arc<dyn PathSimulator + Send + Sync>,
        grid: &SpaceTimeGrid,
        clock: &ClockV,
        config: &CacheConfig,
    ) -> Result<Self> {
        if config.paths == 0 {
            return Err(Error::Config("cache: paths per cell must be at least 1".into()));
        }
        if simulator.dimension() != grid.dimension() {
            return Err(Error::Config(format!(
                "cache: generator dimension {} differs from grid dimension {}",
                simulator.dimension(),
                grid.dimension()
            )));
        }
        let dv = v_increments(grid, clock)?;
        let points: usize = (0..grid.times().len()).map(|i| grid.times().len() - i).sum();
        let required_bytes = points
            .saturating_mul(grid.node_count())
            .saturating_mul(grid.dimension())
            .saturating_mul(config.paths)
            .saturating_mul(std::mem::size_of::<f64>());
        let mut cache = EnsembleCache {
            fingerprint: simulator.fingerprint(),
            simulator,
            grid: grid.clone(),
            clock: clock.clone(),
            dv,
            config: config.clone(),
            cells: None,
            required_bytes,
        };
        if config.storage == StorageMode::Stored {
            if required_bytes > config.memory_cap {
                return Err(Error::Resource(format!(
                    "cache needs {required_bytes} bytes, above the cap of {} bytes; \
                     use streaming storage or fewer paths",
                    config.memory_cap
                )));
            }
            let cells = (0..cache.cell_count())
                .into_par_iter()
                .map(|c| {
                    let nodes = cache.grid.node_count();
                    cache.simulate_cell(c / nodes, c % nodes)
                })
                .collect::<Result<Vec<_>>>()?;
            cache.cells = Some(cells);
        }
        Ok(cache)
    }

    fn simulate_cell(&self, s_index: usize, node: usize) -> Result<PathEnsemble> {
        let x = self.grid.node(node);
        self.simulator.simulate_from(
            s_index,
            &x,
            &self.grid,
            &self.clock,
            self.config.paths,
            self.cell_seed(s_index, node),
        )
    }

    /// Seed used for the ensemble of cell `(s_index, node)`.
    pub fn cell_seed(&self, s_index: usize, node: usize) -> u64 {
        match self.config.crn {
            CrnMode::Shared => derive(self.config.master_seed, 0x5eed),
            CrnMode::PerCell => derive(derive(self.config.master_seed, s_index as u64), node as u64),
        }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn clock(&self) -> &ClockV {
        &self.clock
    }

    pub fn dv(&self) -> &[f64] {
        &self.dv
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn paths(&self) -> usize {
        self.config.paths
    }

    pub fn master_seed(&self) -> u64 {
        self.config.master_seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn cell_count(&self) -> usize {
        self.grid.times().len() * self.grid.node_count()
    }

    pub fn storage(&self) -> StorageReport {
        let values = self.required_bytes / std::mem::size_of::<f64>();
        StorageReport {
            cells: self.cell_count(),
            paths_per_cell: self.config.paths,
            values,
            resident_bytes: if self.cells.is_some() { self.required_bytes } else { 0 },
            required_bytes: self.required_bytes,
        }
    }

    /// The ensemble of a cell: borrowed when stored, regenerated when streaming.
    pub fn ensemble(&self, s_index: usize, node: usize) -> Result<Cow<'_, PathEnsemble>> {
        if s_index >= self.grid.times().len() || node >= self.grid.node_count() {
            return Err(Error::Config(format!("cache: no cell ({s_index}, {node})")));
        }
        match &self.cells {
            Some(cells) => Ok(Cow::Borrowed(&cells[s_index * self.grid.node_count() + node])),
            None => self.simulate_cell(s_index, node).map(Cow::Owned),
        }
    }

    /// Whether the cache was built for this simulator on this grid and clock.
    pub fn matches(&self, simulator: &dyn PathSimulator, grid: &SpaceTimeGrid, clock: &ClockV) -> bool {
        simulator.fingerprint() == self.fingerprint && *grid == self.grid && *clock == self.clock
    }
}

/// Per-path terminal values `phi(X_T)`.
pub fn terminal_values(
    ens: &PathEnsemble,
    phi: impl Fn(&[f64]) -> Result<f64> + Sync,
) -> Result<Vec<f64>> {
    (0..ens.path_count())
        .into_par_iter()
        .map(|p| phi(ens.terminal(p)).map_err(|e| with_path(e, p)))
        .collect()
}

/// Per-path left-endpoint sums `sum_k psi(i_k, X_{t_k}) dV_k` over the
/// ensemble's steps; `psi` receives the absolute time index.
pub fn running_values(
    ens: &PathEnsemble,
    dv: &[f64],
    psi: impl Fn(usize, &[f64]) -> Result<f64> + Sync,
) -> Result<Vec<f64>> {
    let s = ens.s_index();
    let steps = ens.times().len() - 1;
    (0..ens.path_count())
        .into_par_iter()
        .map(|p| {
            let mut acc = CompensatedSum::default();
            for k in 0..steps {
                let w = dv[s + k];
                let value = psi(s + k, ens.point(p, k)).map_err(|e| with_path(e, p))?;
                acc.add(value * w);
            }
            Ok(acc.value())
        })
        .collect()
}

fn with_path(err: Error, path: usize) -> Error {
    match err {
        Error::Eval { context, source } => Error::Eval {
            context: format!("{context} on path {path}"),
            source,
        },
        other => other,
    }
}

/// `P_{s,T}[phi](x)` at a cached cell: sample mean of `phi(X_T)` and its stderr.
pub fn terminal_expectation(
    cache: &EnsembleCache,
    s_index: usize,
    node: usize,
    phi: impl Fn(&[f64]) -> Result<f64> + Sync,
) -> Result<Estimate> {
    let ens = cache.ensemble(s_index, node)?;
    Ok(mean_stderr(&terminal_values(&ens, phi)?))
}

/// `E^{s,x}[int_s^T psi(r, X_r) dV_r]` at a cached cell, with a left-endpoint
/// sum per path. `psi` receives the absolute time index.
pub fn running_expectation(
    cache: &EnsembleCache,
    s_index: usize,
    node: usize,
    psi: impl Fn(usize, &[f64]) -> Result<f64> + Sync,
) -> Result<Estimate> {
    let ens = cache.ensemble(s_index, node)?;
    Ok(mean_stderr(&running_values(&ens, cache.dv(), psi)?))
}

/// Outcome of a Chapman-Kolmogorov comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChapmanKolmogorov {
    pub direct: Estimate,
    pub two_stage: Estimate,
    /// `(direct - two_stage) / combined stderr`.
    pub z: f64,
}

/// Compares `E^{s,x}[phi(X_u)]` simulated directly against the two-stage
/// estimate that restarts fresh ensembles of `inner_paths` paths at every
/// realized `X_t`, with independent seeds.
#[allow(clippy::too_many_arguments)]
pub fn chapman_kolmogorov_test(
    simulator: &dyn PathSimulator,
    indices: (usize, usize, usize),
    x: &[f64],
    grid: &SpaceTimeGrid,
    clock: &ClockV,
    phi: impl Fn(&[f64]) -> f64 + Sync,
    paths: usize,
    inner_paths: usize,
    seed: u64,
) -> Result<ChapmanKolmogorov> {
    let (s, t, u) = indices;
    if !(s < t && t < u && u < grid.times().len()) {
        return Err(Error::Config(format!(
            "chapman-kolmogorov: need s < t < u on the grid, got ({s}, {t}, {u})"
        )));
    }
    if inner_paths == 0 {
        return Err(Error::Config("chapman-kolmogorov: inner path count must be at least 1".into()));
    }
    let direct = simulator.simulate_from(s, x, grid, clock, paths, derive(seed, 1))?;
    let direct_values: Vec<f64> = (0..paths).map(|p| phi(direct.point(p, u - s))).collect();

    let outer = simulator.simulate_from(s, x, grid, clock, paths, derive(seed, 2))?;
    let stage_seed = derive(seed, 3);
    let two_stage_values = (0..paths)
        .into_par_iter()
        .map(|p| {
            let xt = outer.point(p, t - s);
            let inner = simulator.simulate_from(t, xt, grid, clock, inner_paths, derive(stage_seed, p as u64))?;
            let v: Vec<f64> = (0..inner_paths).map(|q| phi(inner.point(q, u - t))).collect();
            Ok(mean_stderr(&v).mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    let direct = mean_stderr(&direct_values);
    let two_stage = mean_stderr(&two_stage_values);
    Ok(ChapmanKolmogorov {
        direct,
        two_stage,
        z: direct.z_against(&two_stage),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(times: usize, nodes: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::uniform(1.0, times - 1, vec![-1.0], vec![1.0], vec![nodes]).unwrap()
    }

    #[test]
    fn counts_cells_and_is_deterministic() {
        let g = grid(3, 5);
        let cfg = CacheConfig::new(64, 11);
        let a = build_cache(&GeneratorSpec::brownian(1), &g, &ClockV::Identity, &cfg).unwrap();
        let b = build_cache(&GeneratorSpec::brownian(1), &g, &ClockV::Identity, &cfg).unwrap();
        assert_eq!(a.cell_count(), 15);
        assert_eq!(a.storage().cells, 15);
        // 3 + 2 + 1 points per path over the five nodes
        assert_eq!(a.storage().values, 64 * 6 * 5);
        for c in 0..15 {
            let ea = a.ensemble(c / 5, c % 5).unwrap();
            let eb = b.ensemble(c / 5, c % 5).unwrap();
            let bits = |e: &PathEnsemble| e.raw().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ea), bits(&eb));
        }
    }

    #[test]
    fn zero_paths_and_memory_cap() {
        let g = grid(3, 5);
        let gen = GeneratorSpec::brownian(1);
        let cfg = CacheConfig::new(0, 1);
        assert!(matches!(build_cache(&gen, &g, &ClockV::Identity, &cfg), Err(Error::Config(_))));
        let cfg = CacheConfig {
            memory_cap: 1000,
            ..CacheConfig::new(100, 1)
        };
        assert!(matches!(build_cache(&gen, &g, &ClockV::Identity, &cfg), Err(Error::Resource(_))));
        let streaming = CacheConfig {
            storage: StorageMode::Streaming,
            ..cfg
        };
        let cache = build_cache(&gen, &g, &ClockV::Identity, &streaming).unwrap();
        assert_eq!(cache.storage().resident_bytes, 0);
    }

    #[test]
    fn streaming_matches_stored() {
        let g = grid(4, 3);
        let gen = GeneratorSpec::brownian(1);
        for crn in [CrnMode::Shared, CrnMode::PerCell] {
            let stored = CacheConfig {
                crn,
                ..CacheConfig::new(50, 4)
            };
            let streaming = CacheConfig {
                storage: StorageMode::Streaming,
                ..stored.clone()
            };
            let a = build_cache(&gen, &g, &ClockV::Identity, &stored).unwrap();
            let b = build_cache(&gen, &g, &ClockV::Identity, &streaming).unwrap();
            let ea = terminal_expectation(&a, 1, 2, |x| Ok(x[0].sin())).unwrap();
            let eb = terminal_expectation(&b, 1, 2, |x| Ok(x[0].sin())).unwrap();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn constant_and_frozen_cases_are_exact() {
        let g = grid(5, 5);
        let cache = build_cache(&GeneratorSpec::brownian(1), &g, &ClockV::Identity, &CacheConfig::new(100, 2))
            .unwrap();
        assert_eq!(terminal_expectation(&cache, 0, 2, |_| Ok(1.0)).unwrap(), Estimate::exact(1.0));
        assert_eq!(running_expectation(&cache, 0, 2, |_, _| Ok(1.0)).unwrap(), Estimate::exact(1.0));

        let frozen = build_cache(&GeneratorSpec::frozen(1), &g, &ClockV::Identity, &CacheConfig::new(30, 2))
            .unwrap();
        let est = terminal_expectation(&frozen, 1, 3, |x| Ok(x[0].exp())).unwrap();
        assert_eq!(est, Estimate::exact(0.5f64.exp()));

        let t = g.times().to_vec();
        let quad = ClockV::from_fn(1.0, 1000, |s| s * s).unwrap();
        let c = build_cache(&GeneratorSpec::brownian(1), &g, &quad, &CacheConfig::new(10, 2)).unwrap();
        let e = running_expectation(&c, 0, 0, |_, _| Ok(1.0)).unwrap();
        assert_eq!(e, Estimate::exact(quad.value(t[4]).unwrap() - quad.value(t[0]).unwrap()));
    }

    #[test]
    fn brownian_moments() {
        let g = SpaceTimeGrid::uniform(1.0, 10, vec![-2.0], vec![2.0], vec![5]).unwrap();
        let cfg = CacheConfig::new(20_000, 9);
        let cache = build_cache(&GeneratorSpec::brownian(1), &g, &ClockV::Identity, &cfg).unwrap();
        let x0 = g.node(3)[0];
        let e = terminal_expectation(&cache, 0, 3, |x| Ok(x[0] * x[0])).unwrap();
        assert!((e.mean - (x0 * x0 + 1.0)).abs() < 3.0 * e.stderr, "{e:?}");
        let r = running_expectation(&cache, 4, 3, |_, x| Ok(x[0])).unwrap();
        assert!((r.mean - x0 * 0.6).abs() < 3.0 * r.stderr.max(1e-12), "{r:?}");
    }

    #[test]
    fn evaluation_errors_name_the_path() {
        let g = grid(3, 3);
        let cache = build_cache(&GeneratorSpec::brownian(1), &g, &ClockV::Identity, &CacheConfig::new(10, 2))
            .unwrap();
        let f = crate::problem::Function::parse("log(x1)", 1).unwrap();
        let err = terminal_expectation(&cache, 0, 0, |x| {
            f.eval(0.0, x, 0.0, 0.0).map_err(|e| Error::eval("phi", e))
        })
        .unwrap_err();
        assert!(err.to_string().contains("on path"), "{err}");
    }

    #[test]
    fn chapman_kolmogorov_zero_dynamics() {
        let g = grid(5, 3);
        let r = chapman_kolmogorov_test(
            &GeneratorSpec::frozen(1),
            (0, 2, 4),
            &[0.3],
            &g,
            &ClockV::Identity,
            |x| x[0] * x[0],
            200,
            4,
            1,
        )
        .unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.direct.mean, r.two_stage.mean);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn linear_positive_and_deterministic(a in -3.0f64..3.0, b in -3.0f64..3.0, node in 0usize..5) {
            let g = grid(4, 5);
            let cache = build_cache(&GeneratorSpec::brownian(1), &g, &ClockV::Identity, &CacheConfig::new(200, 6)).unwrap();
            let phi = |x: &[f64]| x[0].sin();
            let chi = |x: &[f64]| x[0] * x[0];
            let lhs = terminal_expectation(&cache, 1, node, |x| Ok(a * phi(x) + b * chi(x))).unwrap();
            let ep = terminal_expectation(&cache, 1, node, |x| Ok(phi(x))).unwrap();
            let ec = terminal_expectation(&cache, 1, node, |x| Ok(chi(x))).unwrap();
            prop_assert!((lhs.mean - (a * ep.mean + b * ec.mean)).abs() <= 1e-12 * (1.0 + lhs.mean.abs()));
            prop_assert!(ec.mean >= 0.0);
            let again = terminal_expectation(&cache, 1, node, |x| Ok(a * phi(x) + b * chi(x))).unwrap();
            prop_assert_eq!(lhs.mean.to_bits(), again.mean.to_bits());
        }
    }
}
