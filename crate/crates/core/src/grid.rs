//! Time grids, the clock `V` and spatial meshes.

use crate::error::{Error, Result};

/// The non-decreasing continuous clock `V` against which running integrals
/// and compensators are taken.
#[derive(Debug, Clone, PartialEq)]
pub enum ClockV {
    /// `V(t) = t`.
    Identity,
    /// Piecewise-linear interpolation of `(time, value)` samples.
    Tabulated(Vec<(f64, f64)>),
}

impl ClockV {
    /// Validates a tabulated clock: sorted times, `V(0) = 0`, non-decreasing values.
    pub fn tabulated(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Config("clock: at least two samples required".into()));
        }
        if samples.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::Config("clock: samples must be finite".into()));
        }
        if samples[0].0 != 0.0 || samples[0].1 != 0.0 {
            return Err(Error::Config("clock: must start at V(0) = 0".into()));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("clock: sample times must be strictly increasing".into()));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Config("clock: V must be non-decreasing".into()));
            }
        }
        Ok(ClockV::Tabulated(samples))
    }

    /// Tabulates `f` on `n + 1` equally spaced points of `[0, horizon]`.
    pub fn from_fn(horizon: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let samples = (0..=n)
            .map(|k| {
                let t = horizon * k as f64 / n as f64;
                (t, f(t))
            })
            .collect();
        Self::tabulated(samples)
    }

    pub fn covers(&self, horizon: f64) -> bool {
        match self {
            ClockV::Identity => true,
            ClockV::Tabulated(s) => s.last().map(|(t, _)| *t >= horizon).unwrap_or(false),
        }
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        match self {
            ClockV::Identity => Ok(t),
            ClockV::Tabulated(s) => {
                let (t0, t1) = (s[0].0, s[s.len() - 1].0);
                if t < t0 || t > t1 {
                    return Err(Error::Config(format!(
                        "clock: time {t} outside tabulated range [{t0}, {t1}]"
                    )));
                }
                let k = s.partition_point(|(ts, _)| *ts <= t);
                if k >= s.len() {
                    return Ok(s[s.len() - 1].1);
                }
                let (ta, va) = s[k - 1];
                let (tb, vb) = s[k];
                Ok(va + (vb - va) * (t - ta) / (tb - ta))
            }
        }
    }
}

/// A time grid `t_0 < ... < t_N = T` and a uniform box mesh in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    times: Vec<f64>,
    space_min: Vec<f64>,
    space_max: Vec<f64>,
    space_nodes: Vec<usize>,
}

impl SpaceTimeGrid {
    pub fn new(
        times: Vec<f64>,
        space_min: Vec<f64>,
        space_max: Vec<f64>,
        space_nodes: Vec<usize>,
    ) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("grid: at least two time points required".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("grid: times must be finite and strictly increasing".into()));
        }
        let d = space_min.len();
        if d == 0 || space_max.len() != d || space_nodes.len() != d {
            return Err(Error::Config(
                "grid: space bounds and node counts must share a positive dimension".into(),
            ));
        }
        for k in 0..d {
            if !(space_min[k].is_finite() && space_max[k].is_finite() && space_min[k] < space_max[k])
            {
                return Err(Error::Config(format!(
                    "grid: space_min[{k}] must be below space_max[{k}]"
                )));
            }
            if space_nodes[k] < 2 {
                return Err(Error::Config(format!(
                    "grid: space_nodes[{k}] must be at least 2"
                )));
            }
        }
        Ok(SpaceTimeGrid {
            times,
            space_min,
            space_max,
            space_nodes,
        })
    }

    /// `steps` equal time steps on `[0, horizon]`.
    pub fn uniform(
        horizon: f64,
        steps: usize,
        space_min: Vec<f64>,
        space_max: Vec<f64>,
        space_nodes: Vec<usize>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::Config("grid: horizon must be positive and steps >= 1".into()));
        }
        let mut times: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        times[steps] = horizon;
        Self::new(times, space_min, space_max, space_nodes)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Index of the last time point `N`.
    pub fn last_index(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dimension(&self) -> usize {
        self.space_min.len()
    }

    pub fn space_min(&self) -> &[f64] {
        &self.space_min
    }

    pub fn space_max(&self) -> &[f64] {
        &self.space_max
    }

    pub fn space_nodes(&self) -> &[usize] {
        &self.space_nodes
    }

    pub fn node_count(&self) -> usize {
        self.space_nodes.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.space_max[axis] - self.space_min[axis]) / (self.space_nodes[axis] - 1) as f64
    }

    /// Coordinates of the node with the given flat index (first axis fastest).
    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension()];
        self.node_into(flat, &mut out);
        out
    }

    pub fn node_into(&self, mut flat: usize, out: &mut [f64]) {
        for (axis, o) in out.iter_mut().enumerate() {
            let n = self.space_nodes[axis];
            let k = flat % n;
            flat /= n;
            *o = if k == n - 1 {
                self.space_max[axis]
            } else {
                self.space_min[axis] + k as f64 * self.spacing(axis)
            };
        }
    }

    /// Flat index of the node nearest to `x`, if `x` lies on a node.
    pub fn node_index_of(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dimension() {
            return None;
        }
        let mut flat = 0usize;
        let mut stride = 1usize;
        for axis in 0..self.dimension() {
            let h = self.spacing(axis);
            let pos = (x[axis] - self.space_min[axis]) / h;
            let k = pos.round();
            if (pos - k).abs() > 1e-9 || k < 0.0 || k as usize >= self.space_nodes[axis] {
                return None;
            }
            flat += k as usize * stride;
            stride *= self.space_nodes[axis];
        }
        Some(flat)
    }

    /// Index of `t` in the time grid, up to a relative tolerance of 1e-12.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon().abs().max(1.0);
        self.times.iter().position(|&s| (s - t).abs() <= tol)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, v)| *v >= self.space_min[k] && *v <= self.space_max[k])
    }

    pub fn same_space(&self, other: &SpaceTimeGrid) -> bool {
        self.space_min == other.space_min
            && self.space_max == other.space_max
            && self.space_nodes == other.space_nodes
    }
}

/// Clock increments `V(t_{i+1}) - V(t_i)` along the grid.
pub fn v_increments(grid: &SpaceTimeGrid, clock: &ClockV) -> Result<Vec<f64>> {
    let times = grid.times();
    if !clock.covers(grid.horizon()) {
        return Err(Error::Config(format!(
            "clock does not cover the grid horizon {}",
            grid.horizon()
        )));
    }
    let values = times
        .iter()
        .map(|&t| clock.value(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.windows(2).map(|w| w[1] - w[0]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_1d(times: Vec<f64>) -> SpaceTimeGrid {
        SpaceTimeGrid::new(times, vec![-1.0], vec![1.0], vec![3]).unwrap()
    }

    #[test]
    fn identity_clock_increments() {
        let g = grid_1d(vec![0.0, 0.5, 1.0]);
        assert_eq!(v_increments(&g, &ClockV::Identity).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn tabulated_square_clock() {
        let clock = ClockV::from_fn(1.0, 1000, |t| t * t).unwrap();
        let g = grid_1d(vec![0.0, 0.5, 1.0]);
        let dv = v_increments(&g, &clock).unwrap();
        assert!((dv[0] - 0.25).abs() < 1e-6);
        assert!((dv[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn degenerate_zero_clock() {
        let clock = ClockV::tabulated(vec![(0.0, 0.0), (2.0, 0.0)]).unwrap();
        let g = grid_1d(vec![0.0, 0.5, 1.0]);
        assert_eq!(v_increments(&g, &clock).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn short_clock_is_a_configuration_error() {
        let clock = ClockV::tabulated(vec![(0.0, 0.0), (0.5, 0.5)]).unwrap();
        let g = grid_1d(vec![0.0, 0.5, 1.0]);
        assert!(matches!(v_increments(&g, &clock), Err(Error::Config(_))));
    }

    #[test]
    fn clock_validation() {
        assert!(ClockV::tabulated(vec![(0.0, 0.1), (1.0, 1.0)]).is_err());
        assert!(ClockV::tabulated(vec![(0.0, 0.0), (1.0, -1.0)]).is_err());
        assert!(ClockV::tabulated(vec![(0.0, 0.0), (0.0, 1.0)]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(SpaceTimeGrid::new(vec![0.0], vec![0.0], vec![1.0], vec![2]).is_err());
        assert!(SpaceTimeGrid::new(vec![0.0, 1.0], vec![1.0], vec![1.0], vec![2]).is_err());
        assert!(SpaceTimeGrid::new(vec![0.0, 1.0], vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(SpaceTimeGrid::new(vec![0.0, 0.0], vec![0.0], vec![1.0], vec![2]).is_err());
    }

    #[test]
    fn node_indexing_round_trips() {
        let g = SpaceTimeGrid::uniform(1.0, 4, vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 3]).unwrap();
        for flat in 0..g.node_count() {
            assert_eq!(g.node_index_of(&g.node(flat)), Some(flat));
        }
        assert_eq!(g.node(0), vec![-1.0, 0.0]);
        assert_eq!(g.node(14), vec![1.0, 2.0]);
        assert_eq!(g.time_index(0.75), Some(3));
        assert_eq!(g.time_index(0.7), None);
    }

    proptest! {
        #[test]
        fn increments_telescope(
            mut steps in proptest::collection::vec(0.0f64..1.0, 1..20),
            jumps in proptest::collection::vec(0.01f64..1.0, 2..20),
        ) {
            steps.insert(0, 0.0);
            let mut acc = 0.0;
            let samples: Vec<(f64, f64)> = steps.iter().enumerate().map(|(k, s)| {
                acc += s;
                (k as f64, acc - steps[0])
            }).collect();
            let horizon = (samples.len() - 1) as f64;
            let clock = ClockV::tabulated(samples).unwrap();
            let mut times = vec![0.0];
            for j in &jumps { times.push(times.last().unwrap() + j); }
            let scale = horizon / times.last().unwrap();
            let mut times: Vec<f64> = times.iter().map(|t| t * scale).collect();
            *times.last_mut().unwrap() = horizon;
            let g = grid_1d(times.clone());
            let dv = v_increments(&g, &clock).unwrap();
            prop_assert!(dv.iter().all(|d| *d >= 0.0));
            let total: f64 = dv.iter().sum();
            let expected = clock.value(*times.last().unwrap()).unwrap() - clock.value(0.0).unwrap();
            prop_assert!((total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}
