//! Scalar fields on a space-time grid.

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;

/// Values of a function on every (grid time, space node) pair.
///
/// Off-node evaluation is multilinear in space at a fixed grid time; points
/// outside the box are clamped to the nearest boundary node. There is no
/// interpolation in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: SpaceTimeGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &SpaceTimeGrid, c: f64) -> Self {
        ScalarField {
            grid: grid.clone(),
            values: vec![c; grid.times().len() * grid.node_count()],
        }
    }

    /// Values laid out time-major: `values[i * node_count + node]`.
    pub fn from_values(grid: &SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.times().len() * grid.node_count() {
            return Err(Error::Input(format!(
                "field: expected {} values, got {}",
                grid.times().len() * grid.node_count(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("field: non-finite value at flat index {k}")));
        }
        Ok(ScalarField {
            grid: grid.clone(),
            values,
        })
    }

    /// Samples `f(t, x)` at every grid node.
    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn(f64, &[f64]) -> f64) -> Result<Self> {
        let nodes = grid.node_count();
        let mut x = vec![0.0; grid.dimension()];
        let mut values = Vec::with_capacity(grid.times().len() * nodes);
        for &t in grid.times() {
            for n in 0..nodes {
                grid.node_into(n, &mut x);
                values.push(f(t, &x));
            }
        }
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, time_index: usize, node: usize) -> f64 {
        self.values[time_index * self.grid.node_count() + node]
    }

    pub fn row(&self, time_index: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.values[time_index * n..(time_index + 1) * n]
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScalarField> {
        Self::from_values(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Checked evaluation at an arbitrary point.
    pub fn interpolate(&self, time_index: usize, x: &[f64]) -> Result<f64> {
        if time_index >= self.grid.times().len() {
            return Err(Error::Input(format!("field: time index {time_index} out of range")));
        }
        if x.len() != self.grid.dimension() {
            return Err(Error::Input(format!(
                "field: point has dimension {}, grid has {}",
                x.len(),
                self.grid.dimension()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("field: non-finite evaluation point".into()));
        }
        Ok(self.value_at(time_index, x))
    }

    /// Evaluation without argument checks, for inner loops over finite paths.
    #[inline]
    pub fn value_at(&self, time_index: usize, x: &[f64]) -> f64 {
        let row = self.row(time_index);
        let g = &self.grid;
        if x.len() == 1 {
            let (k, w) = locate(x[0], g.space_min()[0], g.spacing(0), g.space_nodes()[0]);
            return row[k] * (1.0 - w) + row[k + 1] * w;
        }
        let d = x.len();
        let mut base = 0usize;
        let mut stride = 1usize;
        let mut strides = [0usize; 8];
        let mut weights = [0.0f64; 8];
        assert!(d <= 8, "multilinear interpolation supports at most 8 dimensions");
        for axis in 0..d {
            let n = g.space_nodes()[axis];
            let (k, w) = locate(x[axis], g.space_min()[axis], g.spacing(axis), n);
            base += k * stride;
            strides[axis] = stride;
            weights[axis] = w;
            stride *= n;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut idx = base;
            let mut w = 1.0;
            for axis in 0..d {
                if corner & (1 << axis) != 0 {
                    idx += strides[axis];
                    w *= weights[axis];
                } else {
                    w *= 1.0 - weights[axis];
                }
            }
            if w != 0.0 {
                acc += w * row[idx];
            }
        }
        acc
    }
}

/// Cell index and fractional position along one axis, clamped to the box.
#[inline]
fn locate(x: f64, min: f64, h: f64, n: usize) -> (usize, f64) {
    let pos = ((x - min) / h).clamp(0.0, (n - 1) as f64);
    let k = (pos.floor() as usize).min(n - 2);
    (k, pos - k as f64)
}

/// Sup-norm distance over all grid nodes.
pub fn field_distance(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Input("field_distance: grids differ".into()));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_1d(nodes: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::uniform(1.0, 2, vec![-1.0], vec![1.0], vec![nodes]).unwrap()
    }

    #[test]
    fn constant_field() {
        let f = ScalarField::constant(&grid_1d(5), 3.5);
        assert_eq!(f.interpolate(1, &[0.123]).unwrap(), 3.5);
        assert_eq!(f.interpolate(0, &[-7.0]).unwrap(), 3.5);
    }

    #[test]
    fn linear_between_nodes_and_clamped_outside() {
        let f = ScalarField::from_fn(&grid_1d(3), |_, x| x[0] * x[0]).unwrap();
        assert_eq!(f.interpolate(0, &[0.5]).unwrap(), 0.5);
        assert_eq!(f.interpolate(0, &[10.0]).unwrap(), 1.0);
        assert_eq!(f.interpolate(0, &[-10.0]).unwrap(), 1.0);
        assert_eq!(f.interpolate(0, &[1.0]).unwrap(), 1.0);
        assert!(f.interpolate(0, &[f64::NAN]).is_err());
        assert!(f.interpolate(5, &[0.0]).is_err());
    }

    #[test]
    fn bilinear_is_exact_for_bilinear_functions() {
        let g = SpaceTimeGrid::uniform(1.0, 1, vec![0.0, -1.0], vec![2.0, 1.0], vec![5, 4]).unwrap();
        let f = ScalarField::from_fn(&g, |t, x| 1.0 + t + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]).unwrap();
        for &(a, b) in &[(0.3, 0.2), (1.7, -0.9), (0.0, 1.0), (1.25, 0.1)] {
            let v = f.interpolate(1, &[a, b]).unwrap();
            let exact = 2.0 + 2.0 * a - b + 0.5 * a * b;
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
    }

    #[test]
    fn distances() {
        let g = grid_1d(3);
        let a = ScalarField::from_fn(&g, |_, x| x[0]).unwrap();
        let b = ScalarField::from_fn(&g, |_, x| 2.0 * x[0]).unwrap();
        assert_eq!(field_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(field_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(
            field_distance(&ScalarField::constant(&g, 1.0), &ScalarField::zeros(&g)).unwrap(),
            1.0
        );
        assert!(field_distance(&a, &ScalarField::zeros(&grid_1d(4))).is_err());
    }

    proptest! {
        #[test]
        fn exact_at_nodes_and_monotone_between(values in proptest::collection::vec(-10.0f64..10.0, 15), s in 0.0f64..1.0) {
            let g = grid_1d(5);
            let f = ScalarField::from_values(&g, values).unwrap();
            for i in 0..3 {
                for n in 0..5 {
                    prop_assert_eq!(f.interpolate(i, &g.node(n)).unwrap(), f.at(i, n));
                }
                for n in 0..4 {
                    let (a, b) = (g.node(n)[0], g.node(n + 1)[0]);
                    let v = f.interpolate(i, &[a + s * (b - a)]).unwrap();
                    let (lo, hi) = (f.at(i, n).min(f.at(i, n + 1)), f.at(i, n).max(f.at(i, n + 1)));
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn distance_is_a_metric(
            a in proptest::collection::vec(-5.0f64..5.0, 15),
            b in proptest::collection::vec(-5.0f64..5.0, 15),
            c in proptest::collection::vec(-5.0f64..5.0, 15),
        ) {
            let g = grid_1d(5);
            let (a, b, c) = (
                ScalarField::from_values(&g, a).unwrap(),
                ScalarField::from_values(&g, b).unwrap(),
                ScalarField::from_values(&g, c).unwrap(),
            );
            let ab = field_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, field_distance(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!(field_distance(&a, &c).unwrap() <= ab + field_distance(&b, &c).unwrap() + 1e-12);
        }
    }
}
