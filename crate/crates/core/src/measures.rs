//! Weighted point clouds, couplings between them, and coupling marginals.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (possibly un-normalized) empirical measure: `m` points in `d` dimensions
/// carrying non-negative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
    total_mass: f64,
}

impl DiscreteMeasure {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        check_points(&points)?;
        if weights.len() != points.nrows() {
            return Err(Error::DimensionMismatch(format!("{} weights for {} points", weights.len(), points.nrows())));
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteInput(format!("weight {index} is {value}")));
            }
            if value < 0.0 {
                return Err(Error::NegativeWeight { index, value });
            }
        }
        let total_mass = weights.sum();
        Ok(Self { points, weights, total_mass })
    }

    /// Spreads `total_mass` evenly over the given points.
    pub fn uniform(points: Array2<f64>, total_mass: f64) -> Result<Self> {
        if !total_mass.is_finite() {
            return Err(Error::NonFiniteInput(format!("total mass is {total_mass}")));
        }
        if total_mass < 0.0 {
            return Err(Error::NegativeMass(total_mass));
        }
        check_points(&points)?;
        let m = points.nrows();
        let weights = Array1::from_elem(m, total_mass / m as f64);
        let total_mass = weights.sum();
        Ok(Self { points, weights, total_mass })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    /// Cached sum of the weights.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Same support, weights rescaled to sum to one. Zero-mass measures are returned unchanged.
    pub fn normalized(&self) -> Self {
        if self.total_mass == 0.0 {
            return self.clone();
        }
        let weights = &self.weights / self.total_mass;
        let total_mass = weights.sum();
        Self { points: self.points.clone(), weights, total_mass }
    }

    /// Same support with new weights.
    pub fn with_weights(&self, weights: Array1<f64>) -> Result<Self> {
        Self::new(self.points.clone(), weights)
    }
}

fn check_points(points: &Array2<f64>) -> Result<()> {
    if points.nrows() == 0 {
        return Err(Error::Empty("measure has no points".into()));
    }
    if points.ncols() == 0 {
        return Err(Error::Empty("points have dimension 0".into()));
    }
    if let Some(bad) = points.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("coordinate {bad}")));
    }
    Ok(())
}

/// Stacks the supports of several measures (rows in input order, duplicates kept).
pub fn union_support(measures: &[&DiscreteMeasure]) -> Result<Array2<f64>> {
    let first = measures.first().ok_or_else(|| Error::Empty("no measures".into()))?;
    let d = first.dim();
    let views: Vec<ArrayView2<f64>> = measures
        .iter()
        .map(|m| {
            if m.dim() == d {
                Ok(m.points().view())
            } else {
                Err(Error::DimensionMismatch(format!("dimension {} vs {}", m.dim(), d)))
            }
        })
        .collect::<Result<_>>()?;
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Which feasible set a plan was optimized over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// `alpha >= 0` entrywise.
    #[default]
    NonNegative,
    /// `alpha >= 0` and the entries sum to one.
    Simplex,
}

/// A non-negative coupling matrix between a source support (rows) and a target support (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    alpha: Array2<f64>,
    mode: ConstraintMode,
}

impl TransportPlan {
    pub fn new(alpha: Array2<f64>, mode: ConstraintMode) -> Result<Self> {
        if let Some(bad) = alpha.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("plan entry {bad}")));
        }
        if let Some(bad) = alpha.iter().find(|&&v| v < 0.0) {
            return Err(Error::InfeasibleStart(format!("negative plan entry {bad}")));
        }
        if mode == ConstraintMode::Simplex && (alpha.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InfeasibleStart(format!("simplex plan has mass {}", alpha.sum())));
        }
        Ok(Self { alpha, mode })
    }

    pub fn alpha(&self) -> &Array2<f64> {
        &self.alpha
    }

    pub fn into_alpha(self) -> Array2<f64> {
        self.alpha
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    pub fn shape(&self) -> (usize, usize) {
        self.alpha.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.alpha.sum()
    }

    pub fn marginals(&self) -> Marginals {
        marginals(self)
    }
}

/// Row and column sums of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

pub fn marginals(plan: &TransportPlan) -> Marginals {
    Marginals { row_marginal: plan.alpha.sum_axis(Axis(1)), col_marginal: plan.alpha.sum_axis(Axis(0)) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn plan(a: Array2<f64>) -> TransportPlan {
        TransportPlan::new(a, ConstraintMode::NonNegative).unwrap()
    }

    #[test]
    fn zero_plan_has_zero_marginals() {
        let m = marginals(&plan(Array2::zeros((2, 2))));
        assert_eq!(m.row_marginal, array![0.0, 0.0]);
        assert_eq!(m.col_marginal, array![0.0, 0.0]);
    }

    #[test]
    fn identity_coupling_marginals() {
        let m = marginals(&plan(array![[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(m.row_marginal, array![1.0, 1.0]);
        assert_eq!(m.col_marginal, array![1.0, 1.0]);
    }

    #[test]
    fn hand_summed_marginals() {
        let m = marginals(&plan(array![[0.2, 0.3], [0.1, 0.4]]));
        approx::assert_abs_diff_eq!(m.row_marginal, array![0.5, 0.5], epsilon = 1e-15);
        approx::assert_abs_diff_eq!(m.col_marginal, array![0.3, 0.7], epsilon = 1e-15);
    }

    #[test]
    fn uniform_weights() {
        let mu = DiscreteMeasure::uniform(Array2::zeros((4, 1)), 1.0).unwrap();
        assert_eq!(mu.weights(), &array![0.25, 0.25, 0.25, 0.25]);

        let grid = Array2::from_shape_fn((100, 1), |(i, _)| i as f64);
        let nu = DiscreteMeasure::uniform(grid, 5.0).unwrap();
        assert!(nu.weights().iter().all(|&w| w == 0.05));
        assert!((nu.total_mass() - 5.0).abs() < 1e-12);

        let z = DiscreteMeasure::uniform(Array2::zeros((1, 3)), 0.0).unwrap();
        assert_eq!(z.weights(), &array![0.0]);
    }

    #[test]
    fn uniform_rejects_bad_mass_and_coordinates() {
        let pts = Array2::zeros((2, 1));
        assert!(matches!(DiscreteMeasure::uniform(pts.clone(), -1.0), Err(Error::NegativeMass(_))));
        assert!(matches!(DiscreteMeasure::uniform(pts, f64::NAN), Err(Error::NonFiniteInput(_))));
        let bad = array![[0.0], [f64::INFINITY]];
        assert!(matches!(DiscreteMeasure::uniform(bad, 1.0), Err(Error::NonFiniteInput(_))));
        assert!(matches!(DiscreteMeasure::uniform(Array2::zeros((0, 2)), 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn new_validates_weights() {
        let pts = Array2::zeros((2, 1));
        assert!(matches!(
            DiscreteMeasure::new(pts.clone(), array![1.0, -0.5]),
            Err(Error::NegativeWeight { index: 1, .. })
        ));
        assert!(matches!(DiscreteMeasure::new(pts, array![1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn simplex_plan_must_sum_to_one() {
        assert!(TransportPlan::new(array![[0.5, 0.6]], ConstraintMode::Simplex).is_err());
        assert!(TransportPlan::new(array![[0.5, 0.5]], ConstraintMode::Simplex).is_ok());
        assert!(TransportPlan::new(array![[-0.1]], ConstraintMode::NonNegative).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.0..10.0f64, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn marginals_are_linear(p in matrix(3, 4), q in matrix(3, 4), a in 0.0..5.0f64, b in 0.0..5.0f64) {
            let combo = marginals(&plan(&p * a + &q * b));
            let mp = marginals(&plan(p));
            let mq = marginals(&plan(q));
            let rows = &mp.row_marginal * a + &mq.row_marginal * b;
            let cols = &mp.col_marginal * a + &mq.col_marginal * b;
            for (x, y) in combo.row_marginal.iter().zip(rows.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
            for (x, y) in combo.col_marginal.iter().zip(cols.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn marginal_sums_agree(p in matrix(5, 3)) {
            let m = marginals(&plan(p.clone()));
            let total = p.sum();
            prop_assert!((m.row_marginal.sum() - total).abs() <= 1e-12 * total.max(1.0));
            prop_assert!((m.col_marginal.sum() - total).abs() <= 1e-12 * total.max(1.0));
        }
    }
}
