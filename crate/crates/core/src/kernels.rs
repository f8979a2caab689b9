//! Gram matrices under the Gaussian kernel and ground-cost matrices.
//!
//! The kernel is always parameterized by its rate, `k(x, y) = exp(-gamma * |x - y|^2)`.
//! Bandwidth-style settings are translated at the boundary with [`KernelSpec::from_bandwidth`].

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    pub gamma: f64,
}

impl KernelSpec {
    pub fn gaussian(gamma: f64) -> Result<Self> {
        let spec = Self { family: KernelFamily::Gaussian, gamma };
        spec.validate()?;
        Ok(spec)
    }

    /// `gamma = 1 / (2 sigma^2)`.
    pub fn from_bandwidth(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        Self::gaussian(1.0 / (2.0 * sigma * sigma))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("kernel gamma must be finite and positive, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-self.gamma * sq_dist).exp(),
        }
    }
}

/// Median heuristic: `gamma = 1 / (2 median^2)` over the distinct pairwise distances of `points`.
/// Returns `None` when every pair coincides or fewer than two points are given.
pub fn median_heuristic_gamma(points: ArrayView2<f64>) -> Option<f64> {
    let sq = pairwise_sq_distances(points, points);
    let n = points.nrows();
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| sq[[i, j]].sqrt())
        .filter(|&v| v > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len().is_multiple_of(2) { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    Some(1.0 / (2.0 * median * median))
}

/// Squared Euclidean distances via `|x|^2 + |y|^2 - 2<x, y>`, clamped at zero.
pub fn pairwise_sq_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let na: Array1<f64> = a.map_axis(Axis(1), |r| r.dot(&r));
    let nb: Array1<f64> = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Kernel evaluations between two supports.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: Array2<f64>,
    /// Set when both supports are the same point set.
    pub symmetric: bool,
}

impl GramMatrix {
    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }
}

pub fn gram(a: &DiscreteMeasure, b: &DiscreteMeasure, k: &KernelSpec) -> Result<GramMatrix> {
    let symmetric = a.points() == b.points();
    gram_points(a.points().view(), b.points().view(), k).map(|entries| GramMatrix { entries, symmetric })
}

/// Gram matrix between raw point sets.
pub fn gram_points(a: ArrayView2<f64>, b: ArrayView2<f64>, k: &KernelSpec) -> Result<Array2<f64>> {
    k.validate()?;
    check_dims(a, b)?;
    let mut g = pairwise_sq_distances(a, b);
    g.mapv_inplace(|d| k.eval_sq_dist(d));
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroundCost {
    /// `|x - y|`, raised to the power `p`.
    #[default]
    Euclidean,
    /// `|x - y|^2` used directly as the cost; `p` is ignored.
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub ground: GroundCost,
    #[serde(default = "one")]
    pub p: f64,
}

fn one() -> f64 {
    1.0
}

impl CostSpec {
    pub fn euclidean(p: f64) -> Self {
        Self { ground: GroundCost::Euclidean, p }
    }

    pub fn squared_euclidean() -> Self {
        Self { ground: GroundCost::SquaredEuclidean, p: 1.0 }
    }

    /// Exponent applied to the ground metric: `p` for Euclidean, 1 for squared Euclidean.
    pub fn effective_p(&self) -> f64 {
        match self.ground {
            GroundCost::Euclidean => self.p,
            GroundCost::SquaredEuclidean => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::InvalidConfig(format!("cost exponent p must be >= 1, got {}", self.p)));
        }
        Ok(())
    }
}

/// Non-negative ground costs between two supports.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NonFiniteInput(format!("cost entry {bad}")));
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.entries.dim()
    }

    /// Divides by the largest entry; an all-zero matrix is returned as is.
    pub fn normalized_by_max(&self) -> Self {
        let max = self.entries.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            Self { entries: &self.entries / max }
        } else {
            self.clone()
        }
    }
}

pub fn cost_matrix(a: &DiscreteMeasure, b: &DiscreteMeasure, spec: &CostSpec) -> Result<CostMatrix> {
    cost_points(a.points().view(), b.points().view(), spec)
}

pub fn cost_points(a: ArrayView2<f64>, b: ArrayView2<f64>, spec: &CostSpec) -> Result<CostMatrix> {
    spec.validate()?;
    check_dims(a, b)?;
    let mut c = pairwise_sq_distances(a, b);
    match spec.ground {
        GroundCost::SquaredEuclidean => {}
        GroundCost::Euclidean => {
            let p = spec.p;
            c.mapv_inplace(|d2| if p == 2.0 { d2 } else { d2.sqrt().powf(p) });
        }
    }
    Ok(CostMatrix { entries: c })
}

fn check_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!("points of dimension {} vs {}", a.ncols(), b.ncols())));
    }
    Ok(())
}
