//! Synthetic measures and labeled samples used by the experiments and acceptance tests.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::class_ratio::LabeledDataset;
use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;

/// Discretized Gaussian on the grid `0, 1, ..., n - 1`: weights proportional to the
/// normal density at each grid point, scaled to `mass`.
pub fn gaussian_grid_measure(n: usize, mean: f64, std: f64, mass: f64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::Empty("no grid points".into()));
    }
    if !(std.is_finite() && std > 0.0 && mean.is_finite() && mass.is_finite() && mass > 0.0) {
        return Err(Error::InvalidConfig(format!("need finite mean, std > 0 and mass > 0, got {mean}, {std}, {mass}")));
    }
    let x = Array1::from_iter((0..n).map(|i| i as f64));
    let w = x.mapv(|v| (-(v - mean).powi(2) / (2.0 * std * std)).exp());
    let total = w.sum();
    if total <= 0.0 {
        return Err(Error::NumericalUnderflow(format!("density vanishes on the grid for mean {mean}, std {std}")));
    }
    let points = x.into_shape_with_order((n, 1)).expect("column of grid points");
    DiscreteMeasure::new(points, w * (mass / total))
}

/// The two-class layout of the class-ratio experiments: unit-covariance Gaussians in the
/// plane centered at the origin (class 0) and at `(separation, 0)` (class 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoGaussians {
    pub separation: f64,
}

impl Default for TwoGaussians {
    fn default() -> Self {
        Self { separation: 4.0 }
    }
}

impl TwoGaussians {
    /// `n` points, of which `round(ratio * n)` come from class 0, listed first.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize, ratio: f64) -> (Array2<f64>, Vec<usize>) {
        let first = ((ratio.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= first)).collect();
        let mut points = Array2::zeros((n, 2));
        for (i, &label) in labels.iter().enumerate() {
            let center = if label == 0 { 0.0 } else { self.separation };
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            points[[i, 0]] = center + dx;
            points[[i, 1]] = dy;
        }
        (points, labels)
    }

    /// A labeled training set and an unlabeled test sample drawn from one seed.
    pub fn ratio_instance(
        &self,
        seed: u64,
        train: (usize, f64),
        test: (usize, f64),
    ) -> Result<(LabeledDataset, Array2<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (points, labels) = self.sample(&mut rng, train.0, train.1);
        let (test_points, _) = self.sample(&mut rng, test.0, test.1);
        Ok((LabeledDataset::new(points, labels, 2)?, test_points))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_measure_mass_and_mode() {
        let m = gaussian_grid_measure(100, 20.0, 5.0, 1.0).unwrap();
        assert_eq!(m.len(), 100);
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        let w = m.weights();
        let argmax = (0..100).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap();
        assert_eq!(argmax, 20);
        assert!((w[15] - w[25]).abs() < 1e-15);
        let t = gaussian_grid_measure(100, 60.0, 10.0, 5.0).unwrap();
        assert!((t.total_mass() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn grid_measure_rejects_bad_input() {
        assert!(gaussian_grid_measure(0, 0.0, 1.0, 1.0).is_err());
        assert!(gaussian_grid_measure(10, 0.0, 0.0, 1.0).is_err());
        assert!(gaussian_grid_measure(10, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn two_gaussians_counts_and_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = TwoGaussians::default().sample(&mut rng, 2000, 0.3);
        assert_eq!(y.iter().filter(|&&l| l == 0).count(), 600);
        let mean = |class: usize, col: usize| {
            let idx: Vec<usize> = (0..2000).filter(|&i| y[i] == class).collect();
            idx.iter().map(|&i| x[[i, col]]).sum::<f64>() / idx.len() as f64
        };
        assert!(mean(0, 0).abs() < 0.15);
        assert!((mean(1, 0) - 4.0).abs() < 0.15);
        assert!(mean(1, 1).abs() < 0.15);
    }

    #[test]
    fn ratio_instance_is_seeded() {
        let g = TwoGaussians::default();
        let (a, ta) = g.ratio_instance(3, (20, 0.5), (10, 0.2)).unwrap();
        let (b, tb) = g.ratio_instance(3, (20, 0.5), (10, 0.2)).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(ta, tb);
        assert_eq!(a.class_counts(), &[10, 10]);
    }
}
