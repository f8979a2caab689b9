//! Squared-MMD regularized barycenters on the fixed concatenated support.
//!
//! Each input `s_i` gets a plan `alpha_i` from its own support to the union `Z` of all
//! input supports. The barycenter is never a free variable: it is recovered as
//! `beta = sum_j rho_j alpha_j' 1`, which turns the problem into a convex quadratic in
//! the plans alone.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::kernels::{cost_points, gram_points, CostSpec, KernelSpec};
use crate::measures::{union_support, ConstraintMode, DiscreteMeasure, TransportPlan};
use crate::optim::{minimize, FeasibleSet, Method, Objective, ObjectiveTrace, SolverConfig};

#[derive(Debug, Clone)]
pub struct BarycenterProblem {
    pub inputs: Vec<DiscreteMeasure>,
    pub rho: Array1<f64>,
    pub kernel: KernelSpec,
    pub cost: CostSpec,
    pub lambda1: f64,
    pub lambda2: f64,
    pub constraint: ConstraintMode,
    union: Array2<f64>,
    costs: Vec<Array2<f64>>,
    grams: Vec<Array2<f64>>,
    g_union: Array2<f64>,
}

impl BarycenterProblem {
    pub fn new(
        inputs: Vec<DiscreteMeasure>,
        rho: Array1<f64>,
        kernel: KernelSpec,
        cost: CostSpec,
        lambda1: f64,
        lambda2: f64,
        constraint: ConstraintMode,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("barycenter needs at least one input".into()));
        }
        if rho.len() != inputs.len() {
            return Err(Error::DimensionMismatch(format!("{} weights for {} inputs", rho.len(), inputs.len())));
        }
        if rho.iter().any(|r| !r.is_finite() || *r < 0.0) || (rho.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("rho must be non-negative and sum to 1, got {rho}")));
        }
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        kernel.validate()?;
        let refs: Vec<&DiscreteMeasure> = inputs.iter().collect();
        let union = union_support(&refs)?;
        let costs = inputs
            .iter()
            .map(|m| cost_points(m.points().view(), union.view(), &cost).map(|c| c.entries))
            .collect::<Result<_>>()?;
        let grams =
            inputs.iter().map(|m| gram_points(m.points().view(), m.points().view(), &kernel)).collect::<Result<_>>()?;
        let g_union = gram_points(union.view(), union.view(), &kernel)?;
        Ok(Self { inputs, rho, kernel, cost, lambda1, lambda2, constraint, union, costs, grams, g_union })
    }

    pub fn union_support(&self) -> &Array2<f64> {
        &self.union
    }

    /// Plan shapes `m_i x m`.
    pub fn plan_shapes(&self) -> Vec<(usize, usize)> {
        let m = self.union.nrows();
        self.inputs.iter().map(|s| (s.len(), m)).collect()
    }

    fn check_plans(&self, alphas: &[Array2<f64>]) -> Result<()> {
        if alphas.len() != self.inputs.len() {
            return Err(Error::DimensionMismatch(format!("{} plans for {} inputs", alphas.len(), self.inputs.len())));
        }
        for (a, shape) in alphas.iter().zip(self.plan_shapes()) {
            if a.dim() != shape {
                return Err(Error::DimensionMismatch(format!("plan is {:?}, expected {:?}", a.dim(), shape)));
            }
            if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("plan entry {bad}")));
            }
        }
        Ok(())
    }

    /// Objective value and per-plan gradients.
    pub fn objective_and_gradient(&self, alphas: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        self.check_plans(alphas)?;
        Ok(self.eval(alphas, true))
    }

    fn eval(&self, alphas: &[Array2<f64>], want_grad: bool) -> (f64, Vec<Array2<f64>>) {
        let beta = barycenter_weights(&self.rho, alphas);
        let g = &self.g_union;
        let errs: Vec<Array1<f64>> = alphas.iter().map(|a| a.sum_axis(Axis(0)) - &beta).collect();
        let g_errs: Vec<Array1<f64>> = errs.iter().map(|e| g.dot(e)).collect();
        let mut value = 0.0;
        let mut row_grads = Vec::with_capacity(alphas.len());
        for (i, a) in alphas.iter().enumerate() {
            let rho = self.rho[i];
            let r = a.sum_axis(Axis(1)) - self.inputs[i].weights();
            let gr = self.grams[i].dot(&r);
            value += rho
                * ((a * &self.costs[i]).sum()
                    + self.lambda1 * r.dot(&gr).max(0.0)
                    + self.lambda2 * errs[i].dot(&g_errs[i]).max(0.0));
            row_grads.push(gr * (2.0 * rho * self.lambda1));
        }
        if !want_grad {
            return (value, Vec::new());
        }
        // d/ds_j of sum_i rho_i e_i' G e_i with e_i = s_i - beta and beta = sum_j rho_j s_j.
        let weighted: Array1<f64> =
            g_errs.iter().zip(self.rho.iter()).fold(Array1::zeros(beta.len()), |acc, (ge, r)| acc + ge * *r);
        let grads = alphas
            .iter()
            .enumerate()
            .map(|(j, _)| {
                let rho = self.rho[j];
                let col = (&g_errs[j] - &weighted) * (2.0 * rho * self.lambda2);
                let mut grad = &self.costs[j] * rho;
                for ((i, k), v) in grad.indexed_iter_mut() {
                    *v += row_grads[j][i] + col[k];
                }
                grad
            })
            .collect();
        (value, grads)
    }

    /// Start plans: each input's weights spread uniformly over the union support
    /// (unit mass per plan in simplex mode), then the configured initialization.
    pub fn initial_plans(&self, cfg: &SolverConfig) -> Vec<Array2<f64>> {
        let m = self.union.nrows();
        let flat = self
            .inputs
            .iter()
            .map(|s| {
                let mass = s.total_mass();
                let w = match self.constraint {
                    ConstraintMode::Simplex if mass > 0.0 => s.weights() / mass,
                    ConstraintMode::Simplex => Array1::from_elem(s.len(), 1.0 / s.len() as f64),
                    ConstraintMode::NonNegative => s.weights().clone(),
                };
                let mut a = Array2::from_shape_fn((s.len(), m), |(i, _)| w[i] / m as f64);
                if cfg.method == Method::MirrorDescent {
                    let total = a.sum();
                    let uniform = total / a.len() as f64;
                    a.mapv_inplace(|v| 0.99 * v + 0.01 * uniform);
                }
                a
            })
            .collect::<Vec<_>>();
        let shapes = self.plan_shapes();
        let mut plans = unflatten(&cfg.initialize(flatten(&flat)), &shapes);
        if self.constraint == ConstraintMode::Simplex {
            for p in &mut plans {
                let s = p.sum();
                *p /= s;
            }
        }
        plans
    }
}

/// `beta = sum_j rho_j alpha_j' 1`.
pub fn barycenter_weights(rho: &Array1<f64>, alphas: &[Array2<f64>]) -> Array1<f64> {
    let m = alphas.first().map_or(0, |a| a.ncols());
    alphas.iter().zip(rho.iter()).fold(Array1::zeros(m), |acc, (a, r)| acc + a.sum_axis(Axis(0)) * *r)
}

fn flatten(alphas: &[Array2<f64>]) -> Array1<f64> {
    alphas.iter().flat_map(|a| a.iter().copied()).collect()
}

fn unflatten(x: &Array1<f64>, shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
    let mut start = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let block = x.slice(s![start..start + r * c]).to_owned();
            start += r * c;
            block.into_shape_with_order((r, c)).expect("block length matches shape")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BarycenterResult {
    pub plans: Vec<TransportPlan>,
    pub barycenter_weights: Array1<f64>,
    pub union_support: Array2<f64>,
    pub objective_trace: ObjectiveTrace,
}

impl BarycenterResult {
    /// The barycenter as a measure on the union support.
    pub fn measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.union_support.clone(), self.barycenter_weights.mapv(|v| v.max(0.0)))
    }
}

struct Flat<'a> {
    problem: &'a BarycenterProblem,
    shapes: Vec<(usize, usize)>,
}

impl Objective for Flat<'_> {
    fn value(&mut self, x: &Array1<f64>) -> f64 {
        self.problem.eval(&unflatten(x, &self.shapes), false).0
    }

    fn value_and_gradient(&mut self, x: &Array1<f64>) -> (f64, Array1<f64>) {
        let (v, g) = self.problem.eval(&unflatten(x, &self.shapes), true);
        (v, flatten(&g))
    }
}

pub fn solve_barycenter(problem: &BarycenterProblem, cfg: &SolverConfig) -> Result<BarycenterResult> {
    solve_barycenter_observed(problem, cfg, &mut |_, _, _| {})
}

/// Receives the plans, the barycenter weights and the objective value.
pub type BarycenterObserver<'a> = &'a mut dyn FnMut(&[Array2<f64>], &Array1<f64>, f64);

/// As [`solve_barycenter`], calling `observer(plans, beta, value)` at every accepted iterate.
pub fn solve_barycenter_observed(
    problem: &BarycenterProblem,
    cfg: &SolverConfig,
    observer: BarycenterObserver<'_>,
) -> Result<BarycenterResult> {
    let shapes = problem.plan_shapes();
    let set = match problem.constraint {
        ConstraintMode::NonNegative => FeasibleSet::NonNegative,
        ConstraintMode::Simplex => {
            FeasibleSet::Simplex { blocks: shapes.iter().map(|(r, c)| r * c).collect(), total: 1.0 }
        }
    };
    let x0 = flatten(&problem.initial_plans(cfg));
    let mut obj = Flat { problem, shapes: shapes.clone() };
    let mut wrap = |x: &Array1<f64>, v: f64| {
        let plans = unflatten(x, &shapes);
        let beta = barycenter_weights(&problem.rho, &plans);
        observer(&plans, &beta, v);
    };
    let (x, trace) = minimize(&mut obj, x0, &set, cfg, Some(&mut wrap))?;
    let alphas = unflatten(&x, &shapes);
    let barycenter_weights = barycenter_weights(&problem.rho, &alphas);
    let plans = alphas
        .into_iter()
        .map(|a| {
            let a = if problem.constraint == ConstraintMode::Simplex { a.clone() / a.sum() } else { a };
            TransportPlan::new(a, problem.constraint)
        })
        .collect::<Result<_>>()?;
    Ok(BarycenterResult { plans, barycenter_weights, union_support: problem.union.clone(), objective_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::mmd_squared;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut ChaCha8Rng, m: usize) -> DiscreteMeasure {
        let pts = Array2::from_shape_fn((m, 2), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(m, |_| rng.random_range(0.2..1.0));
        DiscreteMeasure::new(pts, w).unwrap()
    }

    fn problem(inputs: Vec<DiscreteMeasure>, rho: Array1<f64>, lambda: f64) -> BarycenterProblem {
        BarycenterProblem::new(
            inputs,
            rho,
            KernelSpec::gaussian(1.0).unwrap(),
            CostSpec::squared_euclidean(),
            lambda,
            lambda,
            ConstraintMode::NonNegative,
        )
        .unwrap()
    }

    fn mmd_to_union(result: &BarycenterResult, p: &BarycenterProblem, input: &DiscreteMeasure) -> f64 {
        let k = &p.kernel;
        let z = &result.union_support;
        let x = input.points();
        let gzz = gram_points(z.view(), z.view(), k).unwrap();
        let gxx = gram_points(x.view(), x.view(), k).unwrap();
        let gzx = gram_points(z.view(), x.view(), k).unwrap();
        mmd_squared(result.barycenter_weights.view(), input.weights().view(), gzz.view(), gxx.view(), gzx.view())
            .unwrap()
            .value
    }

    #[test]
    fn single_input_has_no_coupling_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_measure(&mut rng, 3);
        let p = problem(vec![a.clone()], array![1.0], 2.0);
        let alpha = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.0..1.0));
        let (v, _) = p.objective_and_gradient(std::slice::from_ref(&alpha)).unwrap();
        let r = alpha.sum_axis(Axis(1)) - a.weights();
        let expected = (&alpha * &p.costs[0]).sum() + 2.0 * r.dot(&p.grams[0].dot(&r));
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_singletons_with_symmetric_plans() {
        let x = DiscreteMeasure::uniform(array![[0.5]], 1.0).unwrap();
        let p = problem(vec![x.clone(), x], array![0.5, 0.5], 1.0);
        let alpha = array![[0.3, 0.6]];
        let (v, _) = p.objective_and_gradient(&[alpha.clone(), alpha.clone()]).unwrap();
        let r = alpha.sum() - 1.0;
        // Points coincide, so the cost is zero and the coupling term cancels.
        assert!((v - r * r).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let k = rng.random_range(1..=3);
            let inputs: Vec<_> = (0..k)
                .map(|_| {
                    let m = rng.random_range(1..=3);
                    random_measure(&mut rng, m)
                })
                .collect();
            let raw = Array1::from_shape_fn(k, |_| rng.random_range(0.1..1.0));
            let rho = &raw / raw.sum();
            let rho = {
                // Exact unit sum so the constructor's 1e-12 check always passes.
                let mut r = rho;
                let rest: f64 = r.slice(s![1..]).sum();
                r[0] = 1.0 - rest;
                r
            };
            let p = problem(inputs, rho, rng.random_range(0.5..3.0));
            let alphas: Vec<Array2<f64>> =
                p.plan_shapes().iter().map(|&sh| Array2::from_shape_fn(sh, |_| rng.random_range(0.0..1.0))).collect();
            let (_, grads) = p.objective_and_gradient(&alphas).unwrap();
            let h = 1e-6;
            for (b, g) in grads.iter().enumerate() {
                for ((i, j), gv) in g.indexed_iter() {
                    let mut up = alphas.clone();
                    up[b][[i, j]] += h;
                    let mut dn = alphas.clone();
                    dn[b][[i, j]] -= h;
                    let fd = (p.objective_and_gradient(&up).unwrap().0 - p.objective_and_gradient(&dn).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - gv).abs() <= 1e-5 * gv.abs().max(1.0), "fd {fd} vs {gv}");
                }
            }
        }
    }

    #[test]
    fn permuting_inputs_keeps_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_measure(&mut rng, 2);
        let b = random_measure(&mut rng, 3);
        let p1 = problem(vec![a.clone(), b.clone()], array![0.3, 0.7], 1.5);
        let p2 = problem(vec![b, a], array![0.7, 0.3], 1.5);
        // Plans on the union in p1 order (a points then b points); reorder columns for p2.
        let alpha_a = Array2::from_shape_fn((2, 5), |_| rng.random_range(0.0..1.0));
        let alpha_b = Array2::from_shape_fn((3, 5), |_| rng.random_range(0.0..1.0));
        let perm = [2, 3, 4, 0, 1];
        let reorder = |m: &Array2<f64>| Array2::from_shape_fn(m.dim(), |(i, j)| m[[i, perm[j]]]);
        let v1 = p1.objective_and_gradient(&[alpha_a.clone(), alpha_b.clone()]).unwrap().0;
        let v2 = p2.objective_and_gradient(&[reorder(&alpha_b), reorder(&alpha_a)]).unwrap().0;
        assert!((v1 - v2).abs() < 1e-10);
    }

    #[test]
    fn convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = problem(vec![random_measure(&mut rng, 2), random_measure(&mut rng, 3)], array![0.4, 0.6], 2.0);
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Array2<f64>> {
                p.plan_shapes().iter().map(|&sh| Array2::from_shape_fn(sh, |_| rng.random_range(0.0..1.0))).collect()
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let t = rng.random_range(0.0..1.0);
            let mid: Vec<_> = a.iter().zip(&b).map(|(x, y)| x * t + y * (1.0 - t)).collect();
            let f = |x: &[Array2<f64>]| p.objective_and_gradient(x).unwrap().0;
            assert!(f(&mid) <= t * f(&a) + (1.0 - t) * f(&b) + 1e-9);
        }
    }

    fn tight() -> SolverConfig {
        SolverConfig { rel_tol: 1e-13, max_iters: 100_000, patience: 10, ..Default::default() }
    }

    #[test]
    fn identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_measure(&mut rng, 3);
        let p = problem(vec![a.clone(), a.clone()], array![0.5, 0.5], 1e3);
        let mut identity_gap = 0.0f64;
        let r = solve_barycenter_observed(&p, &tight(), &mut |plans, beta, _| {
            let rebuilt = plans[0].sum_axis(Axis(0)) * 0.5 + plans[1].sum_axis(Axis(0)) * 0.5;
            identity_gap = identity_gap.max((&rebuilt - beta).iter().fold(0.0, |m, v| m.max(v.abs())));
        })
        .unwrap();
        assert!(identity_gap <= 1e-12);
        assert!(mmd_to_union(&r, &p, &a) < 1e-3);
        assert!(r.objective_trace.is_non_increasing());
    }

    #[test]
    fn one_sided_weights_recover_first_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_measure(&mut rng, 3);
        let b = random_measure(&mut rng, 2);
        let p = problem(vec![a.clone(), b], array![1.0, 0.0], 1e3);
        let r = solve_barycenter(&p, &tight()).unwrap();
        assert!(mmd_to_union(&r, &p, &a) < 1e-3);
    }

    #[test]
    fn simplex_mode_keeps_unit_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for method in [Method::MirrorDescent, Method::AcceleratedPgd] {
            let mut p = problem(vec![random_measure(&mut rng, 2), random_measure(&mut rng, 2)], array![0.5, 0.5], 1.0);
            p.constraint = ConstraintMode::Simplex;
            let mut worst = 0.0f64;
            let r =
                solve_barycenter_observed(&p, &SolverConfig { method, ..Default::default() }, &mut |plans, _, _| {
                    for a in plans {
                        worst = worst.max((a.sum() - 1.0).abs());
                    }
                })
                .unwrap();
            assert!(worst <= 1e-9);
            for plan in &r.plans {
                assert!((plan.total_mass() - 1.0).abs() <= 1e-9);
            }
        }
    }

    /// Objective for two Diracs at 0 and 2 with union {0, 2}, written out by hand.
    fn two_dirac_value(a: [f64; 2], b: [f64; 2], lambda: f64, gamma: f64) -> f64 {
        let k = (-gamma * 4.0f64).exp();
        let g = |u: [f64; 2]| u[0] * u[0] + u[1] * u[1] + 2.0 * k * u[0] * u[1];
        let beta = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let term = |plan: [f64; 2], own_cost: [f64; 2]| {
            let r = plan[0] + plan[1] - 1.0;
            own_cost[0] * plan[0]
                + own_cost[1] * plan[1]
                + lambda * r * r
                + lambda * g([plan[0] - beta[0], plan[1] - beta[1]])
        };
        0.5 * term(a, [0.0, 4.0]) + 0.5 * term(b, [4.0, 0.0])
    }

    /// Grid search over the four plan entries, zooming around the best cell.
    fn grid_oracle(lambda: f64, gamma: f64) -> f64 {
        let mut center = [0.75; 4];
        let mut half = 0.75;
        let mut best = f64::INFINITY;
        while half > 1e-4 {
            let n = 12;
            let step = 2.0 * half / n as f64;
            let mut arg = center;
            for i0 in 0..=n {
                for i1 in 0..=n {
                    for i2 in 0..=n {
                        for i3 in 0..=n {
                            let v: Vec<f64> = [i0, i1, i2, i3]
                                .iter()
                                .zip(center)
                                .map(|(&i, c)| (c - half + i as f64 * step).max(0.0))
                                .collect();
                            let f = two_dirac_value([v[0], v[1]], [v[2], v[3]], lambda, gamma);
                            if f < best {
                                best = f;
                                arg = [v[0], v[1], v[2], v[3]];
                            }
                        }
                    }
                }
            }
            center = arg;
            half *= 0.3;
        }
        best
    }

    #[test]
    fn two_diracs_match_grid_oracle() {
        let (lambda, gamma) = (1.0, 0.5);
        let d0 = DiscreteMeasure::uniform(array![[0.0]], 1.0).unwrap();
        let d2 = DiscreteMeasure::uniform(array![[2.0]], 1.0).unwrap();
        let p = BarycenterProblem::new(
            vec![d0, d2],
            array![0.5, 0.5],
            KernelSpec::gaussian(gamma).unwrap(),
            CostSpec::squared_euclidean(),
            lambda,
            lambda,
            ConstraintMode::NonNegative,
        )
        .unwrap();
        let r = solve_barycenter(&p, &tight()).unwrap();
        let a = r.plans[0].alpha();
        let b = r.plans[1].alpha();
        let solved = two_dirac_value([a[[0, 0]], a[[0, 1]]], [b[[0, 0]], b[[0, 1]]], lambda, gamma);
        let oracle = grid_oracle(lambda, gamma);
        assert!(solved <= oracle + 1e-6, "solver {solved} vs grid {oracle}");
        assert!((solved - oracle).abs() < 1e-3, "solver {solved} vs grid {oracle}");
        let (v, _) = p.objective_and_gradient(&[a.clone(), b.clone()]).unwrap();
        assert!((v - solved).abs() < 1e-12);
        // By symmetry the barycenter splits its mass evenly.
        assert!((r.barycenter_weights[0] - r.barycenter_weights[1]).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_rho() {
        let x = DiscreteMeasure::uniform(array![[0.0]], 1.0).unwrap();
        let mk = |rho| {
            BarycenterProblem::new(
                vec![x.clone(), x.clone()],
                rho,
                KernelSpec::gaussian(1.0).unwrap(),
                CostSpec::squared_euclidean(),
                1.0,
                1.0,
                ConstraintMode::NonNegative,
            )
        };
        assert!(mk(array![0.5, 0.6]).is_err());
        assert!(mk(array![1.5, -0.5]).is_err());
        assert!(mk(array![1.0]).is_err());
    }
}
