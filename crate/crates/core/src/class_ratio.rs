//! Class-ratio estimation by distribution matching through a transport plan.
//!
//! A labeled training set with `n_j` points in class `j` and a ratio `theta` on the simplex
//! define the reweighting `z_i(theta) = theta_{y_i} / n_{y_i}` of the training points. The
//! estimators look for the `theta` whose reweighted training sample is cheapest to transport
//! onto the uniform test sample, alternating between the plan (with `theta` fixed) and
//! `theta` (with the plan fixed). Each half-step decreases the joint objective.

use ndarray::{s, Array1, Array2, Axis};

use crate::discrepancy::kl_divergence;
use crate::error::{Error, Result};
use crate::kernels::{cost_points, CostMatrix, CostSpec, KernelSpec};
use crate::kl_uot::{solve_kl_uot, KlUotProblem};
use crate::measures::{ConstraintMode, DiscreteMeasure};
use crate::optim::{mirror_descent_simplex, ObjectiveTrace, SolverConfig};
use crate::uot::{self, MmdPower, Parameterization, SolveReport, UotParams, UotProblem};

/// Training points with class labels `0..c`; every class must occur.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    points: Array2<f64>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(points: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if points.nrows() == 0 || num_classes == 0 {
            return Err(Error::Empty("no points".into()));
        }
        if labels.len() != points.nrows() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} points", labels.len(), points.nrows())));
        }
        if let Some(bad) = points.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("point coordinate {bad}")));
        }
        let mut class_counts = vec![0; num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::InvalidConfig(format!("label {label} of point {i} is not below {num_classes}")));
            }
            class_counts[label] += 1;
        }
        if let Some(class) = class_counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Self { points, labels, class_counts })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `M` with `z(theta) = M theta`: `M[i, y_i] = 1 / n_{y_i}`.
    fn membership(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.num_classes()));
        for (i, &y) in self.labels.iter().enumerate() {
            m[[i, y]] = 1.0 / self.class_counts[y] as f64;
        }
        m
    }
}

/// A point of the probability simplex over the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatio {
    theta: Array1<f64>,
}

impl ClassRatio {
    pub fn new(theta: Array1<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Empty("no points".into()));
        }
        if let Some(index) = theta.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NegativeWeight { index, value: theta[index] });
        }
        if (theta.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("class ratio sums to {}", theta.sum())));
        }
        Ok(Self { theta })
    }

    pub fn uniform(classes: usize) -> Self {
        Self { theta: Array1::from_elem(classes, 1.0 / classes as f64) }
    }

    pub fn theta(&self) -> &Array1<f64> {
        &self.theta
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.theta
    }
}

/// `z_i = theta[y_i] / n[y_i]`; sums to one.
pub fn z_vector(theta: &ClassRatio, data: &LabeledDataset) -> Result<Array1<f64>> {
    if theta.theta.len() != data.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "ratio over {} classes, data has {}",
            theta.theta.len(),
            data.num_classes()
        )));
    }
    Ok(Array1::from_iter(data.labels.iter().map(|&y| theta.theta[y] / data.class_counts[y] as f64)))
}

/// Controls of the alternating scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioConfig {
    /// Plan step of the MMD estimator.
    pub solver: SolverConfig,
    pub max_rounds: usize,
    /// Stop when `theta` moves less than this in the max norm.
    pub theta_tol: f64,
    /// Accuracy target of the mirror-descent `theta` step. The objective is quadratic near its
    /// minimum, so the step runs until the relative decrease falls below the square of this.
    pub theta_step_tol: f64,
    /// Lower bound applied to `z(theta)` in the KL estimator; `0` disables it.
    pub z_floor: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    /// Scale the cost to a maximum of 1 inside the KL plan step.
    pub normalize_cost: bool,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            max_rounds: 100,
            theta_tol: 1e-6,
            theta_step_tol: 1e-9,
            z_floor: 1e-12,
            sinkhorn_max_iters: 20_000,
            sinkhorn_tol: 1e-9,
            normalize_cost: false,
        }
    }
}

impl RatioConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.max_rounds == 0 || !(self.theta_tol > 0.0) || !(self.theta_step_tol > 0.0) {
            return Err(Error::InvalidConfig("max_rounds, theta_tol and theta_step_tol must be positive".into()));
        }
        if !(self.z_floor >= 0.0 && self.z_floor < 1.0) {
            return Err(Error::InvalidConfig(format!("z_floor must lie in [0, 1), got {}", self.z_floor)));
        }
        if self.sinkhorn_max_iters == 0 || !(self.sinkhorn_tol > 0.0) {
            return Err(Error::InvalidConfig("sinkhorn_max_iters and sinkhorn_tol must be positive".into()));
        }
        Ok(())
    }

    fn theta_solver(&self) -> SolverConfig {
        SolverConfig {
            max_iters: 5_000,
            rel_tol: self.theta_step_tol * self.theta_step_tol,
            patience: 3,
            ..SolverConfig::default()
        }
    }
}

/// Minimizes `f` over the simplex from a point near `start`, returning `start` unless the
/// result is no worse. `f` returns the value and the gradient.
fn theta_step<F>(mut f: F, start: &Array1<f64>, cfg: &RatioConfig) -> Result<Array1<f64>>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let c = start.len();
    let base = f(start).0;
    // Mirror descent cannot revive a coordinate that has reached zero, so start slightly inside.
    let x0 = start.mapv(|v| (1.0 - 1e-3) * v + 1e-3 / c as f64);
    let scale = f(&x0).0.abs().max(f64::MIN_POSITIVE);
    let scaled = |x: &Array1<f64>| {
        let (v, g) = f(x);
        // The component of the gradient along the all-ones direction does not move the
        // iterate; removing it lets the step length grow as the optimum is approached.
        let centre = x.dot(&g);
        (v / scale, g.mapv(|gi| (gi - centre) / scale))
    };
    let (theta, _) = mirror_descent_simplex(scaled, x0, &cfg.theta_solver())?;
    let theta = &theta / theta.sum();
    Ok(if f(&theta).0 <= base { theta } else { start.clone() })
}

fn pad(z: &Array1<f64>, len: usize) -> Array1<f64> {
    let mut out = Array1::zeros(len);
    out.slice_mut(s![..z.len()]).assign(z);
    out
}

fn check_inputs(train: &LabeledDataset, test_points: &Array2<f64>, lambdas: (f64, f64)) -> Result<()> {
    if test_points.nrows() == 0 {
        return Err(Error::Empty("no points".into()));
    }
    if test_points.ncols() != train.points.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "training points are {}-D, test points {}-D",
            train.points.ncols(),
            test_points.ncols()
        )));
    }
    for (name, v) in [("lambda1", lambdas.0), ("lambda2", lambdas.1)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidConfig(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    Ok(())
}

fn max_change(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Squared-MMD estimator. The plan lives on the simplex of `m1 x m2` matrices (standard)
/// or of square matrices over training and test points together (flexible). The report's
/// trace holds the joint objective after each round.
pub fn estimate_ratio_mmd(
    train: &LabeledDataset,
    test_points: &Array2<f64>,
    kernel: &KernelSpec,
    cost: &CostSpec,
    lambdas: (f64, f64),
    cfg: &RatioConfig,
    parameterization: Parameterization,
) -> Result<(ClassRatio, SolveReport)> {
    cfg.validate()?;
    check_inputs(train, test_points, lambdas)?;
    let c = train.num_classes();
    let target = DiscreteMeasure::uniform(test_points.clone(), 1.0)?;
    let params = UotParams {
        lambda1: lambdas.0,
        lambda2: lambdas.1,
        q: MmdPower::Two,
        constraint: ConstraintMode::Simplex,
        parameterization,
        ..Default::default()
    };
    let build = |theta: &ClassRatio| -> Result<UotProblem> {
        let source = DiscreteMeasure::new(train.points.clone(), z_vector(theta, train)?)?;
        UotProblem::with_cost_spec(source, target.clone(), cost, *kernel, params)
    };

    let mut ratio = ClassRatio::uniform(c);
    let problem = build(&ratio)?;
    let mut ot = problem.penalized().clone();
    let rows = ot.shape().0;
    let membership = train.membership();
    let m = Array2::from_shape_fn((rows, c), |(i, j)| if i < train.len() { membership[[i, j]] } else { 0.0 });
    // Quadratic form of the theta step: |r - M theta|_G^2 = theta'A theta - 2 theta'G'M'r + r'G r.
    let gm = ot.g_row.dot(&m);
    let a = m.t().dot(&gm);

    let mut alpha = problem.initial_plan(&cfg.solver);
    let mut trace = ObjectiveTrace { values: vec![ot.value(alpha.view(), 0.0)], ..Default::default() };
    for round in 1..=cfg.max_rounds {
        trace.iterations_used = round;
        let (next, _) = uot::minimize_plan(&ot, alpha, ConstraintMode::Simplex, &cfg.solver, None)?;
        alpha = &next / next.sum();
        if c == 1 {
            trace.values.push(ot.value(alpha.view(), 0.0));
            trace.converged = true;
            break;
        }

        let r = alpha.sum_axis(Axis(1));
        let gr = ot.g_row.dot(&r);
        let b = gm.t().dot(&r);
        let rgr = r.dot(&gr);
        let lambda1 = ot.lambda1;
        let f = |theta: &Array1<f64>| {
            let at = a.dot(theta);
            let value = lambda1 * (theta.dot(&at) - 2.0 * theta.dot(&b) + rgr).max(0.0);
            (value, (&at - &b) * (2.0 * lambda1))
        };
        let theta = theta_step(f, ratio.theta(), cfg)?;
        let change = max_change(&theta, ratio.theta());
        ratio = ClassRatio { theta };
        ot.row_target = pad(&z_vector(&ratio, train)?, rows);
        trace.values.push(ot.value(alpha.view(), 0.0));
        log::debug!("mmd ratio round {round}: theta {:?}, change {change:.3e}", ratio.theta.to_vec());
        if change < cfg.theta_tol {
            trace.converged = true;
            break;
        }
    }
    let report = uot::report(&build(&ratio)?, alpha, trace)?;
    Ok((ratio, report))
}

/// `sum_i r_i ln(r_i / z_i) - r_i + z_i` with `z` floored, and its gradient in `theta`.
fn kl_theta_objective<'a>(
    r: &Array1<f64>,
    train: &'a LabeledDataset,
    floor: f64,
    lambda1: f64,
) -> impl Fn(&Array1<f64>) -> (f64, Array1<f64>) + 'a {
    let r = r.clone();
    move |theta: &Array1<f64>| {
        let mut value = 0.0;
        let mut grad = Array1::zeros(theta.len());
        for (i, &y) in train.labels.iter().enumerate() {
            let n = train.class_counts[y] as f64;
            let raw = theta[y] / n;
            let z = raw.max(floor);
            if r[i] > 0.0 {
                if z == 0.0 {
                    return (f64::INFINITY, grad);
                }
                value += r[i] * (r[i] / z).ln() - r[i] + z;
                if raw >= floor {
                    grad[y] += (1.0 - r[i] / z) / n;
                }
            } else {
                value += z;
                if raw >= floor {
                    grad[y] += 1.0 / n;
                }
            }
        }
        (lambda1 * value, grad * lambda1)
    }
}

fn kl_plan_step(
    train: &LabeledDataset,
    ratio: &ClassRatio,
    target: &DiscreteMeasure,
    cost: &CostMatrix,
    lambdas: (f64, f64),
    epsilon: f64,
    cfg: &RatioConfig,
) -> Result<SolveReport> {
    let z = z_vector(ratio, train)?.mapv(|v| v.max(cfg.z_floor));
    let source = DiscreteMeasure::new(train.points.clone(), z)?;
    let mut problem = KlUotProblem::new(source, target.clone(), cost.clone(), lambdas.0, lambdas.1, epsilon);
    problem.max_iters = cfg.sinkhorn_max_iters;
    problem.tol = cfg.sinkhorn_tol;
    problem.normalize_cost = cfg.normalize_cost;
    solve_kl_uot(&problem)
}

/// KL estimator. The plan step is the entropic KL-UOT solve with source weights
/// `z(theta)` (floored at `cfg.z_floor`) and uniform test weights. The report's trace holds
/// the joint objective after each round, without the entropic term.
pub fn estimate_ratio_kl(
    train: &LabeledDataset,
    test_points: &Array2<f64>,
    cost: &CostSpec,
    lambdas: (f64, f64),
    epsilon: f64,
    cfg: &RatioConfig,
) -> Result<(ClassRatio, SolveReport)> {
    cfg.validate()?;
    check_inputs(train, test_points, lambdas)?;
    let c = train.num_classes();
    let cost_matrix = cost_points(train.points.view(), test_points.view(), cost)?;
    let target = DiscreteMeasure::uniform(test_points.clone(), 1.0)?;
    let floored = |z: Array1<f64>| z.mapv(|v| v.max(cfg.z_floor));

    let joint = |report: &SolveReport, z: &Array1<f64>| -> Result<f64> {
        let alpha = report.plan.alpha();
        let r = alpha.sum_axis(Axis(1));
        let s = alpha.sum_axis(Axis(0));
        Ok(report.cost_term
            + lambdas.0 * kl_divergence(r.view(), z.view())?
            + lambdas.1 * kl_divergence(s.view(), target.weights().view())?)
    };

    let mut ratio = ClassRatio::uniform(c);
    let mut trace = ObjectiveTrace::default();
    let mut last: Option<SolveReport> = None;
    for round in 1..=cfg.max_rounds {
        trace.iterations_used = round;
        let report = kl_plan_step(train, &ratio, &target, &cost_matrix, lambdas, epsilon, cfg)?;
        if c == 1 {
            trace.values.push(report.loss_value);
            trace.converged = true;
            last = Some(report);
            break;
        }

        let r = report.plan.alpha().sum_axis(Axis(1));
        let theta = theta_step(kl_theta_objective(&r, train, cfg.z_floor, lambdas.0), ratio.theta(), cfg)?;
        let change = max_change(&theta, ratio.theta());
        ratio = ClassRatio { theta };
        trace.values.push(joint(&report, &floored(z_vector(&ratio, train)?))?);
        last = Some(report);
        log::debug!("kl ratio round {round}: theta {:?}, change {change:.3e}", ratio.theta.to_vec());
        if change < cfg.theta_tol {
            trace.converged = true;
            break;
        }
    }
    let mut report = last.expect("at least one round runs");
    let z = floored(z_vector(&ratio, train)?);
    let alpha = report.plan.alpha();
    let (r, s) = (alpha.sum_axis(Axis(1)), alpha.sum_axis(Axis(0)));
    report.marginal_residuals = (kl_divergence(r.view(), z.view())?, kl_divergence(s.view(), target.weights().view())?);
    report.loss_value =
        report.cost_term + lambdas.0 * report.marginal_residuals.0 + lambdas.1 * report.marginal_residuals.1;
    report.p = cost.effective_p();
    report.loss_root = report.loss_value.max(0.0).powf(1.0 / report.p);
    report.objective_trace = trace;
    Ok((ratio, report))
}
