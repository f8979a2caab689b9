//! MMD-regularized unbalanced transport.
//!
//! The plan `alpha` couples a row support with a column support and is penalized by
//! `lambda1 * |alpha 1 - a|_{G_r}^q + lambda2 * |alpha' 1 - b|_{G_c}^q` on top of the
//! linear transport cost. In the standard parameterization rows and columns are the
//! source and target supports. In the flexible parameterization both sides range over
//! the concatenated support, the source weights are padded with zeros on the target
//! part and vice versa, and both norms use the Gram matrix of the concatenation.
//!
//! For `q = 1` the norm is not differentiable at a zero residual. [`solve`] minimizes
//! the smooth surrogate `sqrt(|r|^2 + delta^2) - delta` for a decreasing sequence of
//! `delta`, warm-starting each stage, and keeps the iterate with the lowest exact value.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::discrepancy::mmd_squared;
use crate::error::{Error, Result};
use crate::kernels::{cost_points, gram_points, CostMatrix, CostSpec, KernelSpec};
use crate::measures::{union_support, ConstraintMode, DiscreteMeasure, TransportPlan};
use crate::optim::{minimize, FeasibleSet, Method, Objective, ObjectiveTrace, SolverConfig};

/// Rows with less mass than this have no barycentric image.
pub const ZERO_ROW_MASS: f64 = 1e-15;

const SMOOTHING_DECAY: f64 = 0.1;
const SMOOTHING_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Standard,
    Flexible,
}

/// Power applied to the MMD penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MmdPower {
    #[serde(rename = "1")]
    One,
    #[default]
    #[serde(rename = "2")]
    Two,
}

impl MmdPower {
    pub fn from_q(q: f64) -> Result<Self> {
        if q == 1.0 {
            Ok(MmdPower::One)
        } else if q == 2.0 {
            Ok(MmdPower::Two)
        } else {
            Err(Error::InvalidConfig(format!("q must be 1 or 2, got {q}")))
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            MmdPower::One => 1.0,
            MmdPower::Two => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UotParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub q: MmdPower,
    /// Exponent already applied inside the cost matrix; only used to report `loss^(1/p)`.
    pub p: f64,
    pub constraint: ConstraintMode,
    pub parameterization: Parameterization,
}

impl Default for UotParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            q: MmdPower::Two,
            p: 1.0,
            constraint: ConstraintMode::NonNegative,
            parameterization: Parameterization::Standard,
        }
    }
}

impl UotParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::InvalidConfig(format!("p must be >= 1, got {}", self.p)));
        }
        Ok(())
    }
}

/// The matrices and targets of one penalized transport objective, independent of
/// where they came from. Shared with the class-ratio estimator, which swaps `row_target`.
#[derive(Debug, Clone)]
pub(crate) struct PenalizedOt {
    pub cost: Array2<f64>,
    pub g_row: Array2<f64>,
    pub g_col: Array2<f64>,
    pub row_target: Array1<f64>,
    pub col_target: Array1<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub q: MmdPower,
}

/// Objective split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Terms {
    pub cost: f64,
    /// `|r - a|_G^q`, exact (no smoothing).
    pub res1: f64,
    pub res2: f64,
}

impl Terms {
    pub fn total(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.cost + lambda1 * self.res1 + lambda2 * self.res2
    }
}

impl PenalizedOt {
    pub fn shape(&self) -> (usize, usize) {
        self.cost.dim()
    }

    fn residual(g: &Array2<f64>, marginal: &Array1<f64>, target: &Array1<f64>) -> (f64, Array1<f64>) {
        let e = marginal - target;
        let ge = g.dot(&e);
        ((e.dot(&ge)).max(0.0), ge)
    }

    pub fn terms(&self, alpha: ArrayView2<f64>) -> Terms {
        let (q1, _) = Self::residual(&self.g_row, &alpha.sum_axis(Axis(1)), &self.row_target);
        let (q2, _) = Self::residual(&self.g_col, &alpha.sum_axis(Axis(0)), &self.col_target);
        let cost = (&alpha * &self.cost).sum();
        match self.q {
            MmdPower::Two => Terms { cost, res1: q1, res2: q2 },
            MmdPower::One => Terms { cost, res1: q1.sqrt(), res2: q2.sqrt() },
        }
    }

    /// Value and gradient, with the `q = 1` norms smoothed by `delta` (exact when `delta = 0`).
    pub fn value_and_gradient(&self, alpha: ArrayView2<f64>, delta: f64) -> (f64, Array2<f64>) {
        let (q1, ge1) = Self::residual(&self.g_row, &alpha.sum_axis(Axis(1)), &self.row_target);
        let (q2, ge2) = Self::residual(&self.g_col, &alpha.sum_axis(Axis(0)), &self.col_target);
        let cost = (&alpha * &self.cost).sum();
        let (t1, d1, t2, d2) = match self.q {
            MmdPower::Two => (q1, 2.0 * ge1, q2, 2.0 * ge2),
            MmdPower::One => {
                let (t1, s1) = smoothed_norm(q1, delta);
                let (t2, s2) = smoothed_norm(q2, delta);
                (t1, ge1 * s1, t2, ge2 * s2)
            }
        };
        let value = cost + self.lambda1 * t1 + self.lambda2 * t2;
        let mut grad = self.cost.clone();
        let d1 = d1 * self.lambda1;
        let d2 = d2 * self.lambda2;
        for ((i, j), g) in grad.indexed_iter_mut() {
            *g += d1[i] + d2[j];
        }
        (value, grad)
    }

    pub fn value(&self, alpha: ArrayView2<f64>, delta: f64) -> f64 {
        let t = self.terms(alpha);
        match self.q {
            MmdPower::Two => t.total(self.lambda1, self.lambda2),
            MmdPower::One => {
                let s = |r: f64| smoothed_norm(r * r, delta).0;
                t.cost + self.lambda1 * s(t.res1) + self.lambda2 * s(t.res2)
            }
        }
    }
}

/// `(sqrt(Q + delta^2) - delta, 1 / sqrt(Q + delta^2))`; the derivative factor is 0 at
/// `Q = delta = 0`, the zero subgradient.
fn smoothed_norm(sq: f64, delta: f64) -> (f64, f64) {
    let root = (sq + delta * delta).sqrt();
    let factor = if root > 0.0 { 1.0 / root } else { 0.0 };
    (root - delta, factor)
}

struct FlatObjective<'a> {
    ot: &'a PenalizedOt,
    shape: (usize, usize),
    delta: f64,
}

impl FlatObjective<'_> {
    fn view<'b>(&self, x: &'b Array1<f64>) -> ArrayView2<'b, f64> {
        x.view().into_shape_with_order(self.shape).expect("flat plan length matches shape")
    }
}

impl Objective for FlatObjective<'_> {
    fn value(&mut self, x: &Array1<f64>) -> f64 {
        self.ot.value(self.view(x), self.delta)
    }

    fn value_and_gradient(&mut self, x: &Array1<f64>) -> (f64, Array1<f64>) {
        let (v, g) = self.ot.value_and_gradient(self.view(x), self.delta);
        (v, Array1::from_iter(g))
    }
}

/// Called with every accepted plan and its objective value.
pub(crate) type PlanObserver<'a> = &'a mut dyn FnMut(&Array2<f64>, f64);

/// Minimizes a penalized objective from `alpha0`, returning the plan and a trace of exact
/// objective values. The optional observer sees each accepted plan.
pub(crate) fn minimize_plan(
    ot: &PenalizedOt,
    alpha0: Array2<f64>,
    mode: ConstraintMode,
    cfg: &SolverConfig,
    mut observer: Option<PlanObserver<'_>>,
) -> Result<(Array2<f64>, ObjectiveTrace)> {
    let shape = ot.shape();
    let set = match mode {
        ConstraintMode::NonNegative => FeasibleSet::NonNegative,
        ConstraintMode::Simplex => FeasibleSet::simplex(shape.0 * shape.1),
    };
    let x0 = Array1::from_iter(alpha0);
    match ot.q {
        MmdPower::Two => {
            let mut obj = FlatObjective { ot, shape, delta: 0.0 };
            let mut wrap = |x: &Array1<f64>, v: f64| {
                if let Some(obs) = observer.as_mut() {
                    obs(&to_matrix(x.clone(), shape), v);
                }
            };
            let (x, trace) = minimize(&mut obj, x0, &set, cfg, Some(&mut wrap))?;
            Ok((to_matrix(x, shape), trace))
        }
        MmdPower::One => minimize_plan_q1(ot, x0, &set, cfg, observer),
    }
}

fn minimize_plan_q1(
    ot: &PenalizedOt,
    x0: Array1<f64>,
    set: &FeasibleSet,
    cfg: &SolverConfig,
    mut observer: Option<PlanObserver<'_>>,
) -> Result<(Array2<f64>, ObjectiveTrace)> {
    let shape = ot.shape();
    let exact = |x: &Array1<f64>| ot.value(x.view().into_shape_with_order(shape).unwrap(), 0.0);
    // Start at the scale of the measures themselves: a start plan whose marginals already
    // match would otherwise sit on the kink with no smoothing at all.
    let start = ot.terms(x0.view().into_shape_with_order(shape).unwrap());
    let norm = |g: &Array2<f64>, v: &Array1<f64>| v.dot(&g.dot(v)).max(0.0).sqrt();
    let delta0 = start
        .res1
        .max(start.res2)
        .max(norm(&ot.g_row, &ot.row_target))
        .max(norm(&ot.g_col, &ot.col_target))
        .max(SMOOTHING_FLOOR);
    let delta_min = SMOOTHING_FLOOR * delta0.max(1.0);

    let mut best_value = exact(&x0);
    let mut best = x0.clone();
    let mut trace = ObjectiveTrace { values: vec![best_value], ..Default::default() };
    let mut x = x0;
    let mut delta = delta0;
    loop {
        let mut stage_cfg = cfg.clone();
        stage_cfg.max_iters = cfg.max_iters.saturating_sub(trace.iterations_used).max(1);
        let mut obj = FlatObjective { ot, shape, delta };
        let mut record = |it: &Array1<f64>, _: f64| {
            let v = exact(it);
            if v < best_value {
                best_value = v;
                best.assign(it);
                if let Some(obs) = observer.as_mut() {
                    obs(&to_matrix(it.clone(), shape), v);
                }
            }
            trace.values.push(best_value);
        };
        let (next, stage) = minimize(&mut obj, x, set, &stage_cfg, Some(&mut record))?;
        x = next;
        trace.iterations_used += stage.iterations_used;
        trace.converged = stage.converged;
        if delta <= delta_min || trace.iterations_used >= cfg.max_iters {
            break;
        }
        delta *= SMOOTHING_DECAY;
    }
    Ok((to_matrix(best, shape), trace))
}

fn to_matrix(x: Array1<f64>, shape: (usize, usize)) -> Array2<f64> {
    x.into_shape_with_order(shape).expect("flat plan length matches shape")
}

/// Deterministic start: outer product of the normalized marginal targets scaled to total
/// mass `sqrt(sigma1 * sigma2)` (mass 1 in simplex mode). Zero targets fall back to uniform,
/// and mirror descent gets a small uniform component so that no entry is frozen at zero.
pub(crate) fn initial_plan(
    row_target: &Array1<f64>,
    col_target: &Array1<f64>,
    mode: ConstraintMode,
    cfg: &SolverConfig,
) -> Array2<f64> {
    let normalize = |v: &Array1<f64>| {
        let s = v.sum();
        if s > 0.0 {
            v / s
        } else {
            Array1::from_elem(v.len(), 1.0 / v.len() as f64)
        }
    };
    let (m1, m2) = (row_target.len(), col_target.len());
    let a = normalize(row_target);
    let b = normalize(col_target);
    let mass = match mode {
        ConstraintMode::NonNegative => (row_target.sum() * col_target.sum()).sqrt(),
        ConstraintMode::Simplex => 1.0,
    };
    let mut alpha = Array2::from_shape_fn((m1, m2), |(i, j)| a[i] * b[j] * mass);
    if cfg.method == Method::MirrorDescent {
        let uniform = mass / (m1 * m2) as f64;
        alpha.mapv_inplace(|v| 0.99 * v + 0.01 * uniform);
    }
    let flat = cfg.initialize(Array1::from_iter(alpha));
    let mut alpha = to_matrix(flat, (m1, m2));
    if mode == ConstraintMode::Simplex {
        let s = alpha.sum();
        if s > 0.0 {
            alpha /= s;
        } else {
            alpha.fill(1.0 / (m1 * m2) as f64);
        }
    }
    alpha
}

/// A squared-MMD (or MMD) regularized transport problem between two measures.
#[derive(Debug, Clone)]
pub struct UotProblem {
    pub source: DiscreteMeasure,
    pub target: DiscreteMeasure,
    pub cost: CostMatrix,
    pub kernel: KernelSpec,
    pub params: UotParams,
    ot: PenalizedOt,
}

impl UotProblem {
    /// `cost` must be `m1 x m2` in the standard parameterization and `m x m` over the
    /// concatenated support (source rows first) in the flexible one.
    pub fn new(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        cost: CostMatrix,
        kernel: KernelSpec,
        params: UotParams,
    ) -> Result<Self> {
        params.validate()?;
        kernel.validate()?;
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "source dimension {} vs target dimension {}",
                source.dim(),
                target.dim()
            )));
        }
        let (m1, m2) = (source.len(), target.len());
        let ot = match params.parameterization {
            Parameterization::Standard => {
                expect_shape(&cost, (m1, m2))?;
                PenalizedOt {
                    cost: cost.entries.clone(),
                    g_row: gram_points(source.points().view(), source.points().view(), &kernel)?,
                    g_col: gram_points(target.points().view(), target.points().view(), &kernel)?,
                    row_target: source.weights().clone(),
                    col_target: target.weights().clone(),
                    lambda1: params.lambda1,
                    lambda2: params.lambda2,
                    q: params.q,
                }
            }
            Parameterization::Flexible => {
                let m = m1 + m2;
                expect_shape(&cost, (m, m))?;
                let union = union_support(&[&source, &target])?;
                let g = gram_points(union.view(), union.view(), &kernel)?;
                let mut a = Array1::zeros(m);
                a.slice_mut(ndarray::s![..m1]).assign(source.weights());
                let mut b = Array1::zeros(m);
                b.slice_mut(ndarray::s![m1..]).assign(target.weights());
                PenalizedOt {
                    cost: cost.entries.clone(),
                    g_row: g.clone(),
                    g_col: g,
                    row_target: a,
                    col_target: b,
                    lambda1: params.lambda1,
                    lambda2: params.lambda2,
                    q: params.q,
                }
            }
        };
        Ok(Self { source, target, cost, kernel, params, ot })
    }

    /// Builds the cost matrix from `spec` over the supports the parameterization needs.
    pub fn with_cost_spec(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        spec: &CostSpec,
        kernel: KernelSpec,
        mut params: UotParams,
    ) -> Result<Self> {
        let cost = match params.parameterization {
            Parameterization::Standard => cost_points(source.points().view(), target.points().view(), spec)?,
            Parameterization::Flexible => {
                let u = union_support(&[&source, &target])?;
                cost_points(u.view(), u.view(), spec)?
            }
        };
        params.p = spec.effective_p();
        Self::new(source, target, cost, kernel, params)
    }

    pub(crate) fn penalized(&self) -> &PenalizedOt {
        &self.ot
    }

    /// Shape of the plan variable.
    pub fn plan_shape(&self) -> (usize, usize) {
        self.ot.shape()
    }

    /// Row and column supports of the plan variable.
    pub fn plan_supports(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        match self.params.parameterization {
            Parameterization::Standard => Ok((self.source.points().clone(), self.target.points().clone())),
            Parameterization::Flexible => {
                let u = union_support(&[&self.source, &self.target])?;
                Ok((u.clone(), u))
            }
        }
    }

    /// Exact objective value and (sub)gradient at `alpha`.
    pub fn objective_and_gradient(&self, alpha: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        if alpha.dim() != self.plan_shape() {
            return Err(Error::DimensionMismatch(format!(
                "plan is {:?}, expected {:?}",
                alpha.dim(),
                self.plan_shape()
            )));
        }
        if let Some(bad) = alpha.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("plan entry {bad}")));
        }
        Ok(self.ot.value_and_gradient(alpha.view(), 0.0))
    }

    pub fn initial_plan(&self, cfg: &SolverConfig) -> Array2<f64> {
        initial_plan(&self.ot.row_target, &self.ot.col_target, self.params.constraint, cfg)
    }

    /// Residuals `gamma(pi_1, mu)^q`, `gamma(pi_2, nu)^q` computed through the discrepancy module.
    pub fn marginal_residuals(&self, alpha: &Array2<f64>) -> Result<(f64, f64)> {
        let r = alpha.sum_axis(Axis(1));
        let s = alpha.sum_axis(Axis(0));
        let (gr, gc) = (self.ot.g_row.view(), self.ot.g_col.view());
        let m1 = mmd_squared(r.view(), self.ot.row_target.view(), gr, gr, gr)?;
        let m2 = mmd_squared(s.view(), self.ot.col_target.view(), gc, gc, gc)?;
        Ok(match self.params.q {
            MmdPower::Two => (m1.squared, m2.squared),
            MmdPower::One => (m1.value, m2.value),
        })
    }
}

fn expect_shape(cost: &CostMatrix, shape: (usize, usize)) -> Result<()> {
    if cost.dim() != shape {
        return Err(Error::DimensionMismatch(format!("cost matrix is {:?}, expected {:?}", cost.dim(), shape)));
    }
    Ok(())
}

/// Outcome of a transport solve, shared by the MMD and KL solvers.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub plan: TransportPlan,
    pub objective_trace: ObjectiveTrace,
    /// `tr(alpha C')`.
    pub cost_term: f64,
    /// Row and column discrepancies at the solution (MMD^q, or KL for the entropic baseline).
    pub marginal_residuals: (f64, f64),
    /// `cost_term + lambda1 * res1 + lambda2 * res2`.
    pub loss_value: f64,
    /// `loss_value^(1/p)`.
    pub loss_root: f64,
    pub p: f64,
    /// Entropic smoothing term, reported apart from `loss_value` (KL baseline only).
    pub entropic_term: Option<f64>,
    /// Per-iteration change of the log-scalings (KL baseline only).
    pub fixed_point_residuals: Vec<f64>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.objective_trace.converged
    }

    /// Fraction of plan entries that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        let a = self.plan.alpha();
        a.iter().filter(|v| **v == 0.0).count() as f64 / a.len() as f64
    }
}

/// Solves from the configured initialization.
pub fn solve(problem: &UotProblem, cfg: &SolverConfig) -> Result<SolveReport> {
    solve_from(problem, problem.initial_plan(cfg), cfg)
}

/// Solves from an explicit starting plan.
pub fn solve_from(problem: &UotProblem, alpha0: Array2<f64>, cfg: &SolverConfig) -> Result<SolveReport> {
    if alpha0.dim() != problem.plan_shape() {
        return Err(Error::DimensionMismatch(format!(
            "start plan is {:?}, expected {:?}",
            alpha0.dim(),
            problem.plan_shape()
        )));
    }
    let mode = problem.params.constraint;
    let (alpha, trace) = minimize_plan(&problem.ot, alpha0, mode, cfg, None)?;
    let alpha = if mode == ConstraintMode::Simplex { alpha.clone() / alpha.sum() } else { alpha };
    report(problem, alpha, trace)
}

pub(crate) fn report(problem: &UotProblem, alpha: Array2<f64>, trace: ObjectiveTrace) -> Result<SolveReport> {
    let cost_term = (&alpha * &problem.ot.cost).sum();
    let (res1, res2) = problem.marginal_residuals(&alpha)?;
    let loss_value = cost_term + problem.params.lambda1 * res1 + problem.params.lambda2 * res2;
    let p = problem.params.p;
    Ok(SolveReport {
        plan: TransportPlan::new(alpha, problem.params.constraint)?,
        objective_trace: trace,
        cost_term,
        marginal_residuals: (res1, res2),
        loss_value,
        loss_root: loss_value.max(0.0).powf(1.0 / p),
        p,
        entropic_term: None,
        fixed_point_residuals: Vec::new(),
    })
}

/// The lifted loss `U(mu, nu)`: the optimal objective with `lambda1 = lambda2 = lambda`,
/// raised to `1/p`. The exponent `p` is taken from `spec`.
pub fn lifted_loss(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &CostSpec,
    kernel: &KernelSpec,
    lambda: f64,
    q: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let params = UotParams { lambda1: lambda, lambda2: lambda, q: MmdPower::from_q(q)?, ..Default::default() };
    let problem = UotProblem::with_cost_spec(mu.clone(), nu.clone(), spec, *kernel, params)?;
    Ok(solve(&problem, cfg)?.loss_root)
}

/// Barycentric projection `T(x_i) = sum_j alpha_ij y_j / sum_j alpha_ij`. Rows carrying
/// less than [`ZERO_ROW_MASS`] map to `None`.
pub fn barycentric_map(plan: &TransportPlan, target_points: &Array2<f64>) -> Result<Vec<Option<Array1<f64>>>> {
    let alpha = plan.alpha();
    if alpha.ncols() != target_points.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "plan has {} columns, target has {} points",
            alpha.ncols(),
            target_points.nrows()
        )));
    }
    Ok(alpha
        .outer_iter()
        .map(|row| {
            let mass = row.sum();
            (mass >= ZERO_ROW_MASS).then(|| row.dot(target_points) / mass)
        })
        .collect())
}
