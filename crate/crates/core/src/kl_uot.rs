//! KL-regularized unbalanced transport solved by entropic scaling iterations.
//!
//! The smoothed problem is
//! `<C, pi> + lambda1 KL(pi 1 | a) + lambda2 KL(pi' 1 | b) + eps KL(pi | a b')`,
//! whose solution has the form `pi = diag(u) K diag(v)` with `K = a b' * exp(-C / eps)`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::discrepancy::kl_divergence;
use crate::error::{Error, Result};
use crate::kernels::CostMatrix;
use crate::measures::{ConstraintMode, DiscreteMeasure, TransportPlan};
use crate::optim::ObjectiveTrace;
use crate::uot::SolveReport;

/// Log-domain iterations are selected automatically below `AUTO_LOG_RATIO * median(C)`.
pub const AUTO_LOG_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SinkhornDomain {
    #[default]
    /// Log domain when `eps < 1e-3 * median(C)`, otherwise linear with a log-domain retry
    /// if the scalings under- or overflow.
    Auto,
    Linear,
    Log,
}

#[derive(Debug, Clone)]
pub struct KlUotProblem {
    pub source: DiscreteMeasure,
    pub target: DiscreteMeasure,
    pub cost: CostMatrix,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the log-scalings change by less than this in the max norm.
    pub tol: f64,
    pub domain: SinkhornDomain,
    /// Divide the cost by its largest entry before iterating. Reported costs use the
    /// original matrix.
    pub normalize_cost: bool,
}

impl KlUotProblem {
    pub fn new(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        cost: CostMatrix,
        lambda1: f64,
        lambda2: f64,
        epsilon: f64,
    ) -> Self {
        Self {
            source,
            target,
            cost,
            lambda1,
            lambda2,
            epsilon,
            max_iters: 200_000,
            tol: 1e-9,
            domain: SinkhornDomain::Auto,
            normalize_cost: false,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("epsilon", self.epsilon)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("max_iters and tol must be positive".into()));
        }
        if self.cost.dim() != (self.source.len(), self.target.len()) {
            return Err(Error::DimensionMismatch(format!(
                "cost is {:?}, supports are {} x {}",
                self.cost.dim(),
                self.source.len(),
                self.target.len()
            )));
        }
        for w in [self.source.weights(), self.target.weights()] {
            if let Some(index) = w.iter().position(|v| *v <= 0.0) {
                return Err(Error::SupportViolation { index });
            }
        }
        Ok(())
    }

    fn working_cost(&self) -> Array2<f64> {
        if self.normalize_cost {
            self.cost.normalized_by_max().entries
        } else {
            self.cost.entries.clone()
        }
    }

    /// Whether the solve will run in the log domain.
    pub fn uses_log_domain(&self) -> bool {
        match self.domain {
            SinkhornDomain::Linear => false,
            SinkhornDomain::Log => true,
            SinkhornDomain::Auto => {
                let c = self.working_cost();
                let mut v: Vec<f64> = c.iter().copied().collect();
                v.sort_by(f64::total_cmp);
                let median =
                    if v.len() % 2 == 1 { v[v.len() / 2] } else { 0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2]) };
                self.epsilon < AUTO_LOG_RATIO * median
            }
        }
    }
}

pub fn solve_kl_uot(problem: &KlUotProblem) -> Result<SolveReport> {
    problem.validate()?;
    let cost = problem.working_cost();
    let a = problem.source.weights();
    let b = problem.target.weights();
    let eps = problem.epsilon;
    let f1 = problem.lambda1 / (problem.lambda1 + eps);
    let f2 = problem.lambda2 / (problem.lambda2 + eps);
    let log_k = Array2::from_shape_fn(cost.dim(), |(i, j)| a[i].ln() + b[j].ln() - cost[[i, j]] / eps);

    let (plan, residuals, converged) = if problem.uses_log_domain() {
        log_iterations(&log_k, a, b, f1, f2, problem)?
    } else {
        match linear_iterations(&log_k.mapv(f64::exp), a, b, f1, f2, problem) {
            // With lambda >> eps the individual scalings drift even when their product
            // is tame; auto mode retries in the log domain.
            Err(Error::NumericalUnderflow(msg)) if problem.domain == SinkhornDomain::Auto => {
                log::debug!("linear scaling failed ({msg}); retrying in the log domain");
                log_iterations(&log_k, a, b, f1, f2, problem)?
            }
            other => other?,
        }
    };

    let row = plan.sum_axis(Axis(1));
    let col = plan.sum_axis(Axis(0));
    let res1 = kl_divergence(row.view(), a.view())?;
    let res2 = kl_divergence(col.view(), b.view())?;
    let cost_term = (&plan * &problem.cost.entries).sum();
    let reference = Array2::from_shape_fn(plan.dim(), |(i, j)| a[i] * b[j]);
    let entropic = eps
        * kl_divergence(
            plan.view().into_shape_with_order(plan.len()).unwrap(),
            reference.view().into_shape_with_order(reference.len()).unwrap(),
        )?;
    let loss_value = cost_term + problem.lambda1 * res1 + problem.lambda2 * res2;
    let trace = ObjectiveTrace { values: vec![loss_value], converged, iterations_used: residuals.len() };
    Ok(SolveReport {
        plan: TransportPlan::new(plan, ConstraintMode::NonNegative)?,
        objective_trace: trace,
        cost_term,
        marginal_residuals: (res1, res2),
        loss_value,
        loss_root: loss_value,
        p: 1.0,
        entropic_term: Some(entropic),
        fixed_point_residuals: residuals,
    })
}

type Iterated = (Array2<f64>, Vec<f64>, bool);

fn max_abs_diff(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    x.iter().zip(y.iter()).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

fn linear_iterations(
    k: &Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    f1: f64,
    f2: f64,
    problem: &KlUotProblem,
) -> Result<Iterated> {
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..problem.max_iters {
        let kv = k.dot(&v);
        if kv.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return Err(underflow("K v", problem));
        }
        let u_new = (a / &kv).mapv(|x| x.powf(f1));
        let ktu = k.t().dot(&u_new);
        if ktu.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return Err(underflow("K' u", problem));
        }
        let v_new = (b / &ktu).mapv(|x| x.powf(f2));
        let change = max_abs_diff(&u_new.mapv(f64::ln), &u.mapv(f64::ln))
            .max(max_abs_diff(&v_new.mapv(f64::ln), &v.mapv(f64::ln)));
        u = u_new;
        v = v_new;
        if !change.is_finite() {
            return Err(underflow("scalings", problem));
        }
        residuals.push(change);
        if change < problem.tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn(k.dim(), |(i, j)| u[i] * k[[i, j]] * v[j]);
    Ok((plan, residuals, converged))
}

fn underflow(what: &str, problem: &KlUotProblem) -> Error {
    Error::NumericalUnderflow(format!(
        "{what} underflowed to zero at epsilon {}; raise epsilon or use the log domain",
        problem.epsilon
    ))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_iterations(
    log_k: &Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    f1: f64,
    f2: f64,
    problem: &KlUotProblem,
) -> Result<Iterated> {
    let (m1, m2) = log_k.dim();
    let (la, lb) = (a.mapv(f64::ln), b.mapv(f64::ln));
    let mut lu = Array1::<f64>::zeros(m1);
    let mut lv = Array1::<f64>::zeros(m2);
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..problem.max_iters {
        let lu_new = Array1::from_shape_fn(m1, |i| f1 * (la[i] - log_sum_exp((0..m2).map(|j| log_k[[i, j]] + lv[j]))));
        let lv_new =
            Array1::from_shape_fn(m2, |j| f2 * (lb[j] - log_sum_exp((0..m1).map(|i| log_k[[i, j]] + lu_new[i]))));
        let change = max_abs_diff(&lu_new, &lu).max(max_abs_diff(&lv_new, &lv));
        lu = lu_new;
        lv = lv_new;
        if !change.is_finite() {
            return Err(underflow("log scalings", problem));
        }
        residuals.push(change);
        if change < problem.tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((m1, m2), |(i, j)| (lu[i] + log_k[[i, j]] + lv[j]).exp());
    Ok((plan, residuals, converged))
}
