//! First-order solvers over the non-negative orthant and over products of simplices.
//!
//! Three methods share one configuration and one trace format:
//! projected gradient with Armijo backtracking, a monotone accelerated variant
//! (FISTA with restarts and a backtracked Lipschitz estimate), and entropic
//! mirror descent with step `1 / |grad|_inf`.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed increase between consecutive trace entries (round-off).
pub const TRACE_SLACK: f64 = 1e-12;
const MAX_BACKTRACKS: usize = 80;
const MIRROR_HALVINGS: usize = 30;
const ZERO_GRADIENT: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Projected gradient with Armijo backtracking.
    Pgd,
    /// Monotone FISTA with adaptive restart.
    #[default]
    AcceleratedPgd,
    MirrorDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Deterministic outer product of the marginal weights (problem specific).
    #[default]
    GeometricMean,
    /// The deterministic start multiplied entrywise by `U(0.1, 1.9)` draws from `seed`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once `(f_k - f_{k+1}) / max(|f_k|, 1)` falls below this.
    pub rel_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    pub method: Method,
    pub seed: u64,
    pub init: InitStrategy,
    /// Consecutive small decreases required before stopping. Restart steps of the
    /// accelerated method do not count.
    pub patience: usize,
    /// Accept every mirror step even when it increases the objective.
    pub unguarded_mirror: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            rel_tol: 1e-7,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            method: Method::AcceleratedPgd,
            seed: 0,
            init: InitStrategy::GeometricMean,
            patience: 1,
            unguarded_mirror: false,
        }
    }
}

impl SolverConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return bad("rel_tol must be positive");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return bad("initial_step must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }

    /// Applies the configured initialization to a deterministic starting point.
    pub fn initialize(&self, base: Array1<f64>) -> Array1<f64> {
        match self.init {
            InitStrategy::GeometricMean => base,
            InitStrategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                base.mapv(|v| v * rng.random_range(0.1..1.9))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTrace {
    /// Objective at the start point followed by one entry per accepted iterate.
    pub values: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl ObjectiveTrace {
    pub fn final_value(&self) -> Option<f64> {
        self.values.last().copied()
    }

    pub fn is_non_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0] + TRACE_SLACK)
    }
}

/// A differentiable objective over flat vectors.
pub trait Objective {
    fn value(&mut self, x: &Array1<f64>) -> f64;
    fn value_and_gradient(&mut self, x: &Array1<f64>) -> (f64, Array1<f64>);
}

/// Wraps a closure returning value and gradient together.
pub struct FnObjective<F>(pub F);

impl<F: FnMut(&Array1<f64>) -> (f64, Array1<f64>)> Objective for FnObjective<F> {
    fn value(&mut self, x: &Array1<f64>) -> f64 {
        (self.0)(x).0
    }

    fn value_and_gradient(&mut self, x: &Array1<f64>) -> (f64, Array1<f64>) {
        (self.0)(x)
    }
}

/// Feasible region of the flat variable.
#[derive(Debug, Clone, PartialEq)]
pub enum FeasibleSet {
    NonNegative,
    /// Consecutive blocks of the given lengths, each non-negative and summing to `total`.
    Simplex {
        blocks: Vec<usize>,
        total: f64,
    },
}

impl FeasibleSet {
    pub fn simplex(n: usize) -> Self {
        FeasibleSet::Simplex { blocks: vec![n], total: 1.0 }
    }

    pub fn project(&self, v: &Array1<f64>) -> Array1<f64> {
        match self {
            FeasibleSet::NonNegative => v.mapv(|x| x.max(0.0)),
            FeasibleSet::Simplex { blocks, total } => {
                let mut out = Array1::zeros(v.len());
                let mut start = 0;
                for &len in blocks {
                    let end = start + len;
                    let p = project_simplex(&v.slice(ndarray::s![start..end]).to_owned(), *total);
                    out.slice_mut(ndarray::s![start..end]).assign(&p);
                    start = end;
                }
                out
            }
        }
    }

    fn check(&self, x: &Array1<f64>) -> Result<()> {
        if let Some(bad) = x.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InfeasibleStart(format!("entry {bad}")));
        }
        if let FeasibleSet::Simplex { blocks, total } = self {
            if blocks.iter().sum::<usize>() != x.len() {
                return Err(Error::DimensionMismatch(format!(
                    "simplex blocks cover {} entries, vector has {}",
                    blocks.iter().sum::<usize>(),
                    x.len()
                )));
            }
            let mut start = 0;
            for &len in blocks {
                let s: f64 = x.slice(ndarray::s![start..start + len]).sum();
                if (s - total).abs() > 1e-9 * total.max(1.0) {
                    return Err(Error::InfeasibleStart(format!("block sums to {s}, expected {total}")));
                }
                start += len;
            }
        }
        Ok(())
    }
}

/// Called with every accepted iterate and its objective value.
pub type Observer<'a> = &'a mut dyn FnMut(&Array1<f64>, f64);

/// Runs `cfg.method` from `x0` over `set`.
pub fn minimize(
    f: &mut dyn Objective,
    x0: Array1<f64>,
    set: &FeasibleSet,
    cfg: &SolverConfig,
    observer: Option<Observer>,
) -> Result<(Array1<f64>, ObjectiveTrace)> {
    cfg.validate()?;
    set.check(&x0)?;
    match cfg.method {
        Method::Pgd => projected_gradient(f, x0, set, cfg, observer),
        Method::AcceleratedPgd => accelerated(f, x0, set, cfg, observer),
        Method::MirrorDescent => match set {
            FeasibleSet::Simplex { blocks, total } => mirror(f, x0, blocks, *total, cfg, observer),
            FeasibleSet::NonNegative => Err(Error::InvalidConfig("mirror descent needs a simplex feasible set".into())),
        },
    }
}

/// Projected gradient descent with Armijo backtracking on `x >= 0`.
pub fn pgd_nonneg<F>(f: F, x0: Array1<f64>, cfg: &SolverConfig) -> Result<(Array1<f64>, ObjectiveTrace)>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let cfg = cfg.clone().with_method(Method::Pgd);
    minimize(&mut FnObjective(f), x0, &FeasibleSet::NonNegative, &cfg, None)
}

/// Mirror descent on the probability simplex.
pub fn mirror_descent_simplex<F>(f: F, x0: Array1<f64>, cfg: &SolverConfig) -> Result<(Array1<f64>, ObjectiveTrace)>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let cfg = cfg.clone().with_method(Method::MirrorDescent);
    let set = FeasibleSet::simplex(x0.len());
    minimize(&mut FnObjective(f), x0, &set, &cfg, None)
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = total}` by sort and threshold.
pub fn project_simplex(v: &Array1<f64>, total: f64) -> Array1<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - total) / (k + 1) as f64;
        if uk - t > 0.0 {
            tau = t;
        }
    }
    let mut x = v.mapv(|vi| (vi - tau).max(0.0));
    // Remove the residual round-off so the sum matches `total` to machine precision.
    let s = x.sum();
    if s > 0.0 {
        x *= total / s;
    }
    x
}

fn evaluate(f: &mut dyn Objective, x: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    let (v, g) = f.value_and_gradient(x);
    if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    Ok((v, g))
}

fn value(f: &mut dyn Objective, x: &Array1<f64>) -> Result<f64> {
    let v = f.value(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective)
    }
}

fn rel_decrease(prev: f64, next: f64) -> f64 {
    (prev - next) / prev.abs().max(1.0)
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Tracks consecutive small decreases.
struct Stopper {
    rel_tol: f64,
    patience: usize,
    streak: usize,
}

impl Stopper {
    fn new(cfg: &SolverConfig) -> Self {
        Self { rel_tol: cfg.rel_tol, patience: cfg.patience, streak: 0 }
    }

    fn done(&mut self, prev: f64, next: f64) -> bool {
        if rel_decrease(prev, next) < self.rel_tol {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= self.patience
    }
}

fn projected_gradient(
    f: &mut dyn Objective,
    mut x: Array1<f64>,
    set: &FeasibleSet,
    cfg: &SolverConfig,
    mut observer: Option<Observer>,
) -> Result<(Array1<f64>, ObjectiveTrace)> {
    let (mut fx, mut g) = evaluate(f, &x)?;
    let mut trace = ObjectiveTrace { values: vec![fx], ..Default::default() };
    let mut stopper = Stopper::new(cfg);
    let mut step = cfg.initial_step / 2.0;
    for it in 1..=cfg.max_iters {
        trace.iterations_used = it;
        let mut t = 2.0 * step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = set.project(&(&x - &(t * &g)));
            let moved = sq_dist(&cand, &x);
            if moved == 0.0 {
                // Fixed point of the projected step: stationary.
                trace.converged = true;
                return Ok((x, trace));
            }
            let fc = value(f, &cand)?;
            if fc <= fx - cfg.armijo_c / t * moved {
                accepted = Some((cand, fc));
                break;
            }
            t *= cfg.backtrack_factor;
        }
        let Some((cand, fc)) = accepted else {
            // No step satisfies the sufficient-decrease test at representable sizes.
            trace.converged = true;
            return Ok((x, trace));
        };
        step = t;
        let prev = fx;
        x = cand;
        let (v, gn) = evaluate(f, &x)?;
        debug_assert!((v - fc).abs() <= 1e-9 * v.abs().max(1.0));
        fx = v.min(prev);
        g = gn;
        trace.values.push(fx);
        if let Some(obs) = observer.as_mut() {
            obs(&x, fx);
        }
        if stopper.done(prev, fx) {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

fn accelerated(
    f: &mut dyn Objective,
    mut x: Array1<f64>,
    set: &FeasibleSet,
    cfg: &SolverConfig,
    mut observer: Option<Observer>,
) -> Result<(Array1<f64>, ObjectiveTrace)> {
    let mut fx = value(f, &x)?;
    let mut trace = ObjectiveTrace { values: vec![fx], ..Default::default() };
    let mut stopper = Stopper::new(cfg);
    let grow = 1.0 / cfg.backtrack_factor;
    let mut lip = 1.0 / cfg.initial_step;
    let mut y = x.clone();
    let mut t_k = 1.0f64;
    let mut restarted = true;
    for it in 1..=cfg.max_iters {
        trace.iterations_used = it;
        let (fy, gy) = evaluate(f, &y)?;
        lip *= 0.95;
        let mut z = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = set.project(&(&y - &(&gy / lip)));
            let diff = &cand - &y;
            let fc = value(f, &cand)?;
            let model = fy + gy.dot(&diff) + 0.5 * lip * diff.dot(&diff);
            if fc <= model + 1e-12 * fy.abs().max(1.0) {
                z = Some((cand, fc));
                break;
            }
            lip *= grow;
        }
        let Some((z, fz)) = z else {
            trace.converged = true;
            break;
        };
        if fz > fx || !fz.is_finite() {
            if restarted {
                // Even the plain projected step from x fails to descend.
                trace.converged = true;
                break;
            }
            y = x.clone();
            t_k = 1.0;
            restarted = true;
            continue;
        }
        if sq_dist(&z, &x) == 0.0 {
            trace.converged = true;
            break;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let momentum = (t_k - 1.0) / t_next;
        y = &z + &(momentum * (&z - &x));
        t_k = t_next;
        restarted = false;
        let prev = fx;
        x = z;
        fx = fz;
        trace.values.push(fx);
        if let Some(obs) = observer.as_mut() {
            obs(&x, fx);
        }
        if stopper.done(prev, fx) {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

fn mirror(
    f: &mut dyn Objective,
    mut x: Array1<f64>,
    blocks: &[usize],
    total: f64,
    cfg: &SolverConfig,
    mut observer: Option<Observer>,
) -> Result<(Array1<f64>, ObjectiveTrace)> {
    let (mut fx, mut g) = evaluate(f, &x)?;
    let mut trace = ObjectiveTrace { values: vec![fx], ..Default::default() };
    let mut stopper = Stopper::new(cfg);
    for it in 1..=cfg.max_iters {
        trace.iterations_used = it;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < ZERO_GRADIENT {
            trace.converged = true;
            break;
        }
        let mut t = 1.0 / gmax;
        let mut accepted = None;
        for _ in 0..=MIRROR_HALVINGS {
            let cand = multiplicative_step(&x, &g, t, blocks, total);
            let fc = value(f, &cand)?;
            if cfg.unguarded_mirror || fc <= fx {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, _)) = accepted else {
            trace.converged = true;
            break;
        };
        let prev = fx;
        x = cand;
        (fx, g) = evaluate(f, &x)?;
        trace.values.push(fx);
        if let Some(obs) = observer.as_mut() {
            obs(&x, fx);
        }
        if stopper.done(prev, fx) {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

/// `x_i exp(-t g_i)` renormalized per block. Exponents are shifted by the block
/// minimum of `t g` so the largest factor is 1 and nothing overflows.
fn multiplicative_step(x: &Array1<f64>, g: &Array1<f64>, t: f64, blocks: &[usize], total: f64) -> Array1<f64> {
    let mut out = Array1::zeros(x.len());
    let mut start = 0;
    for &len in blocks {
        let range = start..start + len;
        let shift = range.clone().map(|i| g[i]).fold(f64::INFINITY, f64::min);
        let mut s = 0.0;
        for i in range.clone() {
            out[i] = x[i] * (-t * (g[i] - shift)).exp();
            s += out[i];
        }
        for i in range {
            out[i] *= total / s;
        }
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn tight() -> SolverConfig {
        SolverConfig { rel_tol: 1e-14, max_iters: 20_000, ..Default::default() }
    }

    #[test]
    fn pgd_squared_norm() {
        let (x, trace) = pgd_nonneg(|x| (x.dot(x), 2.0 * x), array![1.0, 1.0], &tight()).unwrap();
        assert!(x.dot(&x) <= 1e-8);
        assert!(trace.is_non_increasing());
    }

    #[test]
    fn pgd_interior_minimum() {
        let (x, _) = pgd_nonneg(|x| ((x[0] - 3.0).powi(2), array![2.0 * (x[0] - 3.0)]), array![0.0], &tight()).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn pgd_active_boundary() {
        let (x, _) = pgd_nonneg(|x| ((x[0] + 1.0).powi(2), array![2.0 * (x[0] + 1.0)]), array![2.0], &tight()).unwrap();
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn pgd_rejects_negative_start() {
        let r = pgd_nonneg(|x| (x.sum(), Array1::ones(x.len())), array![-1.0], &tight());
        assert!(matches!(r, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn pgd_reports_nonfinite_objective() {
        let r = pgd_nonneg(|x| (f64::NAN, x.clone()), array![1.0], &tight());
        assert_eq!(r.unwrap_err(), Error::NonFiniteObjective);
    }

    #[test]
    fn mirror_linear_vertex() {
        let c = array![0.0, 1.0];
        let (x, trace) = mirror_descent_simplex(|x| (c.dot(x), c.clone()), array![0.5, 0.5], &tight()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && x[1] < 1e-6);
        assert!(trace.is_non_increasing());
    }

    #[test]
    fn mirror_constant_objective() {
        let x0 = array![0.2, 0.8];
        let (x, trace) = mirror_descent_simplex(|x| (3.0, Array1::zeros(x.len())), x0.clone(), &tight()).unwrap();
        assert_eq!(x, x0);
        assert!(trace.converged);
        assert_eq!(trace.iterations_used, 1);
    }

    #[test]
    fn mirror_interior_center() {
        let c = array![0.5, 0.5];
        let f = |x: &Array1<f64>| {
            let d = x - &c;
            (d.dot(&d), 2.0 * d)
        };
        let (x, _) = mirror_descent_simplex(f, array![0.9, 0.1], &tight()).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-4 && (x[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn mirror_rejects_off_simplex_start() {
        let r = mirror_descent_simplex(|x| (0.0, Array1::zeros(x.len())), array![0.5, 0.6], &tight());
        assert!(matches!(r, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_simplex(&array![0.5, 0.5], 1.0), array![0.5, 0.5]);
        assert_eq!(project_simplex(&array![2.0, 0.0], 1.0), array![1.0, 0.0]);
        assert_eq!(project_simplex(&array![1.0, 1.0], 1.0), array![0.5, 0.5]);
    }

    #[test]
    fn block_simplex_projection() {
        let set = FeasibleSet::Simplex { blocks: vec![2, 3], total: 2.0 };
        let p = set.project(&array![5.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(p.slice(ndarray::s![0..2]).to_vec(), vec![2.0, 0.0]);
        assert!((p.slice(ndarray::s![2..5]).sum() - 2.0).abs() < 1e-12);
    }

    fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
        let n = b.len();
        let mut m = a.clone();
        let mut r = b.clone();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))?;
            if m[[piv, col]].abs() < 1e-12 {
                return None;
            }
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            r.swap(col, piv);
            for i in 0..n {
                if i != col {
                    let factor = m[[i, col]] / m[[col, col]];
                    for k in 0..n {
                        m[[i, k]] -= factor * m[[col, k]];
                    }
                    r[i] -= factor * r[col];
                }
            }
        }
        Some(Array1::from_shape_fn(n, |i| r[i] / m[[i, i]]))
    }

    /// Minimum of `x'Qx/2 + b'x` over `x >= 0` by enumerating free sets and checking KKT.
    fn active_set_optimum(q: &Array2<f64>, b: &Array1<f64>) -> f64 {
        let n = b.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut x = Array1::zeros(n);
            if !free.is_empty() {
                let qf = Array2::from_shape_fn((free.len(), free.len()), |(i, j)| q[[free[i], free[j]]]);
                let bf = Array1::from_shape_fn(free.len(), |i| -b[free[i]]);
                let Some(sol) = solve_dense(&qf, &bf) else { continue };
                if sol.iter().any(|v| *v < -1e-12) {
                    continue;
                }
                for (k, &i) in free.iter().enumerate() {
                    x[i] = sol[k].max(0.0);
                }
            }
            let grad = q.dot(&x) + b;
            if (0..n).any(|i| mask & (1 << i) == 0 && grad[i] < -1e-10) {
                continue;
            }
            best = best.min(0.5 * x.dot(&q.dot(&x)) + b.dot(&x));
        }
        best
    }

    fn qp_case() -> impl Strategy<Value = (Array2<f64>, Array1<f64>)> {
        (1usize..=5).prop_flat_map(|n| {
            (proptest::collection::vec(-1.0f64..1.0, n * n), proptest::collection::vec(-2.0f64..2.0, n)).prop_map(
                move |(a, b)| {
                    let a = Array2::from_shape_vec((n, n), a).unwrap();
                    let q = a.t().dot(&a) + Array2::<f64>::eye(n) * 0.1;
                    (q, Array1::from(b))
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solvers_reach_active_set_optimum((q, b) in qp_case()) {
            let target = active_set_optimum(&q, &b);
            let n = b.len();
            for method in [Method::Pgd, Method::AcceleratedPgd] {
                let cfg = SolverConfig { method, ..tight() };
                let mut obj = FnObjective(|x: &Array1<f64>| {
                    let qx = q.dot(x);
                    (0.5 * x.dot(&qx) + b.dot(x), qx + &b)
                });
                let (x, trace) =
                    minimize(&mut obj, Array1::ones(n), &FeasibleSet::NonNegative, &cfg, None).unwrap();
                prop_assert!(x.iter().all(|v| *v >= 0.0));
                prop_assert!(trace.is_non_increasing());
                let fx = 0.5 * x.dot(&q.dot(&x)) + b.dot(&x);
                prop_assert!((fx - target).abs() <= 1e-6, "{:?}: {} vs {}", method, fx, target);
            }
        }

        #[test]
        fn projection_feasible_and_idempotent(
            v in proptest::collection::vec(-5.0f64..5.0, 1..10),
            total in 0.1f64..10.0,
        ) {
            let v = Array1::from(v);
            let p = project_simplex(&v, total);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.sum() - total).abs() <= 1e-12 * total.max(1.0));
            let pp = project_simplex(&p, total);
            for (a, b) in p.iter().zip(pp.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn mirror_iterates_stay_on_simplex(
            c in proptest::collection::vec(-3.0f64..3.0, 2..6),
            w in proptest::collection::vec(0.1f64..1.0, 6),
        ) {
            let n = c.len();
            let c = Array1::from(c);
            let x0 = Array1::from_shape_fn(n, |i| w[i]);
            let x0 = &x0 / x0.sum();
            let mut feasible = true;
            let mut observer = |x: &Array1<f64>, _: f64| {
                feasible &= x.iter().all(|v| *v >= 0.0) && (x.sum() - 1.0).abs() <= 1e-9;
            };
            let mut obj = FnObjective(|x: &Array1<f64>| {
                let d = x - &c;
                (d.dot(&d), 2.0 * d)
            });
            let cfg = SolverConfig { method: Method::MirrorDescent, max_iters: 300, ..Default::default() };
            let (_, trace) =
                minimize(&mut obj, x0, &FeasibleSet::simplex(n), &cfg, Some(&mut observer)).unwrap();
            prop_assert!(feasible);
            prop_assert!(trace.is_non_increasing());
        }
    }
}
