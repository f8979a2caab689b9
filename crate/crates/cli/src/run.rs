//! Executes a [`RunConfig`] and writes its artifacts.
//!
//! Every task writes `report.json` into the output directory. Plans go to `plan.csv`
//! (raw entries) and `heatmap.csv` (min-max scaled to `[0, 1]`); Compare writes one
//! subdirectory per method plus `comparison.csv`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ipm_ot_core::barycenter::{solve_barycenter, BarycenterProblem};
use ipm_ot_core::class_ratio::{estimate_ratio_kl, estimate_ratio_mmd, LabeledDataset, RatioConfig};
use ipm_ot_core::datasets::{gaussian_grid_measure, TwoGaussians};
use ipm_ot_core::kernels::{cost_points, median_heuristic_gamma, KernelSpec};
use ipm_ot_core::kl_uot::{solve_kl_uot, KlUotProblem};
use ipm_ot_core::uot::{barycentric_map, solve, MmdPower, Parameterization, SolveReport, UotParams, UotProblem};
use ipm_ot_core::DiscreteMeasure;
use ndarray::{Array1, Array2, Axis};
use serde_json::{json, Value};

use crate::config::{Estimator, MeasureInput, RatioInput, RunConfig, Task};
use crate::error::{CliError, CliResult};
use crate::io::{
    format_f64, load_labeled_csv, load_points_csv, min_max_normalize, write_atomic, write_json, write_matrix_csv,
    write_table_csv,
};

/// Row-marginal entries above this fraction of the largest one count as supported.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

pub fn load_measure(input: &MeasureInput) -> CliResult<DiscreteMeasure> {
    match input {
        MeasureInput::Csv { path, total_mass } => load_points_csv(path, *total_mass),
        MeasureInput::GaussianGrid { n, mean, std, mass } => Ok(gaussian_grid_measure(*n, *mean, *std, *mass)?),
    }
}

/// Fills in the kernel rate: the configured one, the bandwidth translated to a rate, or
/// the median heuristic over `points` (falling back to 1 when all points coincide).
fn resolve_kernel(cfg: &mut RunConfig, points: &[&Array2<f64>]) -> CliResult<KernelSpec> {
    let spec = match (cfg.kernel.gamma, cfg.kernel.sigma) {
        (Some(g), _) => KernelSpec::gaussian(g)?,
        (None, Some(s)) => KernelSpec::from_bandwidth(s)?,
        (None, None) => {
            let views: Vec<_> = points.iter().map(|p| p.view()).collect();
            let all = ndarray::concatenate(Axis(0), &views).map_err(|e| CliError::Data(e.to_string()))?;
            KernelSpec::gaussian(median_heuristic_gamma(all.view()).unwrap_or(1.0))?
        }
    };
    cfg.kernel.gamma = Some(spec.gamma);
    cfg.kernel.sigma = None;
    Ok(spec)
}

fn require<'a, T>(value: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::Config(format!("this task needs `{name}`")))
}

/// Runs the task and returns the report that was written.
pub fn run(config: &RunConfig) -> CliResult<Value> {
    config.validate()?;
    let task = config.task.ok_or_else(|| CliError::Config("no task given".into()))?;
    let started = Instant::now();
    let mut resolved = config.clone();
    resolved.solver.seed = config.seed;
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let results = match task {
        Task::Solve => solve_task(&mut resolved, &out, false)?,
        Task::Map => solve_task(&mut resolved, &out, true)?,
        Task::Compare => compare_task(&mut resolved, &out)?,
        Task::Barycenter => barycenter_task(&mut resolved, &out)?,
        Task::ClassRatio => ratio_task(&mut resolved, &out)?,
    };
    resolved.task = Some(task);
    let report = json!({
        "task": task,
        "config": resolved,
        "results": results,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn row_support(alpha: &Array2<f64>) -> usize {
    let r = alpha.sum_axis(Axis(1));
    let max = r.iter().copied().fold(0.0, f64::max);
    r.iter().filter(|&&v| max > 0.0 && v > SUPPORT_THRESHOLD * max).count()
}

fn report_json(rep: &SolveReport) -> Value {
    let alpha = rep.plan.alpha();
    json!({
        "objective_trace": rep.objective_trace.values,
        "converged": rep.converged(),
        "iterations_used": rep.objective_trace.iterations_used,
        "loss_value": rep.loss_value,
        "loss_root": rep.loss_root,
        "p": rep.p,
        "cost_term": rep.cost_term,
        "marginal_residuals": [rep.marginal_residuals.0, rep.marginal_residuals.1],
        "entropic_term": rep.entropic_term,
        "fixed_point_iterations": rep.fixed_point_residuals.len(),
        "final_fixed_point_change": rep.fixed_point_residuals.last(),
        "plan_shape": [alpha.nrows(), alpha.ncols()],
        "plan_mass": alpha.sum(),
        "sparsity": rep.sparsity(),
        "row_support": row_support(alpha),
        "min_entry": alpha.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

fn write_plan(dir: &Path, alpha: &Array2<f64>, heatmap: bool) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_matrix_csv(&dir.join("plan.csv"), alpha)?;
    if heatmap {
        write_matrix_csv(&dir.join("heatmap.csv"), &min_max_normalize(alpha))?;
    }
    Ok(())
}

fn write_marginals(
    dir: &Path,
    alpha: &Array2<f64>,
    row_target: &Array1<f64>,
    col_target: &Array1<f64>,
) -> CliResult<()> {
    let mut text = String::from("side,index,marginal,target\n");
    for (side, marginal, target) in
        [("row", alpha.sum_axis(Axis(1)), row_target), ("col", alpha.sum_axis(Axis(0)), col_target)]
    {
        for (i, (m, t)) in marginal.iter().zip(target.iter()).enumerate() {
            writeln!(text, "{side},{i},{},{}", format_f64(*m), format_f64(*t)).expect("writing to a string");
        }
    }
    write_atomic(&dir.join("marginals.csv"), text.as_bytes())
}

/// Marginal targets of the plan variable, padded with zeros in the flexible form.
fn plan_targets(problem: &UotProblem) -> (Array1<f64>, Array1<f64>) {
    let (a, b) = (problem.source.weights(), problem.target.weights());
    match problem.params.parameterization {
        Parameterization::Standard => (a.clone(), b.clone()),
        Parameterization::Flexible => {
            let (m1, m2) = (a.len(), b.len());
            let mut ra = Array1::zeros(m1 + m2);
            ra.slice_mut(ndarray::s![..m1]).assign(a);
            let mut rb = Array1::zeros(m1 + m2);
            rb.slice_mut(ndarray::s![m1..]).assign(b);
            (ra, rb)
        }
    }
}

fn mmd_problem(cfg: &mut RunConfig) -> CliResult<UotProblem> {
    let source = load_measure(require(&cfg.source, "source")?)?;
    let target = load_measure(require(&cfg.target, "target")?)?;
    let kernel = resolve_kernel(cfg, &[source.points(), target.points()])?;
    let params = UotParams {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        q: MmdPower::from_q(cfg.q)?,
        p: 1.0,
        constraint: cfg.constraint,
        parameterization: cfg.parameterization,
    };
    Ok(UotProblem::with_cost_spec(source, target, &cfg.cost, kernel, params)?)
}

fn solve_mmd_into(cfg: &mut RunConfig, dir: &Path) -> CliResult<(UotProblem, SolveReport)> {
    let problem = mmd_problem(cfg)?;
    let rep = solve(&problem, &cfg.solver)?;
    if !rep.loss_value.is_finite() {
        return Err(CliError::Numerical("objective is not finite at the solution".into()));
    }
    let alpha = rep.plan.alpha();
    write_plan(dir, alpha, cfg.heatmap)?;
    let (rt, ct) = plan_targets(&problem);
    write_marginals(dir, alpha, &rt, &ct)?;
    Ok((problem, rep))
}

fn solve_task(cfg: &mut RunConfig, out: &Path, with_map: bool) -> CliResult<Value> {
    let (problem, rep) = solve_mmd_into(cfg, out)?;
    let mut results = report_json(&rep);
    if with_map {
        let (rows, cols) = problem.plan_supports()?;
        let images = barycentric_map(&rep.plan, &cols)?;
        let d = rows.ncols();
        let mut text = String::new();
        let names: Vec<String> = (0..d).map(|k| format!("x{k}")).chain((0..d).map(|k| format!("t{k}"))).collect();
        text.push_str(&names.join(","));
        text.push('\n');
        let mut unmapped = 0;
        for (x, image) in rows.outer_iter().zip(&images) {
            let mut cells: Vec<String> = x.iter().map(|v| format_f64(*v)).collect();
            match image {
                Some(t) => cells.extend(t.iter().map(|v| format_f64(*v))),
                None => {
                    unmapped += 1;
                    cells.extend(std::iter::repeat_n(String::new(), d));
                }
            }
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        write_atomic(&out.join("map.csv"), text.as_bytes())?;
        results["unmapped_rows"] = json!(unmapped);
    }
    Ok(results)
}

fn compare_task(cfg: &mut RunConfig, out: &Path) -> CliResult<Value> {
    let (problem, mmd) = solve_mmd_into(cfg, &out.join("mmd"))?;

    let cost = cost_points(problem.source.points().view(), problem.target.points().view(), &cfg.cost)?;
    let mut kl_problem = KlUotProblem::new(
        problem.source.clone(),
        problem.target.clone(),
        cost,
        cfg.kl.lambda1,
        cfg.kl.lambda2,
        cfg.kl.epsilon,
    );
    kl_problem.max_iters = cfg.kl.max_iters;
    kl_problem.tol = cfg.kl.tol;
    kl_problem.domain = cfg.kl.domain;
    kl_problem.normalize_cost = cfg.kl.normalize_cost;
    let kl = solve_kl_uot(&kl_problem)?;
    let kl_dir = out.join("kl");
    write_plan(&kl_dir, kl.plan.alpha(), cfg.heatmap)?;
    write_marginals(&kl_dir, kl.plan.alpha(), problem.source.weights(), problem.target.weights())?;

    let mut table = String::from(
        "method,loss_value,cost_term,residual_row,residual_col,residual_kind,plan_mass,sparsity,row_support,min_entry\n",
    );
    for (name, kind, rep) in [("mmd_uot", "mmd", &mmd), ("kl_uot", "kl", &kl)] {
        let a = rep.plan.alpha();
        writeln!(
            table,
            "{name},{},{},{},{},{kind},{},{},{},{}",
            format_f64(rep.loss_value),
            format_f64(rep.cost_term),
            format_f64(rep.marginal_residuals.0),
            format_f64(rep.marginal_residuals.1),
            format_f64(a.sum()),
            format_f64(rep.sparsity()),
            row_support(a),
            format_f64(a.iter().copied().fold(f64::INFINITY, f64::min)),
        )
        .expect("writing to a string");
    }
    write_atomic(&out.join("comparison.csv"), table.as_bytes())?;
    Ok(json!({
        "mmd_uot": report_json(&mmd),
        "kl_uot": report_json(&kl),
        "source_support": problem.source.len(),
        "kl_full_support": kl.plan.alpha().iter().all(|&v| v > 0.0),
    }))
}

fn barycenter_task(cfg: &mut RunConfig, out: &Path) -> CliResult<Value> {
    if cfg.inputs.is_empty() {
        return Err(CliError::Config("this task needs `inputs`".into()));
    }
    let inputs = cfg.inputs.iter().map(load_measure).collect::<CliResult<Vec<_>>>()?;
    let k = inputs.len();
    let rho = Array1::from(cfg.rho.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]));
    cfg.rho = Some(rho.to_vec());
    let pts: Vec<&Array2<f64>> = inputs.iter().map(|m| m.points()).collect();
    let kernel = resolve_kernel(cfg, &pts)?;
    let problem = BarycenterProblem::new(inputs, rho, kernel, cfg.cost, cfg.lambda1, cfg.lambda2, cfg.constraint)?;
    let result = solve_barycenter(&problem, &cfg.solver)?;
    for (j, plan) in result.plans.iter().enumerate() {
        write_matrix_csv(&out.join(format!("plan_{j}.csv")), plan.alpha())?;
        if cfg.heatmap {
            write_matrix_csv(&out.join(format!("heatmap_{j}.csv")), &min_max_normalize(plan.alpha()))?;
        }
    }
    let u = &result.union_support;
    let mut table = Array2::zeros((u.nrows(), u.ncols() + 1));
    table.slice_mut(ndarray::s![.., ..u.ncols()]).assign(u);
    table.column_mut(u.ncols()).assign(&result.barycenter_weights);
    let header: Vec<String> = (0..u.ncols()).map(|k| format!("x{k}")).chain(["weight".to_string()]).collect();
    write_table_csv(&out.join("barycenter.csv"), &header, &table)?;
    Ok(json!({
        "objective_trace": result.objective_trace.values,
        "converged": result.objective_trace.converged,
        "iterations_used": result.objective_trace.iterations_used,
        "barycenter_weights": result.barycenter_weights.to_vec(),
        "barycenter_mass": result.barycenter_weights.sum(),
        "union_support_size": u.nrows(),
    }))
}

fn ratio_task(cfg: &mut RunConfig, out: &Path) -> CliResult<Value> {
    let (train, test, names, truth): (LabeledDataset, Array2<f64>, Vec<String>, Option<f64>) =
        match require(&cfg.ratio_data, "ratio_data")? {
            RatioInput::Csv { train, test } => {
                let (data, names) = load_labeled_csv(train)?;
                let test = load_points_csv(test, 1.0)?.points().clone();
                (data, test, names, None)
            }
            RatioInput::TwoGaussians { seed, train_size, train_ratio, test_size, test_ratio, separation } => {
                let (data, test) = TwoGaussians { separation: *separation }.ratio_instance(
                    *seed,
                    (*train_size, *train_ratio),
                    (*test_size, *test_ratio),
                )?;
                (data, test, vec!["0".into(), "1".into()], Some(*test_ratio))
            }
        };
    let settings = &cfg.ratio;
    let mut rcfg = RatioConfig {
        solver: cfg.solver.clone(),
        max_rounds: settings.max_rounds,
        theta_tol: settings.theta_tol,
        theta_step_tol: settings.theta_step_tol,
        z_floor: settings.z_floor,
        sinkhorn_max_iters: settings.sinkhorn_max_iters,
        sinkhorn_tol: settings.sinkhorn_tol,
        normalize_cost: false,
    };
    let (ratio, rep) = match settings.estimator {
        Estimator::Mmd => {
            let kernel = resolve_kernel(cfg, &[train.points(), &test])?;
            estimate_ratio_mmd(
                &train,
                &test,
                &kernel,
                &cfg.cost,
                (cfg.lambda1, cfg.lambda2),
                &rcfg,
                cfg.parameterization,
            )?
        }
        Estimator::Kl => {
            rcfg.normalize_cost = cfg.kl.normalize_cost;
            estimate_ratio_kl(&train, &test, &cfg.cost, (cfg.kl.lambda1, cfg.kl.lambda2), cfg.kl.epsilon, &rcfg)?
        }
    };
    write_plan(out, rep.plan.alpha(), cfg.heatmap)?;
    let mut results = report_json(&rep);
    results["theta"] = json!(ratio.theta().to_vec());
    results["class_names"] = json!(names);
    results["class_counts"] = json!(train.class_counts());
    if let Some(t) = truth {
        results["true_theta_0"] = json!(t);
        results["abs_deviation"] = json!((ratio.theta()[0] - t).abs());
    }
    Ok(results)
}
