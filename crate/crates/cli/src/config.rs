//! Run configuration. Every field has a default, and the resolved configuration (defaults
//! filled in, kernel rate chosen, paths made absolute) is echoed into `report.json`.

use std::path::{Path, PathBuf};

use ipm_ot_core::kernels::{CostSpec, GroundCost};
use ipm_ot_core::kl_uot::SinkhornDomain;
use ipm_ot_core::optim::SolverConfig;
use ipm_ot_core::uot::Parameterization;
use ipm_ot_core::ConstraintMode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Task {
    Solve,
    Barycenter,
    ClassRatio,
    Map,
    Compare,
}

/// Where a measure comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureInput {
    /// Point file; `total_mass` applies when it has no weight column.
    Csv {
        path: PathBuf,
        #[serde(default = "one")]
        total_mass: f64,
    },
    /// Discretized Gaussian on the grid `0..n`.
    GaussianGrid { n: usize, mean: f64, std: f64, mass: f64 },
}

/// Data of a class-ratio run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RatioInput {
    /// Labeled training file (with a `label` column) and unlabeled test file.
    Csv { train: PathBuf, test: PathBuf },
    /// Two unit-covariance Gaussian classes in the plane; `*_ratio` is the class-0 fraction.
    TwoGaussians {
        seed: u64,
        train_size: usize,
        train_ratio: f64,
        test_size: usize,
        test_ratio: f64,
        #[serde(default = "four")]
        separation: f64,
    },
}

/// Exactly one of `gamma` (rate) and `sigma` (bandwidth, `gamma = 1 / (2 sigma^2)`) may be
/// given. With neither, the median heuristic over all input points picks the rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub gamma: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlConfig {
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub normalize_cost: bool,
    pub max_iters: usize,
    pub tol: f64,
    pub domain: SinkhornDomain,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            normalize_cost: false,
            max_iters: 200_000,
            tol: 1e-9,
            domain: SinkhornDomain::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Mmd,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioSettings {
    pub estimator: Estimator,
    pub max_rounds: usize,
    pub theta_tol: f64,
    pub theta_step_tol: f64,
    pub z_floor: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for RatioSettings {
    fn default() -> Self {
        let d = ipm_ot_core::class_ratio::RatioConfig::default();
        Self {
            estimator: Estimator::Mmd,
            max_rounds: d.max_rounds,
            theta_tol: d.theta_tol,
            theta_step_tol: d.theta_step_tol,
            z_floor: d.z_floor,
            sinkhorn_max_iters: d.sinkhorn_max_iters,
            sinkhorn_tol: d.sinkhorn_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub source: Option<MeasureInput>,
    pub target: Option<MeasureInput>,
    /// Barycenter inputs.
    pub inputs: Vec<MeasureInput>,
    /// Barycenter weights; uniform when absent.
    pub rho: Option<Vec<f64>>,
    pub ratio_data: Option<RatioInput>,
    pub kernel: KernelConfig,
    pub cost: CostSpec,
    pub lambda1: f64,
    pub lambda2: f64,
    pub q: f64,
    pub constraint: ConstraintMode,
    pub parameterization: Parameterization,
    pub solver: SolverConfig,
    pub kl: KlConfig,
    pub ratio: RatioSettings,
    /// Also write min-max normalized copies of the plans.
    pub heatmap: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            source: None,
            target: None,
            inputs: Vec::new(),
            rho: None,
            ratio_data: None,
            kernel: KernelConfig::default(),
            cost: CostSpec { ground: GroundCost::SquaredEuclidean, p: 1.0 },
            lambda1: 1.0,
            lambda2: 1.0,
            q: 2.0,
            constraint: ConstraintMode::NonNegative,
            parameterization: Parameterization::Standard,
            solver: SolverConfig::default(),
            kl: KlConfig::default(),
            ratio: RatioSettings::default(),
            heatmap: true,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn four() -> f64 {
    4.0
}

/// Sets `key` (dotted for nested fields) in a JSON object. The value is read as JSON when it
/// parses and as a plain string otherwise, so `--set lambda1=10` and `--set out_dir=runs/a`
/// both work.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty segment in override key {key:?}")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!("{key:?}: {part:?} is inside a non-object value")));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parses a configuration document after applying overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> CliResult<RunConfig> {
    let mut doc: Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    if !doc.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))
}

/// Reads a configuration file; relative input paths are taken relative to its directory.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = parse_config(&text, overrides)?;
    let base = path.parent().unwrap_or(Path::new(""));
    cfg.resolve_paths(base);
    Ok(cfg)
}

impl RunConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in self.source.iter_mut().chain(self.target.iter_mut()).chain(self.inputs.iter_mut()) {
            if let MeasureInput::Csv { path, .. } = m {
                fix(path);
            }
        }
        if let Some(RatioInput::Csv { train, test }) = &mut self.ratio_data {
            fix(train);
            fix(test);
        }
    }

    /// Checks bounds that serde cannot express.
    pub fn validate(&self) -> CliResult<()> {
        if self.kernel.gamma.is_some() && self.kernel.sigma.is_some() {
            return Err(CliError::Config("give kernel.gamma or kernel.sigma, not both".into()));
        }
        self.cost.validate()?;
        self.solver.validate()?;
        ipm_ot_core::uot::MmdPower::from_q(self.q)?;
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}
