use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ipm_ot_cli::{load_config, run, CliError, Task};

/// Unbalanced optimal transport with MMD regularization.
#[derive(Debug, Parser)]
#[command(name = "ipm-ot", version)]
struct Cli {
    /// Task to run.
    #[arg(value_enum)]
    task: Task,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, default_value = "info")]
    log_level: String,
    /// Override any configuration field, e.g. `--set lambda1=10 --set solver.max_iters=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.config, &cli.overrides)?;
    cfg.task = Some(cli.task);
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let report = run(&cfg)?;
    log::info!(
        "wrote {} (wall time {:.3} s)",
        cfg.out_dir.join("report.json").display(),
        report["wall_time_s"].as_f64().unwrap_or(0.0)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
