use std::path::PathBuf;

use clap::Args;
use dmpc_core::engine::{run_transition, Strategy};
use dmpc_core::trajectory_csv::write_trajectory_csv;

use crate::common::{engine_config, load_overrides, load_scenario, write_atomic, CliError, ResultsFile, TrialRecord, EXIT_FAILED, EXIT_OK};

#[derive(Args)]
pub struct SolveArgs {
    /// Scenario file.
    pub scenario: PathBuf,
    #[arg(long, default_value = "soft-on-demand")]
    pub strategy: Strategy,
    /// Concurrent agent clusters; 1 runs the agents sequentially.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub clusters: u64,
    /// Retime the result to the acceleration limit.
    #[arg(long)]
    pub scale: bool,
    /// Seed for tie-breaking perturbations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON or TOML file overriding scenario parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving `trajectory.csv` and `metrics.json`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn run(args: SolveArgs) -> Result<u8, CliError> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(path) = &args.config {
        let overrides = load_overrides(path)?;
        scenario = scenario
            .with_overrides(&overrides)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    let clusters = args.clusters as usize;
    let config = engine_config(args.strategy, clusters, args.scale, args.seed);
    let result = run_transition(&scenario, &config).map_err(|e| CliError::input(e.to_string()))?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let csv_path = args.out_dir.join("trajectory.csv");
    let mut csv = Vec::new();
    write_trajectory_csv(&result.interpolated, &mut csv).map_err(|e| CliError::io(&csv_path, e))?;
    write_atomic(&csv_path, &csv)?;

    let record = TrialRecord::from_result(scenario.id.clone(), &scenario, args.strategy, clusters, args.scale, &result);
    let metrics = record.metrics.clone().expect("set from a result");
    let file = ResultsFile::new(vec![record], |t| t.key.clone());
    write_atomic(&args.out_dir.join("metrics.json"), file.to_json().as_bytes())?;

    match metrics.failure {
        None => {
            println!(
                "success: {} agents, transition time {:.2} s, min scaled distance {:.4}, distance ratio {:.4}",
                scenario.len(),
                metrics.transition_time.unwrap_or(f64::NAN),
                metrics.min_scaled_distance,
                metrics.distance_ratio.unwrap_or(1.0)
            );
            Ok(EXIT_OK)
        }
        Some(reason) => {
            println!("failure: {reason} after {} steps", metrics.steps);
            Ok(EXIT_FAILED)
        }
    }
}
