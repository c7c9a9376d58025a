use std::fs::File;
use std::path::PathBuf;

use clap::Args;
use dmpc_core::postprocess::check_collisions;
use dmpc_core::trajectory_csv::{read_trajectory_csv, CsvError};

use crate::common::{load_scenario, CliError, EXIT_FAILED, EXIT_OK};

#[derive(Args)]
pub struct CheckArgs {
    /// Trajectory CSV.
    pub trajectory: PathBuf,
    /// Scenario the trajectory was planned for.
    pub scenario: PathBuf,
}

pub fn run(args: CheckArgs) -> Result<u8, CliError> {
    let scenario = load_scenario(&args.scenario)?;
    let file = File::open(&args.trajectory).map_err(|e| CliError::io(&args.trajectory, e))?;
    let traj = read_trajectory_csv(file).map_err(|e| match e {
        CsvError::Io(e) => CliError::io(&args.trajectory, e),
        e => CliError::input(format!("{}: {e}", args.trajectory.display())),
    })?;
    if traj.agents.len() != scenario.len() {
        return Err(CliError::input(format!(
            "{} has {} agents, scenario has {}",
            args.trajectory.display(),
            traj.agents.len(),
            scenario.len()
        )));
    }
    let (phys, algo) = (&scenario.phys, &scenario.algo);
    let report = check_collisions(&traj, phys.r_min, algo.eps_check, phys.ellipsoid_c, phys.degree);
    let mut passed = true;
    if let Some(v) = report.first_violation {
        passed = false;
        println!(
            "FAIL collision: agents {} and {} at t = {:.4} s, scaled distance {:.6} < {:.6}",
            v.agents.0,
            v.agents.1,
            v.t,
            v.distance,
            phys.r_min - algo.eps_check
        );
    }
    for (i, (samples, spec)) in traj.agents.iter().zip(&scenario.agents).enumerate() {
        let end = samples.last().expect("reader rejects empty agents").p;
        let err = (end - spec.goal).norm();
        if err > algo.goal_tol {
            passed = false;
            println!("FAIL goal: agent {i} ends {err:.4} m from its goal (tolerance {})", algo.goal_tol);
        }
    }
    if passed {
        println!(
            "PASS: {} agents, {} samples, min scaled distance {:.6}",
            traj.agents.len(),
            traj.samples(),
            report.min_scaled_distance
        );
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_FAILED)
    }
}
