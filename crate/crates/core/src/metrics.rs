//! Per-run metrics and their aggregation over benchmark trials.

use serde::{Deserialize, Serialize};

use crate::engine::{check_goal, FailureReason, TransitionResult};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub success: bool,
    pub failure: Option<FailureReason>,
    /// Seconds until every agent is first inside its goal ball, after retiming.
    pub transition_time: Option<f64>,
    /// Seconds spent in the engine loop.
    pub wall_time: f64,
    /// Sum over agents of the interpolated path length, meters.
    pub total_distance: f64,
    pub straight_line_distance: f64,
    /// `total_distance / straight_line_distance`, absent when nobody moves.
    pub distance_ratio: Option<f64>,
    pub min_scaled_distance: f64,
    /// Distance from each agent's final position to its goal, meters.
    pub goal_errors: Vec<f64>,
    pub steps: usize,
    pub time_scale: f64,
    pub qp_failures: usize,
}

pub fn compute_metrics(result: &TransitionResult, scenario: &Scenario) -> RunMetrics {
    let goals = scenario.goals();
    let discrete = &result.discrete;
    let transition_time = (0..=discrete.steps())
        .find(|&k| {
            let pos: Vec<_> = discrete.agents.iter().map(|a| a.positions[k]).collect();
            check_goal(&pos, &goals, scenario.algo.goal_tol)
        })
        .map(|k| k as f64 * discrete.step / result.time_scale);
    let goal_errors = result
        .interpolated
        .agents
        .iter()
        .zip(&goals)
        .map(|(samples, g)| samples.last().map_or(f64::NAN, |s| (s.p - g).norm()))
        .collect();
    let straight = scenario.straight_line_distance();
    RunMetrics {
        success: result.success,
        failure: result.failure,
        transition_time,
        wall_time: result.wall_time.as_secs_f64(),
        total_distance: result.metrics.total_distance,
        straight_line_distance: straight,
        distance_ratio: (straight > 0.0).then(|| result.metrics.total_distance / straight),
        min_scaled_distance: result.metrics.min_scaled_distance,
        goal_errors,
        steps: result.steps,
        time_scale: result.time_scale,
        qp_failures: result.qp_failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    pub mean_wall_time: Option<f64>,
    /// Sample standard deviation.
    pub std_wall_time: Option<f64>,
    /// Mean over successful trials.
    pub mean_distance_ratio: Option<f64>,
}

pub fn aggregate<'a>(runs: impl IntoIterator<Item = &'a RunMetrics>) -> Aggregate {
    let runs: Vec<&RunMetrics> = runs.into_iter().collect();
    let n = runs.len();
    let successes = runs.iter().filter(|r| r.success).count();
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let walls: Vec<f64> = runs.iter().map(|r| r.wall_time).collect();
    let mean_wall = mean(&walls);
    let std_wall = mean_wall.map(|m| {
        if n < 2 {
            0.0
        } else {
            (walls.iter().map(|w| (w - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        }
    });
    let ratios: Vec<f64> = runs
        .iter()
        .filter(|r| r.success)
        .filter_map(|r| r.distance_ratio)
        .collect();
    Aggregate {
        trials: n,
        successes,
        success_rate: (n > 0).then(|| successes as f64 / n as f64),
        mean_wall_time: mean_wall,
        std_wall_time: std_wall,
        mean_distance_ratio: mean(&ratios),
    }
}
