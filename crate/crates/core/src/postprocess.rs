//! Trajectory post-processing: uniform time scaling, zero-order-hold
//! interpolation, and the final pairwise safety check.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::model::scaled_norm;

/// Discrete trajectory of one agent. `positions` and `velocities` have one
/// more entry than `accelerations`: the state after the last input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub accelerations: Vec<Vector3<f64>>,
}

impl AgentTrajectory {
    pub fn steps(&self) -> usize {
        self.accelerations.len()
    }
}

/// Discrete trajectories of the fleet on a shared time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetTrajectory {
    /// Spacing of the grid, seconds.
    pub step: f64,
    pub agents: Vec<AgentTrajectory>,
}

impl FleetTrajectory {
    pub fn steps(&self) -> usize {
        self.agents.first().map_or(0, AgentTrajectory::steps)
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.step
    }

    /// Largest acceleration component over all agents and steps.
    pub fn peak_acceleration(&self) -> f64 {
        self.agents
            .iter()
            .flat_map(|a| a.accelerations.iter())
            .map(|a| a.amax())
            .fold(0.0, f64::max)
    }
}

/// Retimes the whole fleet by a common factor `gamma = sqrt(limit / peak)` so
/// that the peak acceleration component reaches `a_limit`. Only speeds up;
/// returns the input unchanged (and `gamma = 1`) otherwise.
pub fn scale_trajectory(fleet: &FleetTrajectory, a_limit: f64) -> (FleetTrajectory, f64) {
    let peak = fleet.peak_acceleration();
    if !(peak > 0.0) || !(a_limit > 0.0) {
        return (fleet.clone(), 1.0);
    }
    let gamma = (a_limit / peak).sqrt();
    if gamma <= 1.0 {
        return (fleet.clone(), 1.0);
    }
    let agents = fleet
        .agents
        .iter()
        .map(|a| AgentTrajectory {
            positions: a.positions.clone(),
            velocities: a.velocities.iter().map(|v| v * gamma).collect(),
            accelerations: a.accelerations.iter().map(|acc| acc * (gamma * gamma)).collect(),
        })
        .collect();
    (
        FleetTrajectory {
            step: fleet.step / gamma,
            agents,
        },
        gamma,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

/// Fleet trajectory resampled at a fine, uniform spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedTrajectory {
    pub ts: f64,
    pub agents: Vec<Vec<TrajectorySample>>,
}

impl InterpolatedTrajectory {
    pub fn samples(&self) -> usize {
        self.agents.first().map_or(0, Vec::len)
    }

    /// Sum over agents of the polyline length through the samples.
    pub fn travelled_distance(&self) -> f64 {
        self.agents
            .iter()
            .map(|s| s.windows(2).map(|w| (w[1].p - w[0].p).norm()).sum::<f64>())
            .sum()
    }
}

fn sample_at(traj: &AgentTrajectory, interval: usize, tau: f64, t: f64) -> TrajectorySample {
    let last = traj.steps();
    if interval >= last {
        return TrajectorySample {
            t,
            p: traj.positions[last],
            v: traj.velocities[last],
            a: traj.accelerations.last().copied().unwrap_or_else(Vector3::zeros),
        };
    }
    let a = traj.accelerations[interval];
    let p0 = traj.positions[interval];
    let v0 = traj.velocities[interval];
    TrajectorySample {
        t,
        p: p0 + v0 * tau + a * (0.5 * tau * tau),
        v: v0 + a * tau,
        a,
    }
}

/// Holds each acceleration constant over its interval and integrates the
/// double integrator exactly at spacing `ts`.
///
/// When `ts` divides the grid step, samples at grid times reproduce the grid
/// states exactly. Otherwise (a retimed fleet) the uniform samples are
/// followed by one extra sample at the final time.
pub fn interpolate(fleet: &FleetTrajectory, ts: f64) -> InterpolatedTrajectory {
    let steps = fleet.steps();
    let ratio = fleet.step / ts;
    let sub = ratio.round();
    let aligned = (ratio - sub).abs() <= 1e-9 * ratio.max(1.0) && sub >= 1.0;
    let agents = fleet
        .agents
        .iter()
        .map(|traj| {
            if aligned {
                let sub = sub as usize;
                (0..=steps * sub)
                    .map(|m| {
                        let (interval, rem) = (m / sub, m % sub);
                        sample_at(traj, interval, rem as f64 * ts, m as f64 * ts)
                    })
                    .collect()
            } else {
                let duration = fleet.duration();
                let count = (duration / ts + 1e-9).floor() as usize;
                let mut out: Vec<TrajectorySample> = (0..=count)
                    .map(|m| {
                        let t = m as f64 * ts;
                        let interval = ((t / fleet.step) as usize).min(steps);
                        let tau = t - interval as f64 * fleet.step;
                        sample_at(traj, interval, tau, t)
                    })
                    .collect();
                if duration - count as f64 * ts > 1e-9 {
                    out.push(sample_at(traj, steps, 0.0, duration));
                }
                out
            }
        })
        .collect();
    InterpolatedTrajectory { ts, agents }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub agents: (usize, usize),
    pub sample: usize,
    pub t: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub passed: bool,
    /// Smallest scaled pairwise distance over all samples.
    pub min_scaled_distance: f64,
    /// Earliest sample (then lowest pair) below the threshold.
    pub first_violation: Option<Violation>,
}

/// Brute-force pairwise scan of every sample against `r_min - eps_check`.
/// Cost is `O(N^2 * samples)`.
pub fn check_collisions(
    traj: &InterpolatedTrajectory,
    r_min: f64,
    eps_check: f64,
    ellipsoid_c: f64,
    degree: u32,
) -> CollisionReport {
    let threshold = r_min - eps_check;
    let n = traj.agents.len();
    let samples = traj.samples();
    let mut min_d = f64::INFINITY;
    let mut first = None;
    for s in 0..samples {
        for i in 0..n {
            for j in i + 1..n {
                let d = scaled_norm(&(traj.agents[i][s].p - traj.agents[j][s].p), ellipsoid_c, degree);
                min_d = min_d.min(d);
                if first.is_none() && d < threshold {
                    first = Some(Violation {
                        agents: (i, j),
                        sample: s,
                        t: traj.agents[i][s].t,
                        distance: d,
                    });
                }
            }
        }
    }
    CollisionReport {
        passed: first.is_none(),
        min_scaled_distance: min_d,
        first_violation: first,
    }
}
