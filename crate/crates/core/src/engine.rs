//! The receding-horizon transition loop.
//!
//! Every engine step, each agent checks the shared predictions for its first
//! upcoming collision, builds and solves its QP, applies the first input and
//! publishes its new predicted positions. Agents are processed either one
//! after another with in-place prediction updates, or in clusters that run
//! concurrently on private copies of the prediction buffer and exchange their
//! updates at a barrier at the end of the step.

use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    detect_first_collision, linearize_collision_constraint, neighbors_at, physical_row_index, CollisionEvent,
    CollisionRow, QpAssembler,
};
use crate::model::{init_predictions, AgentState, AlgoParams, ModelError, PhysParams, PredictionHorizon};
use crate::postprocess::{
    check_collisions, interpolate, scale_trajectory, AgentTrajectory, CollisionReport, FleetTrajectory,
    InterpolatedTrajectory,
};
use crate::qp::{QpStatus, RowKind, SolverSettings};
use crate::scenario::{Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid engine configuration: {0}")]
    Config(String),
}

/// How collision avoidance enters each agent's QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Relaxed rows for the first predicted collision only.
    SoftOnDemand,
    /// Exact rows for the first predicted collision only.
    HardOnDemand,
    /// Exact rows for every neighbor at every horizon step.
    HardFullHorizon,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SoftOnDemand, Strategy::HardOnDemand, Strategy::HardFullHorizon];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SoftOnDemand => "soft-on-demand",
            Strategy::HardOnDemand => "hard-on-demand",
            Strategy::HardFullHorizon => "hard-full-horizon",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('-', "_") == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Sequential,
    /// Agents split round-robin into this many concurrently solved clusters.
    Clustered(usize),
}

/// Growth of the relaxation bound after an infeasible soft QP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub growth: f64,
    pub max_retries: u32,
}

impl Default for Escalation {
    fn default() -> Self {
        Escalation {
            growth: 2.0,
            max_retries: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub strategy: Strategy,
    pub mode: ExecutionMode,
    pub escalation: Escalation,
    /// Seeds the perturbation applied to coincident predictions.
    pub seed: u64,
    /// Retime the finished trajectory to the acceleration limit.
    pub scale: bool,
    pub solver: SolverSettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            strategy: Strategy::SoftOnDemand,
            mode: ExecutionMode::Sequential,
            escalation: Escalation::default(),
            seed: 0,
            scale: false,
            solver: SolverSettings::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if let ExecutionMode::Clustered(0) = self.mode {
            return Err(EngineError::Config("cluster count must be at least 1".into()));
        }
        if !(self.escalation.growth > 1.0) {
            return Err(EngineError::Config("escalation growth must exceed 1".into()));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(EngineError::Config("solver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    CollisionCheckFailed,
    QpUnrecoverable,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureReason::Timeout => "timeout",
            FailureReason::CollisionCheckFailed => "collision_check_failed",
            FailureReason::QpUnrecoverable => "qp_unrecoverable",
        })
    }
}

/// Outcome of one agent's QP at one engine step.
#[derive(Debug, Clone)]
pub struct AgentSolve {
    /// Optimal input sequence, `None` when no solution was found.
    pub inputs: Option<Vec<Vector3<f64>>>,
    /// Number of collision rows in the problem.
    pub n_c: usize,
    /// Most negative relaxation used (0 when none).
    pub min_eps: f64,
    /// Times the relaxation bound was enlarged.
    pub escalations: u32,
    /// Labels of the active rows at the solution.
    pub active: Vec<RowKind>,
    pub status: Option<QpStatus>,
    /// Largest KKT residual of the accepted solution.
    pub kkt_max: f64,
    /// Active-set iterations summed over all attempts.
    pub iterations: usize,
}

/// Per-agent, per-step record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentDiagnostics {
    pub n_c: usize,
    pub min_eps: f64,
    pub escalations: u32,
    pub qp_failed: bool,
    pub kkt_max: f64,
    pub iterations: usize,
    pub solve_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub agents: Vec<AgentDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionMetrics {
    pub total_distance: f64,
    /// Time at which every agent was first within `goal_tol` of its goal.
    pub transition_time: Option<f64>,
    pub min_scaled_distance: f64,
}

#[derive(Debug, Clone)]
pub struct TransitionResult {
    pub success: bool,
    pub failure: Option<FailureReason>,
    /// Engine steps taken.
    pub steps: usize,
    /// Trajectories on the planner grid, before any retiming.
    pub discrete: FleetTrajectory,
    /// Retiming factor applied before interpolation (1 when unscaled).
    pub time_scale: f64,
    pub interpolated: InterpolatedTrajectory,
    pub diagnostics: Vec<StepDiagnostics>,
    pub collision: CollisionReport,
    pub metrics: TransitionMetrics,
    /// Wall time of the engine loop only.
    pub wall_time: Duration,
    /// QP solves that produced no solution.
    pub qp_failures: usize,
}

/// True iff every agent is within `goal_tol` (inclusive) of its goal.
pub fn check_goal(positions: &[Vector3<f64>], goals: &[Vector3<f64>], goal_tol: f64) -> bool {
    positions.iter().zip(goals).all(|(p, g)| (p - g).norm() <= goal_tol)
}

/// What one agent plans and publishes.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlan {
    pub state: AgentState,
    /// Planned accelerations over the horizon.
    pub inputs: Vec<Vector3<f64>>,
    /// Active rows of the last solve, reused to warm start the next one.
    pub active: Vec<RowKind>,
}

/// Result of advancing one agent by one engine step.
#[derive(Debug, Clone)]
pub struct AgentStep {
    pub plan: AgentPlan,
    pub prediction: PredictionHorizon,
    pub diagnostics: AgentDiagnostics,
    /// The soft strategy ran out of escalation retries.
    pub unrecoverable: bool,
}

pub struct Engine {
    assembler: QpAssembler,
    config: EngineConfig,
}

impl Engine {
    pub fn new(phys: &PhysParams, algo: &AlgoParams, config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Engine {
            assembler: QpAssembler::new(phys, algo)?,
            config,
        })
    }

    pub fn phys(&self) -> &PhysParams {
        self.assembler.phys()
    }

    pub fn algo(&self) -> &AlgoParams {
        self.assembler.algo()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn assembler(&self) -> &QpAssembler {
        &self.assembler
    }

    /// Linearizes `event`, nudging the agent's own prediction by a seeded
    /// 1 um offset when it coincides with the neighbor's.
    fn linearize(&self, event: &CollisionEvent, step_index: usize) -> CollisionRow {
        match linearize_collision_constraint(event, self.phys()) {
            Ok(row) => row,
            Err(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.config.seed
                        ^ (step_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        ^ (event.agent as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
                        ^ (event.neighbor as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
                        ^ event.step as u64,
                );
                let mut dir = Vector3::zeros();
                while dir.norm() < 1e-3 {
                    dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                }
                let mut nudged = event.clone();
                nudged.own_pos += dir.normalize() * 1e-6;
                nudged.xi = self.phys().scaled_distance(&nudged.own_pos, &nudged.neighbor_pos);
                linearize_collision_constraint(&nudged, self.phys())
                    .expect("a nudged prediction is separated from its neighbor")
            }
        }
    }

    fn warm_rows(&self, previous: &[RowKind]) -> Vec<usize> {
        let horizon = self.algo().horizon;
        previous
            .iter()
            .filter_map(|kind| {
                // The previous plan is one step further along the horizon.
                let shifted = match *kind {
                    RowKind::PositionMax { step, axis } if step > 1 => RowKind::PositionMax { step: step - 1, axis },
                    RowKind::PositionMin { step, axis } if step > 1 => RowKind::PositionMin { step: step - 1, axis },
                    RowKind::InputMax { step, axis } if step > 0 => RowKind::InputMax { step: step - 1, axis },
                    RowKind::InputMin { step, axis } if step > 0 => RowKind::InputMin { step: step - 1, axis },
                    _ => return None,
                };
                physical_row_index(&shifted, horizon)
            })
            .collect()
    }

    /// Builds and solves agent `agent`'s QP against the visible predictions.
    pub fn build_and_solve_qp(
        &self,
        agent: usize,
        state: &AgentState,
        goal: &Vector3<f64>,
        predictions: &[PredictionHorizon],
        step_index: usize,
        warm: &[RowKind],
    ) -> AgentSolve {
        let phys = self.phys();
        let algo = self.algo();
        let n = 3 * algo.horizon;
        let warm_rows = self.warm_rows(warm);
        let solve = |problem: &crate::qp::QpProblem| {
            self.assembler
                .solve(problem, &self.config.solver, Some(&warm_rows))
                .expect("assembled problems are well formed and strictly convex")
        };
        let accept = |problem: &crate::qp::QpProblem, n_c: usize, escalations: u32| {
            let sol = solve(problem);
            let optimal = sol.is_optimal();
            let min_eps = (n..sol.u.len()).map(|i| sol.u[i]).fold(0.0, f64::min);
            AgentSolve {
                inputs: optimal.then(|| (0..algo.horizon).map(|k| sol.u.fixed_rows::<3>(3 * k).into_owned()).collect()),
                n_c,
                min_eps,
                escalations,
                active: if optimal {
                    sol.active.iter().map(|&r| problem.labels[r]).collect()
                } else {
                    Vec::new()
                },
                status: Some(sol.status),
                kkt_max: sol.kkt.max(),
                iterations: sol.iterations,
            }
        };

        match self.config.strategy {
            Strategy::SoftOnDemand => {
                let Some(set) = detect_first_collision(agent, predictions, phys, algo) else {
                    return accept(&self.assembler.build_plain_qp(state, goal), 0, 0);
                };
                let rows: Vec<CollisionRow> = set.members.iter().map(|ev| self.linearize(ev, step_index)).collect();
                let mut eps_max = algo.eps_max;
                let mut last = None;
                let mut iterations = 0;
                for attempt in 0..=self.config.escalation.max_retries {
                    let problem = self.assembler.build_augmented_qp(state, goal, &rows, eps_max);
                    let mut out = accept(&problem, rows.len(), attempt);
                    iterations += out.iterations;
                    out.iterations = iterations;
                    if out.inputs.is_some() {
                        return out;
                    }
                    last = Some(out);
                    eps_max *= self.config.escalation.growth;
                }
                last.expect("at least one attempt")
            }
            Strategy::HardOnDemand => {
                let rows: Vec<CollisionRow> = detect_first_collision(agent, predictions, phys, algo)
                    .map(|set| set.members.iter().map(|ev| self.linearize(ev, step_index)).collect())
                    .unwrap_or_default();
                accept(&self.assembler.build_hard_qp(state, goal, &rows), rows.len(), 0)
            }
            Strategy::HardFullHorizon => {
                let rows: Vec<CollisionRow> = (1..=algo.horizon)
                    .flat_map(|k| neighbors_at(agent, predictions, k, phys, algo))
                    .map(|ev| self.linearize(&ev, step_index))
                    .collect();
                accept(&self.assembler.build_hard_qp(state, goal, &rows), rows.len(), 0)
            }
        }
    }

    /// Shifts the previous plan by one step and appends the input that best
    /// brings the agent to rest.
    fn fallback_inputs(&self, plan: &AgentPlan) -> Vec<Vector3<f64>> {
        let phys = self.phys();
        let mut inputs: Vec<Vector3<f64>> = plan.inputs.iter().skip(1).copied().collect();
        let (_, states) = PredictionHorizon::propagate(&plan.state, &inputs, phys.h);
        let v_end = states.last().map_or(plan.state.v, |s| s.v);
        let brake = Vector3::from_fn(|k, _| (-v_end[k] / phys.h).clamp(phys.a_min[k], phys.a_max[k]));
        inputs.push(brake);
        inputs
    }

    /// Advances one agent: solve, apply the first input, predict the horizon.
    pub fn step_agent(
        &self,
        agent: usize,
        plan: &AgentPlan,
        goal: &Vector3<f64>,
        predictions: &[PredictionHorizon],
        step_index: usize,
    ) -> AgentStep {
        let started = Instant::now();
        let solve = self.build_and_solve_qp(agent, &plan.state, goal, predictions, step_index, &plan.active);
        let elapsed = started.elapsed();
        let qp_failed = solve.inputs.is_none();
        let unrecoverable = qp_failed && self.config.strategy == Strategy::SoftOnDemand;
        let (inputs, active) = match solve.inputs {
            Some(u) => (u, solve.active),
            None => (self.fallback_inputs(plan), Vec::new()),
        };
        let (prediction, states) = PredictionHorizon::propagate(&plan.state, &inputs, self.phys().h);
        AgentStep {
            plan: AgentPlan {
                state: states[0],
                inputs,
                active,
            },
            prediction,
            diagnostics: AgentDiagnostics {
                n_c: solve.n_c,
                min_eps: solve.min_eps,
                escalations: solve.escalations,
                qp_failed,
                kkt_max: if qp_failed { 0.0 } else { solve.kkt_max },
                iterations: solve.iterations,
                solve_time_us: elapsed.as_micros() as u64,
            },
            unrecoverable,
        }
    }

    /// Runs `members` in order against `buffer`, publishing each new
    /// prediction in place before the next member solves.
    ///
    /// `buffer` is indexed in the previous step's time frame (entry `k` is
    /// the position at `k_t - 1 + k`), so a fresh prediction is published
    /// shifted by one: its start position first, its last position dropped.
    fn run_members(
        &self,
        members: &[usize],
        plans: &[AgentPlan],
        goals: &[Vector3<f64>],
        buffer: &mut [PredictionHorizon],
        step_index: usize,
    ) -> Vec<(usize, AgentStep)> {
        members
            .iter()
            .map(|&i| {
                let out = self.step_agent(i, &plans[i], &goals[i], buffer, step_index);
                buffer[i] = previous_frame(&plans[i].state.p, &out.prediction);
                (i, out)
            })
            .collect()
    }

    /// One engine step with the agents split round-robin into `clusters`
    /// groups. Each group works on its own copy of `shared`; all updates are
    /// published to `shared` once every group has finished.
    pub fn run_clustered_step(
        &self,
        plans: &[AgentPlan],
        goals: &[Vector3<f64>],
        shared: &mut [PredictionHorizon],
        clusters: usize,
        step_index: usize,
    ) -> Vec<AgentStep> {
        let n = plans.len();
        let clusters = clusters.max(1);
        let groups: Vec<Vec<usize>> = (0..clusters).map(|c| (c..n).step_by(clusters).collect()).collect();
        let snapshot: &[PredictionHorizon] = shared;
        let results: Vec<Vec<(usize, AgentStep)>> = groups
            .par_iter()
            .map(|members| {
                let mut local = snapshot.to_vec();
                self.run_members(members, plans, goals, &mut local, step_index)
            })
            .collect();
        let mut out: Vec<Option<AgentStep>> = vec![None; n];
        for (i, step) in results.into_iter().flatten() {
            shared[i] = step.prediction.clone();
            out[i] = Some(step);
        }
        out.into_iter().map(|s| s.expect("every agent belongs to a cluster")).collect()
    }

    fn run_sequential_step(
        &self,
        plans: &[AgentPlan],
        goals: &[Vector3<f64>],
        shared: &mut [PredictionHorizon],
        step_index: usize,
    ) -> Vec<AgentStep> {
        let members: Vec<usize> = (0..plans.len()).collect();
        let mut view = shared.to_vec();
        let steps: Vec<AgentStep> = self
            .run_members(&members, plans, goals, &mut view, step_index)
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        for (slot, step) in shared.iter_mut().zip(&steps) {
            *slot = step.prediction.clone();
        }
        steps
    }

    /// Plans the full transition for `starts -> goals`.
    pub fn run(&self, starts: &[Vector3<f64>], goals: &[Vector3<f64>]) -> Result<TransitionResult, EngineError> {
        if starts.len() != goals.len() {
            return Err(EngineError::Config("one goal per start is required".into()));
        }
        let pool = match self.config.mode {
            ExecutionMode::Sequential => None,
            ExecutionMode::Clustered(c) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(c)
                    .build()
                    .map_err(|e| EngineError::Config(e.to_string()))?,
            ),
        };
        let phys = self.phys().clone();
        let algo = self.algo().clone();
        let n = starts.len();
        let max_steps = algo.max_steps(phys.h);

        let started = Instant::now();
        let (mut shared, states) = init_predictions(starts, goals, &phys, &algo);
        let mut plans: Vec<AgentPlan> = states
            .into_iter()
            .map(|state| AgentPlan {
                state,
                inputs: vec![Vector3::zeros(); algo.horizon],
                active: Vec::new(),
            })
            .collect();
        let mut trajectories: Vec<AgentTrajectory> = plans
            .iter()
            .map(|p| AgentTrajectory {
                positions: vec![p.state.p],
                velocities: vec![p.state.v],
                accelerations: Vec::new(),
            })
            .collect();
        let mut diagnostics = Vec::new();
        let mut qp_failures = 0;
        let mut unrecoverable = false;
        let mut at_goal = false;
        let mut step_index = 0;

        while !at_goal && step_index < max_steps {
            let steps = match (&self.config.mode, &pool) {
                (ExecutionMode::Clustered(c), Some(pool)) => {
                    pool.install(|| self.run_clustered_step(&plans, goals, &mut shared, *c, step_index))
                }
                _ => self.run_sequential_step(&plans, goals, &mut shared, step_index),
            };
            let mut diag = Vec::with_capacity(n);
            for (i, step) in steps.into_iter().enumerate() {
                let traj = &mut trajectories[i];
                traj.positions.push(step.plan.state.p);
                traj.velocities.push(step.plan.state.v);
                traj.accelerations.push(step.plan.state.a_prev);
                qp_failures += usize::from(step.diagnostics.qp_failed);
                unrecoverable |= step.unrecoverable;
                diag.push(step.diagnostics);
                plans[i] = step.plan;
            }
            diagnostics.push(StepDiagnostics {
                step: step_index,
                agents: diag,
            });
            step_index += 1;
            if unrecoverable {
                break;
            }
            let positions: Vec<Vector3<f64>> = plans.iter().map(|p| p.state.p).collect();
            at_goal = check_goal(&positions, goals, algo.goal_tol);
        }
        let wall_time = started.elapsed();

        let discrete = FleetTrajectory {
            step: phys.h,
            agents: trajectories,
        };
        let (retimed, time_scale) = if self.config.scale && at_goal {
            scale_trajectory(&discrete, phys.symmetric_accel_limit())
        } else {
            (discrete.clone(), 1.0)
        };
        let interpolated = interpolate(&retimed, phys.ts);
        let collision = check_collisions(&interpolated, phys.r_min, algo.eps_check, phys.ellipsoid_c, phys.degree);
        let failure = if unrecoverable {
            Some(FailureReason::QpUnrecoverable)
        } else if !at_goal {
            Some(FailureReason::Timeout)
        } else if !collision.passed {
            Some(FailureReason::CollisionCheckFailed)
        } else {
            None
        };
        let metrics = TransitionMetrics {
            total_distance: interpolated.travelled_distance(),
            transition_time: at_goal.then(|| retimed.duration()),
            min_scaled_distance: collision.min_scaled_distance,
        };
        Ok(TransitionResult {
            success: failure.is_none(),
            failure,
            steps: step_index,
            discrete,
            time_scale,
            interpolated,
            diagnostics,
            collision,
            metrics,
            wall_time,
            qp_failures,
        })
    }
}

/// Re-indexes a prediction made at `k_t` from `start` into the frame of
/// predictions made at `k_t - 1`.
fn previous_frame(start: &Vector3<f64>, fresh: &PredictionHorizon) -> PredictionHorizon {
    let k = fresh.len();
    PredictionHorizon {
        positions: std::iter::once(*start)
            .chain(fresh.positions.iter().take(k.saturating_sub(1)).copied())
            .collect(),
    }
}

/// Validates `scenario` and plans its transition.
pub fn run_transition(scenario: &Scenario, config: &EngineConfig) -> Result<TransitionResult, EngineError> {
    scenario.validate()?;
    let engine = Engine::new(&scenario.phys, &scenario.algo, config.clone())?;
    engine.run(&scenario.starts(), &scenario.goals())
}
