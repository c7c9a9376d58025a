//! Per-agent QP construction: cost, physical limits, and on-demand
//! collision rows obtained by linearizing the ellipsoidal separation
//! constraint about the previously shared predictions.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentState, AlgoParams, ModelError, PhysParams, PredictionHorizon, PredictionMatrices};
use crate::qp::{solve_qp_factored, HessianFactor, QpError, QpProblem, QpSolution, RowKind, SolverSettings};

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("predicted positions of agents {agent} and {neighbor} coincide at step {step}")]
    Degenerate {
        agent: usize,
        neighbor: usize,
        step: usize,
    },
}

/// A neighbor closer than the neighbor radius at the first predicted collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub agent: usize,
    pub neighbor: usize,
    /// 1-based horizon step.
    pub step: usize,
    /// Scaled distance at `step`.
    pub xi: f64,
    /// Previous prediction of `agent` at `step`.
    pub own_pos: Vector3<f64>,
    /// Previous prediction of `neighbor` at `step`.
    pub neighbor_pos: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    /// First horizon step (1-based) with a predicted collision.
    pub step: usize,
    pub members: Vec<CollisionEvent>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn event_at(
    agent: usize,
    neighbor: usize,
    step: usize,
    predictions: &[PredictionHorizon],
    phys: &PhysParams,
) -> CollisionEvent {
    let own_pos = *predictions[agent].at(step);
    let neighbor_pos = *predictions[neighbor].at(step);
    CollisionEvent {
        agent,
        neighbor,
        step,
        xi: phys.scaled_distance(&own_pos, &neighbor_pos),
        own_pos,
        neighbor_pos,
    }
}

/// All agents within the neighbor radius of `agent` at horizon step `step`.
pub fn neighbors_at(
    agent: usize,
    predictions: &[PredictionHorizon],
    step: usize,
    phys: &PhysParams,
    algo: &AlgoParams,
) -> Vec<CollisionEvent> {
    let radius = algo.neighbor_radius(phys);
    (0..predictions.len())
        .filter(|&j| j != agent)
        .map(|j| event_at(agent, j, step, predictions, phys))
        .filter(|ev| ev.xi < radius)
        .collect()
}

/// Scans the shared predictions for the first horizon step at which `agent`
/// comes closer than `r_min` to anyone, and collects the neighbor set there.
pub fn detect_first_collision(
    agent: usize,
    predictions: &[PredictionHorizon],
    phys: &PhysParams,
    algo: &AlgoParams,
) -> Option<NeighborSet> {
    let horizon = predictions[agent].len();
    let own = &predictions[agent];
    let step = (1..=horizon).find(|&k| {
        predictions
            .iter()
            .enumerate()
            .any(|(j, other)| j != agent && phys.scaled_distance(own.at(k), other.at(k)) < phys.r_min)
    })?;
    Some(NeighborSet {
        step,
        members: neighbors_at(agent, predictions, step, phys, algo),
    })
}

/// Linearized separation constraint
///
/// ```text
///     nu' p[step] - eps_coeff * eps >= rho
/// ```
///
/// on the agent's new predicted position at `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionRow {
    pub neighbor: usize,
    pub step: usize,
    pub nu: Vector3<f64>,
    pub eps_coeff: f64,
    pub rho: f64,
}

impl CollisionRow {
    /// Stacked `3K` vector with `nu` in block `step`.
    pub fn mu(&self, horizon: usize) -> DVector<f64> {
        let mut mu = DVector::zeros(3 * horizon);
        mu.rows_mut(3 * (self.step - 1), 3).copy_from(&self.nu);
        mu
    }

    /// Left side minus right side; non-negative when satisfied.
    pub fn margin(&self, p: &Vector3<f64>, eps: f64) -> f64 {
        self.nu.dot(p) - self.eps_coeff * eps - self.rho
    }
}

/// First-order expansion of `||Theta^-1 (p - p_j)||_n >= r_min + eps` about
/// the agent's previous prediction, multiplied through by `xi^(n-1)`.
pub fn linearize_collision_constraint(
    event: &CollisionEvent,
    phys: &PhysParams,
) -> Result<CollisionRow, AssemblyError> {
    if !(event.xi > 0.0) {
        return Err(AssemblyError::Degenerate {
            agent: event.agent,
            neighbor: event.neighbor,
            step: event.step,
        });
    }
    let n = phys.degree as i32;
    let theta = phys.theta();
    let diff = event.own_pos - event.neighbor_pos;
    let nu = Vector3::from_fn(|k, _| diff[k].powi(n - 1) / theta[k].powi(n));
    let xi_pow = event.xi.powi(n - 1);
    Ok(CollisionRow {
        neighbor: event.neighbor,
        step: event.step,
        nu,
        eps_coeff: xi_pow,
        rho: phys.r_min * xi_pow - xi_pow * event.xi + nu.dot(&event.own_pos),
    })
}

/// Index of a physical-limit row in the stacked layout used by [`QpAssembler`].
pub fn physical_row_index(kind: &RowKind, horizon: usize) -> Option<usize> {
    let n = 3 * horizon;
    match *kind {
        RowKind::PositionMax { step, axis } => Some(3 * (step - 1) + axis),
        RowKind::PositionMin { step, axis } => Some(n + 3 * (step - 1) + axis),
        RowKind::InputMax { step, axis } => Some(2 * n + 3 * step + axis),
        RowKind::InputMin { step, axis } => Some(3 * n + 3 * step + axis),
        _ => None,
    }
}

/// Caches everything about the per-agent QP that does not depend on the
/// current state, and stamps out problems from it.
#[derive(Debug, Clone)]
pub struct QpAssembler {
    phys: PhysParams,
    algo: AlgoParams,
    matrices: PredictionMatrices,
    /// `2 (Lambda' Qt Lambda + Rt + Delta' St Delta)`
    hessian: DMatrix<f64>,
    factor: HessianFactor,
    lambda_t_q: DMatrix<f64>,
    delta_t_s: DMatrix<f64>,
}

impl QpAssembler {
    pub fn new(phys: &PhysParams, algo: &AlgoParams) -> Result<Self, ModelError> {
        phys.validate()?;
        algo.validate(phys)?;
        let horizon = algo.horizon;
        let matrices = PredictionMatrices::build(horizon, phys.h)?;
        let n = 3 * horizon;
        let mut q_tilde = DMatrix::zeros(n, n);
        let mut r_tilde = DMatrix::zeros(n, n);
        let mut s_tilde = DMatrix::zeros(n, n);
        for k in 0..horizon {
            if k >= horizon - algo.kappa {
                q_tilde.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&algo.q);
            }
            r_tilde.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&algo.r);
            s_tilde.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&algo.s);
        }
        let lambda_t_q = matrices.lambda.transpose() * &q_tilde;
        let delta_t_s = matrices.delta.transpose() * &s_tilde;
        let mut hessian = (&lambda_t_q * &matrices.lambda + r_tilde + &delta_t_s * &matrices.delta) * 2.0;
        let sym = (&hessian + hessian.transpose()) * 0.5;
        hessian.copy_from(&sym);
        let factor = HessianFactor::new(&hessian)
            .map_err(|_| ModelError::InvalidParameter("cost weights give a singular hessian".into()))?;
        Ok(QpAssembler {
            phys: phys.clone(),
            algo: algo.clone(),
            matrices,
            hessian,
            factor,
            lambda_t_q,
            delta_t_s,
        })
    }

    pub fn horizon(&self) -> usize {
        self.algo.horizon
    }

    pub fn matrices(&self) -> &PredictionMatrices {
        &self.matrices
    }

    pub fn phys(&self) -> &PhysParams {
        &self.phys
    }

    pub fn algo(&self) -> &AlgoParams {
        &self.algo
    }

    /// Factor of the Hessian of a problem with `n_relax` relaxation slots.
    pub fn factor(&self, n_relax: usize) -> HessianFactor {
        if n_relax == 0 {
            return self.factor.clone();
        }
        self.factor
            .with_diagonal(&vec![2.0 * self.algo.zeta_quad; n_relax])
            .expect("zeta_quad is validated positive")
    }

    /// Solves a problem built by this assembler, reusing the cached factor.
    pub fn solve(
        &self,
        problem: &QpProblem,
        settings: &SolverSettings,
        warm_start: Option<&[usize]>,
    ) -> Result<QpSolution, QpError> {
        let n_relax = problem.dim().saturating_sub(3 * self.horizon());
        if n_relax == 0 {
            return solve_qp_factored(problem, &self.factor, settings, warm_start);
        }
        solve_qp_factored(problem, &self.factor(n_relax), settings, warm_start)
    }

    fn free_response(&self, state: &AgentState) -> DVector<f64> {
        let x0 = state.x0();
        &self.matrices.a0 * DVector::from_column_slice(x0.as_slice())
    }

    /// Stacked positions `A0 X0 + Lambda U` for the first `3K` entries of `u`.
    pub fn positions(&self, state: &AgentState, u: &DVector<f64>) -> DVector<f64> {
        let n = 3 * self.horizon();
        self.free_response(state) + &self.matrices.lambda * u.rows(0, n)
    }

    /// Cost `(H, f)` of `1/2 u'Hu + f'u` over `3K + n_relax` variables.
    pub fn build_cost(
        &self,
        state: &AgentState,
        goal: &Vector3<f64>,
        n_relax: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = 3 * self.horizon();
        let d = n + n_relax;
        let mut hessian = DMatrix::zeros(d, d);
        hessian.view_mut((0, 0), (n, n)).copy_from(&self.hessian);
        let goal_err = DVector::from_fn(n, |i, _| goal[i % 3]) - self.free_response(state);
        let mut u_prev = DVector::zeros(n);
        u_prev.rows_mut(0, 3).copy_from(&state.a_prev);
        let core = (&self.lambda_t_q * goal_err + &self.delta_t_s * u_prev) * -2.0;
        let mut linear = DVector::zeros(d);
        linear.rows_mut(0, n).copy_from(&core);
        for s in 0..n_relax {
            hessian[(n + s, n + s)] = 2.0 * self.algo.zeta_quad;
            linear[n + s] = -self.algo.rho_lin;
        }
        (hessian, linear)
    }

    /// Goal tracking with workspace and actuation limits only.
    pub fn build_plain_qp(&self, state: &AgentState, goal: &Vector3<f64>) -> QpProblem {
        self.assemble(state, goal, &[], None)
    }

    /// Adds one relaxed collision row per neighbor plus `-eps_max <= eps <= 0`.
    pub fn build_augmented_qp(
        &self,
        state: &AgentState,
        goal: &Vector3<f64>,
        rows: &[CollisionRow],
        eps_max: f64,
    ) -> QpProblem {
        self.assemble(state, goal, rows, Some(eps_max))
    }

    /// Collision rows enforced exactly, without relaxation variables.
    pub fn build_hard_qp(&self, state: &AgentState, goal: &Vector3<f64>, rows: &[CollisionRow]) -> QpProblem {
        self.assemble(state, goal, rows, None)
    }

    fn assemble(
        &self,
        state: &AgentState,
        goal: &Vector3<f64>,
        rows: &[CollisionRow],
        relax: Option<f64>,
    ) -> QpProblem {
        let horizon = self.horizon();
        let n = 3 * horizon;
        let n_relax = if relax.is_some() { rows.len() } else { 0 };
        let d = n + n_relax;
        let m = 4 * n + rows.len() + 2 * n_relax;
        let (hessian, linear) = self.build_cost(state, goal, n_relax);
        let free = self.free_response(state);
        let lambda = &self.matrices.lambda;

        let mut a_in = DMatrix::zeros(m, d);
        let mut b_in = DVector::zeros(m);
        let mut labels = Vec::with_capacity(m);

        a_in.view_mut((0, 0), (n, n)).copy_from(lambda);
        a_in.view_mut((n, 0), (n, n)).copy_from(&(-lambda));
        for i in 0..n {
            let axis = i % 3;
            a_in[(2 * n + i, i)] = 1.0;
            a_in[(3 * n + i, i)] = -1.0;
            b_in[i] = self.phys.p_max[axis] - free[i];
            b_in[n + i] = free[i] - self.phys.p_min[axis];
            b_in[2 * n + i] = self.phys.a_max[axis];
            b_in[3 * n + i] = -self.phys.a_min[axis];
        }
        for group in 0..4 {
            for i in 0..n {
                let (step, axis) = (i / 3, i % 3);
                labels.push(match group {
                    0 => RowKind::PositionMax { step: step + 1, axis },
                    1 => RowKind::PositionMin { step: step + 1, axis },
                    2 => RowKind::InputMax { step, axis },
                    _ => RowKind::InputMin { step, axis },
                });
            }
        }

        for (slot, row) in rows.iter().enumerate() {
            let r = 4 * n + slot;
            let block = 3 * (row.step - 1);
            // nu' p = nu' (free + Lambda U)  >=  rho + eps_coeff * eps
            let coeffs = row.nu.transpose() * lambda.rows(block, 3);
            for c in 0..n {
                a_in[(r, c)] = -coeffs[c];
            }
            if relax.is_some() {
                a_in[(r, n + slot)] = row.eps_coeff;
            }
            b_in[r] = row.nu.dot(&free.fixed_rows::<3>(block)) - row.rho;
            labels.push(RowKind::Collision {
                neighbor: row.neighbor,
                step: row.step,
            });
        }
        if let Some(eps_max) = relax {
            let base = 4 * n + rows.len();
            for slot in 0..n_relax {
                a_in[(base + slot, n + slot)] = 1.0;
                labels.push(RowKind::RelaxUpper { slot });
            }
            for slot in 0..n_relax {
                a_in[(base + n_relax + slot, n + slot)] = -1.0;
                b_in[base + n_relax + slot] = eps_max;
                labels.push(RowKind::RelaxLower { slot });
            }
        }
        QpProblem {
            hessian,
            linear,
            a_in,
            b_in,
            labels,
        }
    }
}
