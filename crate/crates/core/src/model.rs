//! Agent model: double-integrator dynamics, static parameters and the
//! dense prediction matrices shared by every per-agent problem.
//!
//! Positions over a horizon of `K` steps are an affine function of the
//! stacked input sequence:
//!
//! ```text
//!     P = A0 * X0 + Lambda * U
//! ```
//!
//! where `X0 = [p; v]` is the current state and `U` stacks `K` accelerations.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Physical description of the agents and their workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// Discretization step of the planner, seconds.
    pub h: f64,
    /// Output interpolation step, seconds. Must divide `h`.
    pub ts: f64,
    pub a_min: Vector3<f64>,
    pub a_max: Vector3<f64>,
    /// Workspace box, lower corner.
    pub p_min: Vector3<f64>,
    /// Workspace box, upper corner.
    pub p_max: Vector3<f64>,
    /// Minimum separation in the xy plane, meters.
    pub r_min: f64,
    /// Vertical elongation of the collision ellipsoid.
    pub ellipsoid_c: f64,
    /// Degree of the ellipsoid norm; even and at least 2.
    pub degree: u32,
}

impl Default for PhysParams {
    fn default() -> Self {
        PhysParams {
            h: 0.2,
            ts: 0.01,
            a_min: Vector3::repeat(-1.0),
            a_max: Vector3::repeat(1.0),
            p_min: Vector3::repeat(-2.5),
            p_max: Vector3::repeat(2.5),
            r_min: 0.35,
            ellipsoid_c: 2.0,
            degree: 2,
        }
    }
}

impl PhysParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidParameter(msg.to_string()));
        let vectors = [self.a_min, self.a_max, self.p_min, self.p_max];
        if !(self.h.is_finite()
            && self.ts.is_finite()
            && self.r_min.is_finite()
            && self.ellipsoid_c.is_finite()
            && vectors.iter().all(|v| v.iter().all(|x| x.is_finite())))
        {
            return Err(ModelError::NonFinite("physical parameters"));
        }
        if self.h <= 0.0 {
            return bad("h must be positive");
        }
        if self.ts <= 0.0 || self.ts > self.h {
            return bad("ts must satisfy 0 < ts <= h");
        }
        let ratio = self.h / self.ts;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return bad("ts must divide h");
        }
        if (0..3).any(|k| self.a_min[k] >= self.a_max[k]) {
            return bad("a_min must be below a_max componentwise");
        }
        if (0..3).any(|k| self.a_min[k] > 0.0 || self.a_max[k] < 0.0) {
            return bad("zero acceleration must lie within [a_min, a_max]");
        }
        if (0..3).any(|k| self.p_min[k] >= self.p_max[k]) {
            return bad("p_min must be below p_max componentwise");
        }
        if self.r_min <= 0.0 {
            return bad("r_min must be positive");
        }
        if self.ellipsoid_c < 1.0 {
            return bad("ellipsoid_c must be at least 1");
        }
        if self.degree < 2 || !self.degree.is_multiple_of(2) {
            return bad("degree must be even and at least 2");
        }
        Ok(())
    }

    /// Diagonal of the ellipsoid scaling matrix `diag(1, 1, c)`.
    pub fn theta(&self) -> Vector3<f64> {
        Vector3::new(1.0, 1.0, self.ellipsoid_c)
    }

    /// Ellipsoid-normalized distance between two points.
    pub fn scaled_distance(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        scaled_norm(&(a - b), self.ellipsoid_c, self.degree)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.p_min[k] && p[k] <= self.p_max[k])
    }

    /// Largest acceleration magnitude allowed on every axis in both directions.
    pub fn symmetric_accel_limit(&self) -> f64 {
        (0..3)
            .map(|k| self.a_max[k].min(-self.a_min[k]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Number of interpolation samples per planner step.
    pub fn substeps(&self) -> usize {
        (self.h / self.ts).round() as usize
    }
}

/// `|| diag(1, 1, c)^-1 d ||_n`
pub fn scaled_norm(d: &Vector3<f64>, c: f64, degree: u32) -> f64 {
    let s = Vector3::new(d.x, d.y, d.z / c);
    if degree == 2 {
        return s.norm();
    }
    let n = degree as i32;
    s.iter().map(|x| x.abs().powi(n)).sum::<f64>().powf(1.0 / degree as f64)
}

/// Tuning of the receding-horizon planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    /// Horizon length in steps.
    pub horizon: usize,
    /// Number of terminal steps penalized by the goal-error term.
    pub kappa: usize,
    /// Bound on the collision-constraint relaxation, meters.
    pub eps_max: f64,
    /// Slack on `r_min` accepted by the final safety check, meters.
    pub eps_check: f64,
    /// Neighbors are agents closer than `neighbor_radius_factor * r_min`.
    pub neighbor_radius_factor: f64,
    /// Maximum transition time, seconds.
    pub t_max: f64,
    /// Radius around each goal that counts as arrived, meters.
    pub goal_tol: f64,
    #[serde(with = "mat3_rows")]
    pub q: Matrix3<f64>,
    #[serde(with = "mat3_rows")]
    pub r: Matrix3<f64>,
    #[serde(with = "mat3_rows")]
    pub s: Matrix3<f64>,
    /// Linear penalty on relaxation.
    pub rho_lin: f64,
    /// Quadratic penalty on relaxation.
    pub zeta_quad: f64,
}

impl Default for AlgoParams {
    fn default() -> Self {
        AlgoParams {
            horizon: 15,
            kappa: 1,
            eps_max: 0.05,
            eps_check: 0.05,
            neighbor_radius_factor: 3.0,
            t_max: 20.0,
            goal_tol: 0.05,
            q: Matrix3::identity() * 100.0,
            r: Matrix3::identity(),
            s: Matrix3::identity() * 10.0,
            rho_lin: 1e3,
            zeta_quad: 1e2,
        }
    }
}

impl AlgoParams {
    pub fn validate(&self, phys: &PhysParams) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidParameter(msg.to_string()));
        let scalars = [
            self.eps_max,
            self.eps_check,
            self.neighbor_radius_factor,
            self.t_max,
            self.goal_tol,
            self.rho_lin,
            self.zeta_quad,
        ];
        let weights = [self.q, self.r, self.s];
        if !(scalars.iter().all(|x| x.is_finite())
            && weights.iter().all(|m| m.iter().all(|x| x.is_finite())))
        {
            return Err(ModelError::NonFinite("algorithm parameters"));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.kappa == 0 || self.kappa > self.horizon {
            return bad("kappa must satisfy 1 <= kappa <= horizon");
        }
        if self.eps_max < 0.0 {
            return bad("eps_max must be non-negative");
        }
        if self.eps_check < self.eps_max {
            return bad("eps_check must be at least eps_max");
        }
        if self.neighbor_radius_factor < 1.0 {
            return bad("neighbor_radius_factor must be at least 1");
        }
        if self.max_steps(phys.h) == 0 {
            return bad("t_max must allow at least one step");
        }
        if self.goal_tol <= 0.0 {
            return bad("goal_tol must be positive");
        }
        for (name, w) in [("q", &self.q), ("r", &self.r), ("s", &self.s)] {
            if (w - w.transpose()).abs().max() > 1e-12 * w.abs().max().max(1.0) {
                return bad(&format!("{name} must be symmetric"));
            }
            if w.cholesky().is_none() {
                return bad(&format!("{name} must be positive definite"));
            }
        }
        if self.rho_lin <= 0.0 || self.zeta_quad <= 0.0 {
            return bad("rho_lin and zeta_quad must be positive");
        }
        Ok(())
    }

    /// `ceil(t_max / h)`
    pub fn max_steps(&self, h: f64) -> usize {
        if self.t_max <= 0.0 {
            return 0;
        }
        // Guard against 20.0 / 0.2 = 100.00000000000001.
        (self.t_max / h - 1e-9).ceil() as usize
    }

    pub fn neighbor_radius(&self, phys: &PhysParams) -> f64 {
        self.neighbor_radius_factor * phys.r_min
    }
}

/// Parameter sets used in the original simulation and flight experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Simulation,
    Experiment,
    /// Simulation parameters with two terminal goal steps, for crowded spaces.
    Dense,
}

impl Preset {
    pub fn params(self) -> (PhysParams, AlgoParams) {
        let mut phys = PhysParams::default();
        let mut algo = AlgoParams::default();
        if self == Preset::Experiment {
            phys.r_min = 0.25;
            algo.eps_check = 0.03;
            algo.eps_max = 0.03;
        }
        if self == Preset::Dense {
            algo.kappa = 2;
        }
        (phys, algo)
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulation" => Ok(Preset::Simulation),
            "experiment" => Ok(Preset::Experiment),
            "dense" => Ok(Preset::Dense),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(de)?;
        Ok(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

/// State of one agent at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Input applied during the previous step.
    pub a_prev: Vector3<f64>,
}

impl AgentState {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        AgentState {
            p,
            v: Vector3::zeros(),
            a_prev: Vector3::zeros(),
        }
    }

    /// Applies `a` for one step of length `h`.
    pub fn step(&self, a: &Vector3<f64>, h: f64) -> Result<AgentState, ModelError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(ModelError::InvalidParameter("step length must be positive".into()));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !(finite(&self.p) && finite(&self.v) && finite(a)) {
            return Err(ModelError::NonFinite("agent state or input"));
        }
        Ok(self.step_unchecked(a, h))
    }

    pub(crate) fn step_unchecked(&self, a: &Vector3<f64>, h: f64) -> AgentState {
        AgentState {
            p: self.p + self.v * h + a * (0.5 * h * h),
            v: self.v + a * h,
            a_prev: *a,
        }
    }

    /// `[p; v]`
    pub fn x0(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(self.p.x, self.p.y, self.p.z, self.v.x, self.v.y, self.v.z)
    }
}

/// Predicted positions of one agent for horizon steps `1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHorizon {
    pub positions: Vec<Vector3<f64>>,
}

impl PredictionHorizon {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position at 1-based horizon step `k`.
    pub fn at(&self, k: usize) -> &Vector3<f64> {
        &self.positions[k - 1]
    }

    /// Rolls `inputs` (stacked accelerations) forward from `state`.
    /// Returns the predicted positions and the state reached after every step.
    pub fn propagate(state: &AgentState, inputs: &[Vector3<f64>], h: f64) -> (Self, Vec<AgentState>) {
        let mut states = Vec::with_capacity(inputs.len());
        let mut x = *state;
        for a in inputs {
            x = x.step_unchecked(a, h);
            states.push(x);
        }
        let positions = states.iter().map(|s| s.p).collect();
        (PredictionHorizon { positions }, states)
    }
}

/// Dense matrices mapping initial state and input sequence to positions.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    pub horizon: usize,
    pub h: f64,
    /// `3K x 3K`, block `(r, c)` equals `Psi * A^(r-c) * B` for `r >= c`.
    pub lambda: DMatrix<f64>,
    /// `3K x 6`, row block `k` equals `Psi * A^k`.
    pub a0: DMatrix<f64>,
    /// `3K x 3K` first-difference operator.
    pub delta: DMatrix<f64>,
}

impl PredictionMatrices {
    pub fn build(horizon: usize, h: f64) -> Result<Self, ModelError> {
        if horizon == 0 {
            return Err(ModelError::InvalidParameter("horizon must be at least 1".into()));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(ModelError::InvalidParameter("h must be positive".into()));
        }
        let n = 3 * horizon;
        let mut lambda = DMatrix::zeros(n, n);
        let mut a0 = DMatrix::zeros(n, 6);
        let mut delta = DMatrix::zeros(n, n);
        for r in 0..horizon {
            // Psi * A^j * B = (j + 1/2) h^2 I for the double integrator.
            for c in 0..=r {
                let coeff = h * h * ((r - c) as f64 + 0.5);
                for ax in 0..3 {
                    lambda[(3 * r + ax, 3 * c + ax)] = coeff;
                }
            }
            // Psi * A^k = [I, k h I]
            let k = (r + 1) as f64;
            for ax in 0..3 {
                a0[(3 * r + ax, ax)] = 1.0;
                a0[(3 * r + ax, 3 + ax)] = k * h;
                delta[(3 * r + ax, 3 * r + ax)] = 1.0;
                if r > 0 {
                    delta[(3 * r + ax, 3 * (r - 1) + ax)] = -1.0;
                }
            }
        }
        Ok(PredictionMatrices {
            horizon,
            h,
            lambda,
            a0,
            delta,
        })
    }
}

/// Straight-line seed predictions and resting initial states.
///
/// Each seed moves from start toward goal at the constant speed that covers
/// the segment in `t_max`, clamped at the goal.
pub fn init_predictions(
    starts: &[Vector3<f64>],
    goals: &[Vector3<f64>],
    phys: &PhysParams,
    algo: &AlgoParams,
) -> (Vec<PredictionHorizon>, Vec<AgentState>) {
    let horizons = starts
        .iter()
        .zip(goals)
        .map(|(p0, pf)| {
            let seg = pf - p0;
            let dist = seg.norm();
            let positions = (1..=algo.horizon)
                .map(|k| {
                    if dist == 0.0 {
                        return *p0;
                    }
                    let speed = dist / algo.t_max;
                    let travelled = (k as f64 * phys.h * speed).min(dist);
                    p0 + seg * (travelled / dist)
                })
                .collect();
            PredictionHorizon { positions }
        })
        .collect();
    let states = starts.iter().map(|p| AgentState::at_rest(*p)).collect();
    (horizons, states)
}
