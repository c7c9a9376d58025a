//! Scenario files, random scenario generation and parameter overrides.
//!
//! A scenario file is JSON:
//!
//! ```json
//! {
//!   "format": 1,
//!   "id": "n4-box-s1",
//!   "seed": 1,
//!   "agents": [ { "start": [0.0, 0.0, 1.0], "goal": [1.0, 0.0, 1.0], "static": false } ],
//!   "phys": { "h": 0.2, "ts": 0.01, "a_min": [-1, -1, -1], "a_max": [1, 1, 1],
//!             "p_min": [-2.5, -2.5, 0], "p_max": [2.5, 2.5, 2.5],
//!             "r_min": 0.35, "ellipsoid_c": 2.0, "degree": 2 },
//!   "algo": { "horizon": 15, "kappa": 1, "eps_max": 0.05, "eps_check": 0.05,
//!             "neighbor_radius_factor": 3.0, "t_max": 20.0, "goal_tol": 0.05,
//!             "q": [[100,0,0],[0,100,0],[0,0,100]], "r": [[1,0,0],[0,1,0],[0,0,1]],
//!             "s": [[10,0,0],[0,10,0],[0,0,10]], "rho_lin": 1000.0, "zeta_quad": 100.0 }
//! }
//! ```
//!
//! The workspace box is `phys.p_min`..`phys.p_max`. `seed` may be omitted.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{AlgoParams, ModelError, PhysParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Format(u32),
    #[error("scenario has no agents")]
    Empty,
    #[error("agent {agent}: {message}")]
    Agent { agent: usize, message: String },
    #[error("agents {a} and {b}: {which} positions are {distance:.4} apart (scaled), below r_min {r_min}")]
    TooClose {
        a: usize,
        b: usize,
        which: &'static str,
        distance: f64,
        r_min: f64,
    },
    #[error(transparent)]
    Params(#[from] ModelError),
    #[error("cannot place {n} agents in the workspace: {reason}")]
    Packing { n: usize, reason: String },
    #[error("override: {0}")]
    Override(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            return ScenarioError::Io(e.into());
        }
        ScenarioError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub start: Vector3<f64>,
    pub goal: Vector3<f64>,
    /// A static agent hovers at its start, which equals its goal.
    #[serde(rename = "static", default)]
    pub is_static: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format: u32,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub agents: Vec<AgentSpec>,
    pub phys: PhysParams,
    pub algo: AlgoParams,
}

impl Scenario {
    pub fn new(id: impl Into<String>, agents: Vec<AgentSpec>, phys: PhysParams, algo: AlgoParams) -> Self {
        Scenario {
            format: FORMAT_VERSION,
            id: id.into(),
            seed: None,
            agents,
            phys,
            algo,
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn starts(&self) -> Vec<Vector3<f64>> {
        self.agents.iter().map(|a| a.start).collect()
    }

    pub fn goals(&self) -> Vec<Vector3<f64>> {
        self.agents.iter().map(|a| a.goal).collect()
    }

    /// Sum of start-to-goal distances, a lower bound on travelled distance.
    pub fn straight_line_distance(&self) -> f64 {
        self.agents.iter().map(|a| (a.goal - a.start).norm()).sum()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.format != FORMAT_VERSION {
            return Err(ScenarioError::Format(self.format));
        }
        self.phys.validate()?;
        self.algo.validate(&self.phys)?;
        if self.agents.is_empty() {
            return Err(ScenarioError::Empty);
        }
        for (i, a) in self.agents.iter().enumerate() {
            let bad = |message: String| Err(ScenarioError::Agent { agent: i, message });
            if !(a.start.iter().chain(a.goal.iter()).all(|x| x.is_finite())) {
                return bad("non-finite position".into());
            }
            if !self.phys.contains(&a.start) {
                return bad(format!("start {:?} outside the workspace box", a.start.as_slice()));
            }
            if !self.phys.contains(&a.goal) {
                return bad(format!("goal {:?} outside the workspace box", a.goal.as_slice()));
            }
            if a.is_static && a.start != a.goal {
                return bad("static agent must have goal equal to start".into());
            }
        }
        for (which, pts) in [("start", self.starts()), ("goal", self.goals())] {
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let d = self.phys.scaled_distance(&pts[i], &pts[j]);
                    if d < self.phys.r_min {
                        return Err(ScenarioError::TooClose {
                            a: i,
                            b: j,
                            which,
                            distance: d,
                            r_min: self.phys.r_min,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios always serialize")
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Applies `overrides` (see [`apply_overrides`]) and revalidates.
    pub fn with_overrides(mut self, overrides: &Value) -> Result<Self, ScenarioError> {
        let (phys, algo) = apply_overrides(&self.phys, &self.algo, overrides)?;
        self.phys = phys;
        self.algo = algo;
        self.validate()?;
        Ok(self)
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Overrides parameter fields from a JSON object.
///
/// Keys may sit under `"phys"` / `"algo"` sections or at the top level, where
/// each is routed to whichever parameter set has a field of that name.
/// Unknown keys are rejected.
pub fn apply_overrides(
    phys: &PhysParams,
    algo: &AlgoParams,
    overrides: &Value,
) -> Result<(PhysParams, AlgoParams), ScenarioError> {
    let Value::Object(map) = overrides else {
        return Err(ScenarioError::Override("expected a table of parameters".into()));
    };
    let mut phys_v = serde_json::to_value(phys).expect("parameters serialize");
    let mut algo_v = serde_json::to_value(algo).expect("parameters serialize");
    let has = |v: &Value, k: &str| v.as_object().is_some_and(|o| o.contains_key(k));
    for (key, val) in map {
        let (target, patch) = match key.as_str() {
            "phys" => (&mut phys_v, val.clone()),
            "algo" => (&mut algo_v, val.clone()),
            k if has(&phys_v, k) => (&mut phys_v, serde_json::json!({ k: val })),
            k if has(&algo_v, k) => (&mut algo_v, serde_json::json!({ k: val })),
            k => return Err(ScenarioError::Override(format!("unknown parameter `{k}`"))),
        };
        if let Value::Object(p) = &patch {
            if let Some(k) = p.keys().find(|k| !has(target, k)) {
                return Err(ScenarioError::Override(format!("unknown parameter `{key}.{k}`")));
            }
        } else {
            return Err(ScenarioError::Override(format!("section `{key}` must be a table")));
        }
        merge(target, &patch);
    }
    let phys: PhysParams = serde_json::from_value(phys_v).map_err(|e| ScenarioError::Override(e.to_string()))?;
    let algo: AlgoParams = serde_json::from_value(algo_v).map_err(|e| ScenarioError::Override(e.to_string()))?;
    phys.validate()?;
    algo.validate(&phys)?;
    Ok((phys, algo))
}

/// Where random agents are placed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    /// Box of the given side lengths, centered in x and y, floor at z = 0.
    Box(Vector3<f64>),
    /// Cube whose volume holds the requested agents per cubic meter.
    Density(f64),
    /// Cube of the given volume in cubic meters.
    Volume(f64),
}

impl Region {
    pub fn dimensions(&self, n: usize) -> Vector3<f64> {
        match *self {
            Region::Box(d) => d,
            Region::Density(rho) => Vector3::repeat((n as f64 / rho).cbrt()),
            Region::Volume(v) => Vector3::repeat(v.cbrt()),
        }
    }
}

const TRIES_PER_POINT: usize = 2000;
const RESTARTS: usize = 50;
/// Densest packing of equal spheres.
const PACKING_LIMIT: f64 = std::f64::consts::PI / (3.0 * std::f64::consts::SQRT_2);

fn sample_points(
    n: usize,
    phys: &PhysParams,
    rng: &mut ChaCha8Rng,
    fixed: &[Vector3<f64>],
) -> Option<Vec<Vector3<f64>>> {
    'restart: for _ in 0..RESTARTS {
        let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..TRIES_PER_POINT {
                let p = Vector3::from_fn(|k, _| rng.random_range(phys.p_min[k]..=phys.p_max[k]));
                let clear = pts
                    .iter()
                    .chain(fixed)
                    .all(|q| phys.scaled_distance(&p, q) >= phys.r_min);
                if clear {
                    pts.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Some(pts);
    }
    None
}

/// Draws `n` starts and `n` goals, each set pairwise separated by `r_min`.
///
/// The workspace box of the returned scenario is set from `region`, with the
/// remaining parameters taken from `phys` and `algo`.
pub fn generate_random_scenario(
    n: usize,
    region: Region,
    phys: &PhysParams,
    algo: &AlgoParams,
    seed: u64,
) -> Result<Scenario, ScenarioError> {
    let dims = region.dimensions(n);
    if !dims.iter().all(|d| d.is_finite() && *d > 0.0) {
        return Err(ScenarioError::Packing {
            n,
            reason: "workspace dimensions must be positive".into(),
        });
    }
    let mut phys = phys.clone();
    phys.p_min = Vector3::new(-dims.x / 2.0, -dims.y / 2.0, 0.0);
    phys.p_max = Vector3::new(dims.x / 2.0, dims.y / 2.0, dims.z);
    phys.validate()?;
    algo.validate(&phys)?;

    // Each agent excludes an ellipsoid of semi-axes r_min/2 * (1, 1, c); the
    // centers may touch the walls, so the usable volume is padded by one radius.
    let r = phys.r_min / 2.0;
    let own = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3) * phys.ellipsoid_c;
    let usable = (dims.x + 2.0 * r) * (dims.y + 2.0 * r) * (dims.z + 2.0 * r * phys.ellipsoid_c);
    if n as f64 * own > PACKING_LIMIT * usable {
        return Err(ScenarioError::Packing {
            n,
            reason: format!(
                "{:.3} m^3 of exclusion volume exceeds the packing bound of a {:.3} x {:.3} x {:.3} m box",
                n as f64 * own,
                dims.x,
                dims.y,
                dims.z
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = || ScenarioError::Packing {
        n,
        reason: "rejection sampling exhausted its retry budget".into(),
    };
    let starts = sample_points(n, &phys, &mut rng, &[]).ok_or_else(fail)?;
    let goals = sample_points(n, &phys, &mut rng, &[]).ok_or_else(fail)?;
    let agents = starts
        .into_iter()
        .zip(goals)
        .map(|(start, goal)| AgentSpec {
            start,
            goal,
            is_static: false,
        })
        .collect();
    let id = match region {
        Region::Box(d) => format!("n{n}-box{}x{}x{}-s{seed}", d.x, d.y, d.z),
        Region::Density(rho) => format!("n{n}-density{rho}-s{seed}"),
        Region::Volume(v) => format!("n{n}-volume{v}-s{seed}"),
    };
    let mut scenario = Scenario::new(id, agents, phys, algo.clone());
    scenario.seed = Some(seed);
    scenario.validate()?;
    Ok(scenario)
}

/// Four agents on the corners of a 2 m square in the plane `z = 1`, each
/// flying to the diagonally opposite corner.
pub fn exchange_scenario(phys: &PhysParams, algo: &AlgoParams) -> Scenario {
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let agents = (0..4)
        .map(|i| {
            let (x, y) = corners[i];
            let (gx, gy) = corners[(i + 2) % 4];
            AgentSpec {
                start: Vector3::new(x, y, 1.0),
                goal: Vector3::new(gx, gy, 1.0),
                is_static: false,
            }
        })
        .collect();
    Scenario::new("four-agent-exchange", agents, phys.clone(), algo.clone())
}

/// Families of instances built to provoke deadlock and infeasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adversarial {
    /// Pairs flying straight at each other along parallel lanes.
    HeadOn,
    /// Agents on a circle swapping with the antipodal agent.
    Ring,
    /// A ring exchange around a static agent hovering at the center.
    StaticCenter,
}

impl Adversarial {
    pub const ALL: [Adversarial; 3] = [Adversarial::HeadOn, Adversarial::Ring, Adversarial::StaticCenter];

    /// The family used for instance `seed` of a mixed suite.
    pub fn for_seed(seed: u64) -> Self {
        Self::ALL[(seed % 3) as usize]
    }
}

/// A seeded instance of `kind` inside the default workspace box.
///
/// Geometry is exactly symmetric up to a jitter below 1 mm, so the seed
/// mostly varies sizes and orientation.
pub fn adversarial_scenario(
    kind: Adversarial,
    phys: &PhysParams,
    algo: &AlgoParams,
    seed: u64,
) -> Result<Scenario, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (phys.p_min + phys.p_max) / 2.0;
    let reach = (phys.p_max - phys.p_min).x.min((phys.p_max - phys.p_min).y) / 2.0 - phys.r_min;
    let jitter = |rng: &mut ChaCha8Rng| Vector3::from_fn(|_, _| rng.random_range(-5e-4..5e-4));
    let mut agents = Vec::new();
    match kind {
        Adversarial::HeadOn => {
            let pairs = rng.random_range(1..=4usize);
            let half = rng.random_range(0.6..reach.min(2.0));
            let spacing = rng.random_range(1.05..2.0) * phys.r_min;
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
            let lateral = Vector3::new(-heading.sin(), heading.cos(), 0.0);
            for k in 0..pairs {
                let offset = lateral * ((k as f64 - (pairs as f64 - 1.0) / 2.0) * spacing);
                let a = center + offset - dir * half;
                let b = center + offset + dir * half;
                agents.push((a + jitter(&mut rng), b));
                agents.push((b + jitter(&mut rng), a));
            }
        }
        Adversarial::Ring | Adversarial::StaticCenter => {
            let n = rng.random_range(4..=8usize);
            let min_radius = phys.r_min / (std::f64::consts::PI / n as f64).sin() / 2.0 * 1.05;
            let radius = rng.random_range(min_radius.max(0.8)..reach.min(2.0).max(min_radius.max(0.8) + 0.1));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let ring: Vec<Vector3<f64>> = (0..n)
                .map(|k| {
                    let ang = phase + std::f64::consts::TAU * k as f64 / n as f64;
                    center + Vector3::new(ang.cos(), ang.sin(), 0.0) * radius
                })
                .collect();
            for k in 0..n {
                let goal = if n % 2 == 0 {
                    ring[(k + n / 2) % n]
                } else {
                    2.0 * center - ring[k]
                };
                agents.push((ring[k] + jitter(&mut rng), goal));
            }
            if kind == Adversarial::StaticCenter {
                agents.push((center, center));
            }
        }
    }
    let agents = agents
        .into_iter()
        .map(|(start, goal)| AgentSpec {
            start,
            goal,
            is_static: start == goal,
        })
        .collect();
    let name = match kind {
        Adversarial::HeadOn => "head-on",
        Adversarial::Ring => "ring",
        Adversarial::StaticCenter => "static-center",
    };
    let mut scenario = Scenario::new(format!("{name}-s{seed}"), agents, phys.clone(), algo.clone());
    scenario.seed = Some(seed);
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn params() -> (PhysParams, AlgoParams) {
        Preset::Simulation.params()
    }

    #[test]
    fn generation_is_reproducible() {
        let (phys, algo) = params();
        let region = Region::Box(Vector3::new(2.0, 2.0, 1.0));
        let a = generate_random_scenario(4, region, &phys, &algo, 1).unwrap();
        let b = generate_random_scenario(4, region, &phys, &algo, 1).unwrap();
        let c = generate_random_scenario(4, region, &phys, &algo, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.agents, c.agents);
        assert_eq!(a.len(), 4);
        assert_eq!(a.phys.p_max - a.phys.p_min, Vector3::new(2.0, 2.0, 1.0));
    }

    #[test]
    fn density_sets_cube_side() {
        let (phys, algo) = params();
        let s = generate_random_scenario(27, Region::Density(1.0), &phys, &algo, 3).unwrap();
        let side = s.phys.p_max - s.phys.p_min;
        for k in 0..3 {
            assert!((side[k] - 3.0).abs() < 1e-12);
        }
        let s = generate_random_scenario(20, Region::Density(1.0), &phys, &algo, 7).unwrap();
        assert!(((s.phys.p_max.x - s.phys.p_min.x) - 20f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn overfull_box_is_rejected() {
        let (phys, algo) = params();
        let err = generate_random_scenario(500, Region::Box(Vector3::new(1.0, 1.0, 1.0)), &phys, &algo, 0);
        assert!(matches!(err, Err(ScenarioError::Packing { .. })));
    }

    #[test]
    fn json_round_trip_is_identity() {
        let (phys, algo) = params();
        let s = generate_random_scenario(6, Region::Volume(4.0), &phys, &algo, 11).unwrap();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let err = Scenario::from_json("{\n  \"format\": 1,\n  \"id\": oops\n}").unwrap_err();
        match err {
            ScenarioError::Syntax { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_agent() {
        let (phys, algo) = params();
        let mut s = Scenario::new(
            "t",
            vec![
                AgentSpec {
                    start: Vector3::new(0.0, 0.0, 1.0),
                    goal: Vector3::new(1.0, 0.0, 1.0),
                    is_static: false,
                },
                AgentSpec {
                    start: Vector3::new(9.0, 0.0, 1.0),
                    goal: Vector3::new(0.0, 1.0, 1.0),
                    is_static: false,
                },
            ],
            phys,
            algo,
        );
        assert!(matches!(s.validate(), Err(ScenarioError::Agent { agent: 1, .. })));
        s.agents[1].start = Vector3::new(0.2, 0.0, 1.0);
        assert!(matches!(
            s.validate(),
            Err(ScenarioError::TooClose { a: 0, b: 1, which: "start", .. })
        ));
        s.agents[1].start = Vector3::new(0.0, 1.0, 1.0);
        s.agents[1].is_static = true;
        s.validate().unwrap();
        s.agents[0].is_static = true;
        assert!(matches!(s.validate(), Err(ScenarioError::Agent { agent: 0, .. })));
    }

    #[test]
    fn adversarial_instances_are_valid() {
        let (phys, algo) = params();
        for seed in 0..300 {
            let kind = Adversarial::for_seed(seed);
            let s = adversarial_scenario(kind, &phys, &algo, seed).unwrap();
            assert!(s.len() >= 2);
            assert_eq!(s.agents.iter().any(|a| a.is_static), kind == Adversarial::StaticCenter);
        }
        exchange_scenario(&phys, &algo).validate().unwrap();
    }

    #[test]
    fn overrides_route_flat_and_sectioned_keys() {
        let (phys, algo) = params();
        let v = serde_json::json!({ "kappa": 2, "r_min": 0.3, "algo": { "eps_max": 0.04 } });
        let (p, a) = apply_overrides(&phys, &algo, &v).unwrap();
        assert_eq!(a.kappa, 2);
        assert_eq!(a.eps_max, 0.04);
        assert_eq!(p.r_min, 0.3);
        assert!(apply_overrides(&phys, &algo, &serde_json::json!({ "nope": 1 })).is_err());
        assert!(apply_overrides(&phys, &algo, &serde_json::json!({ "algo": { "nope": 1 } })).is_err());
        assert!(apply_overrides(&phys, &algo, &serde_json::json!({ "kappa": 99 })).is_err());
    }
}
