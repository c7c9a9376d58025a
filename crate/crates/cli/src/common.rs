use std::path::Path;

use dmpc_core::engine::{EngineConfig, ExecutionMode, StepDiagnostics, Strategy, TransitionResult};
use dmpc_core::metrics::{aggregate, Aggregate, RunMetrics};
use dmpc_core::model::{AlgoParams, PhysParams, Preset};
use dmpc_core::postprocess::Violation;
use dmpc_core::scenario::{apply_overrides, Scenario, ScenarioError};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_FAILED: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

pub const RESULTS_FORMAT: u32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

/// Line of the `index`-th occurrence of `"key"` in `text`, 1-based.
fn line_of_key(text: &str, key: &str, index: usize) -> Option<usize> {
    let needle = format!("\"{key}\"");
    let (offset, _) = text.match_indices(&needle).nth(index)?;
    Some(text[..offset].matches('\n').count() + 1)
}

/// Anchors a semantic scenario error to the line it most likely refers to.
fn anchor(text: &str, e: &ScenarioError) -> String {
    let line = match e {
        ScenarioError::Syntax { .. } => None,
        ScenarioError::Agent { agent, .. } => line_of_key(text, "start", *agent),
        ScenarioError::TooClose { b, which, .. } => line_of_key(text, which, *b),
        ScenarioError::Format(_) => line_of_key(text, "format", 0),
        ScenarioError::Empty => line_of_key(text, "agents", 0),
        _ => None,
    };
    match line {
        Some(line) => format!("line {line}: {e}"),
        None => e.to_string(),
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Scenario::from_json(&text).map_err(|e| CliError::input(format!("{}: {}", path.display(), anchor(&text, &e))))
}

/// Reads a parameter override file, JSON or TOML by extension.
pub fn load_overrides(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| {
            CliError::input(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
        })
    }
}

/// Preset parameters with an optional override file applied.
pub fn parameters(preset: Preset, config: Option<&Path>) -> Result<(PhysParams, AlgoParams), CliError> {
    let (phys, algo) = preset.params();
    match config {
        None => Ok((phys, algo)),
        Some(path) => {
            let overrides = load_overrides(path)?;
            apply_overrides(&phys, &algo, &overrides).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
        }
    }
}

pub fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

/// One cluster is the same computation as sequential execution.
pub fn mode_for(clusters: usize) -> ExecutionMode {
    if clusters <= 1 {
        ExecutionMode::Sequential
    } else {
        ExecutionMode::Clustered(clusters)
    }
}

pub fn engine_config(strategy: Strategy, clusters: usize, scale: bool, seed: u64) -> EngineConfig {
    EngineConfig {
        strategy,
        mode: mode_for(clusters),
        scale,
        seed,
        ..EngineConfig::default()
    }
}

/// Solver statistics summed or maximized over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveSummary {
    pub max_collision_rows: usize,
    pub total_escalations: u64,
    pub min_eps: f64,
    pub max_kkt_residual: f64,
    pub total_iterations: u64,
}

pub fn summarize(diagnostics: &[StepDiagnostics]) -> SolveSummary {
    let mut s = SolveSummary::default();
    for d in diagnostics.iter().flat_map(|d| &d.agents) {
        s.max_collision_rows = s.max_collision_rows.max(d.n_c);
        s.total_escalations += u64::from(d.escalations);
        s.min_eps = s.min_eps.min(d.min_eps);
        s.max_kkt_residual = s.max_kkt_residual.max(d.kkt_max);
        s.total_iterations += d.iterations as u64;
    }
    s
}

/// One planned transition, as stored in a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub key: String,
    pub scenario: String,
    pub agents: usize,
    pub seed: Option<u64>,
    pub strategy: Strategy,
    pub clusters: usize,
    pub scaled: bool,
    /// Absent when the trial could not be set up.
    pub metrics: Option<RunMetrics>,
    pub first_violation: Option<Violation>,
    pub solver: Option<SolveSummary>,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn from_result(
        key: String,
        scenario: &Scenario,
        strategy: Strategy,
        clusters: usize,
        scaled: bool,
        result: &TransitionResult,
    ) -> Self {
        TrialRecord {
            key,
            scenario: scenario.id.clone(),
            agents: scenario.len(),
            seed: scenario.seed,
            strategy,
            clusters,
            scaled,
            metrics: Some(dmpc_core::metrics::compute_metrics(result, scenario)),
            first_violation: result.collision.first_violation,
            solver: Some(summarize(&result.diagnostics)),
            error: None,
        }
    }
}

/// Aggregate over the trials of one sweep setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group: String,
    /// Trials that could not be set up; not counted in `stats`.
    pub errors: usize,
    #[serde(flatten)]
    pub stats: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub format: u32,
    pub trials: Vec<TrialRecord>,
    pub aggregate: Vec<GroupAggregate>,
}

impl ResultsFile {
    /// Builds the file, aggregating trials by `group_of(record)` in order of
    /// first appearance.
    pub fn new(trials: Vec<TrialRecord>, group_of: impl Fn(&TrialRecord) -> String) -> Self {
        let mut groups: Vec<String> = Vec::new();
        for t in &trials {
            let g = group_of(t);
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        let aggregate = groups
            .into_iter()
            .map(|g| {
                let members: Vec<&TrialRecord> = trials.iter().filter(|t| group_of(t) == g).collect();
                GroupAggregate {
                    errors: members.iter().filter(|t| t.metrics.is_none()).count(),
                    stats: aggregate(members.iter().filter_map(|t| t.metrics.as_ref())),
                    group: g,
                }
            })
            .collect();
        ResultsFile {
            format: RESULTS_FORMAT,
            trials,
            aggregate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results always serialize") + "\n"
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
