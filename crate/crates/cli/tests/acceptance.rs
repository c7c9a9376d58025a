//! Acceptance suite. Prints one verdict line per criterion and exits non-zero
//! if any criterion fails. Every tolerance and budget is pinned below.

use std::process::Command;
use std::time::{Duration, Instant};

use dmpc_core::engine::{run_transition, EngineConfig, ExecutionMode, FailureReason, Strategy, TransitionResult};
use dmpc_core::metrics::{aggregate, compute_metrics, RunMetrics};
use dmpc_core::model::{AgentState, Preset, PredictionMatrices};
use dmpc_core::postprocess::{check_collisions, InterpolatedTrajectory, TrajectorySample};
use dmpc_core::qp::{solve_qp, QpProblem, QpStatus, SolverSettings};
use dmpc_core::scenario::{
    adversarial_scenario, exchange_scenario, generate_random_scenario, Adversarial, AgentSpec, Region, Scenario,
};
use dmpc_core::trajectory_csv::{read_trajectory_csv, trajectory_csv_string};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODEL_DRAWS: usize = 200;
const MODEL_TOL: f64 = 1e-10;
const MODEL_BUDGET: Duration = Duration::from_secs(1);

const QP_DRAWS: usize = 500;
const QP_OBJECTIVE_TOL: f64 = 1e-6;
const KKT_TOL: f64 = 1e-8;
const QP_BUDGET: Duration = Duration::from_secs(30);

const EXCHANGE_DISTANCE_FACTOR: f64 = 1.10;
const EXCHANGE_BUDGET: Duration = Duration::from_secs(10);

const RANDOM_TRIALS: u64 = 50;
const RANDOM_VOLUME: f64 = 4.0;
const RANDOM_MIN_SUCCESS: f64 = 0.90;
const RANDOM_BUDGET: Duration = Duration::from_secs(600);

const COMPARISON_TRIALS: u64 = 50;
const COMPARISON_N: usize = 20;
const COMPARISON_DENSITY: f64 = 1.0;
const COMPARISON_BUDGET: Duration = Duration::from_secs(1800);

const ADVERSARIAL_INSTANCES: u64 = 100;

const CLUSTER_N: usize = 60;
const CLUSTER_DENSITY: f64 = 1.0;
const CLUSTER_COUNTS: [usize; 2] = [1, 8];
const CLUSTER_MIN_REDUCTION: f64 = 0.40;
const CLUSTER_MIN_CORES: usize = 8;
const CLUSTER_BUDGET: Duration = Duration::from_secs(300);

const INJECTED_FIXTURES: u64 = 200;
const CLI_CHECKS: usize = 10;

const DETERMINISM_SCENARIOS: u64 = 5;
const DETERMINISM_CLUSTERS: usize = 4;

enum Verdict {
    Pass,
    Fail,
    NotEvaluated,
}

struct Report {
    lines: Vec<(u32, Verdict, String)>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotEvaluated => "NOT EVALUATED",
        };
        self.lines.push((id, verdict, format!("[{tag}] {id} {name}: {detail}")));
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        self.record(id, name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }
}

/// Everything later criteria re-verify about the runs of earlier ones.
#[derive(Default)]
struct Ledger {
    max_kkt: f64,
    solves: usize,
    soft_qp_failures: usize,
    successes_checked: usize,
    safety_violations: Vec<String>,
    cli_checked: usize,
}

fn engine(strategy: Strategy, mode: ExecutionMode) -> EngineConfig {
    EngineConfig {
        strategy,
        mode,
        ..EngineConfig::default()
    }
}

/// Independent scan of the samples for the earliest pair below `threshold`.
fn brute_force_violation(traj: &InterpolatedTrajectory, s: &Scenario) -> Option<(usize, usize, usize)> {
    let threshold = s.phys.r_min - s.algo.eps_check;
    let n = traj.agents.len();
    let c = s.phys.ellipsoid_c;
    let deg = s.phys.degree as i32;
    for m in 0..traj.samples() {
        for i in 0..n {
            for j in i + 1..n {
                let d = traj.agents[i][m].p - traj.agents[j][m].p;
                let scaled = (d.x.abs().powi(deg) + d.y.abs().powi(deg) + (d.z / c).abs().powi(deg)).powf(1.0 / deg as f64);
                if scaled < threshold {
                    return Some((m, i, j));
                }
            }
        }
    }
    None
}

fn run_cli_check(traj: &InterpolatedTrajectory, s: &Scenario) -> (i32, String) {
    let dir = tempfile::TempDir::new().expect("temp dir");
    let csv = dir.path().join("t.csv");
    let scen = dir.path().join("s.json");
    std::fs::write(&csv, trajectory_csv_string(traj)).expect("write csv");
    s.save(&scen).expect("write scenario");
    let out = Command::new(env!("CARGO_BIN_EXE_dmpc"))
        .arg("check")
        .arg(&csv)
        .arg(&scen)
        .output()
        .expect("dmpc runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

impl Ledger {
    /// Folds a run into the solver and safety tallies.
    fn observe(&mut self, s: &Scenario, config: &EngineConfig, r: &TransitionResult) {
        for a in r.diagnostics.iter().flat_map(|d| &d.agents) {
            self.solves += 1;
            if !a.qp_failed {
                self.max_kkt = self.max_kkt.max(a.kkt_max);
            } else if config.strategy == Strategy::SoftOnDemand {
                self.soft_qp_failures += 1;
            }
        }
        if !r.success {
            return;
        }
        self.successes_checked += 1;
        let text = trajectory_csv_string(&r.interpolated);
        let back = read_trajectory_csv(text.as_bytes()).expect("own CSV parses");
        if let Some((m, i, j)) = brute_force_violation(&back, s) {
            self.safety_violations.push(format!("{}: agents {i},{j} at sample {m}", s.id));
        }
        if self.cli_checked < CLI_CHECKS {
            self.cli_checked += 1;
            let (code, out) = run_cli_check(&r.interpolated, s);
            if code != 0 {
                self.safety_violations.push(format!("{}: dmpc check exited {code}: {out}", s.id));
            }
        }
    }
}

fn enumerate_qp(p: &QpProblem) -> Option<f64> {
    let (n, m) = (p.dim(), p.rows());
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&p.linear));
        for (j, &r) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = p.a_in[(r, c)];
                kkt[(c, n + j)] = p.a_in[(r, c)];
            }
            rhs[n + j] = p.b_in[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let u = sol.rows(0, n).into_owned();
        if (&p.b_in - &p.a_in * &u).iter().any(|s| *s < -1e-9) {
            continue;
        }
        let obj = p.objective(&u);
        best = Some(best.map_or(obj, |b: f64| b.min(obj)));
    }
    best
}

fn criterion_model(report: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..MODEL_DRAWS {
        let horizon = rng.random_range(1..=30usize);
        let h = rng.random_range(0.01..0.5);
        let mut v3 = |r: f64| Vector3::from_fn(|_, _| rng.random_range(-r..r));
        let state = AgentState {
            p: v3(10.0),
            v: v3(5.0),
            a_prev: Vector3::zeros(),
        };
        let inputs: Vec<Vector3<f64>> = (0..horizon).map(|_| v3(5.0)).collect();
        let m = PredictionMatrices::build(horizon, h).expect("valid horizon");
        let x0 = DVector::from_column_slice(state.x0().as_slice());
        let u = DVector::from_iterator(3 * horizon, inputs.iter().flat_map(|a| a.iter().copied()));
        let stacked = &m.a0 * x0 + &m.lambda * u;
        let mut s = state;
        for (k, a) in inputs.iter().enumerate() {
            s = s.step(a, h).expect("finite step");
            for ax in 0..3 {
                worst = worst.max((stacked[3 * k + ax] - s.p[ax]).abs());
            }
        }
    }
    let elapsed = started.elapsed();
    report.check(
        1,
        "model equivalence",
        worst < MODEL_TOL && elapsed < MODEL_BUDGET,
        format!("{MODEL_DRAWS} draws, max error {worst:.2e} m (tol {MODEL_TOL:e}), {elapsed:.2?} (budget {MODEL_BUDGET:?})"),
    );
}

fn criterion_qp_oracle() -> (usize, f64, f64, Duration) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut worst_obj: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for _ in 0..QP_DRAWS {
        let n = rng.random_range(1..=3usize);
        let m = rng.random_range(0..=5usize);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
        let h = (&h + h.transpose()) * 0.5;
        let f = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let p = QpProblem::new(h, f, a, b);
        let sol = solve_qp(&p, &SolverSettings::default(), None).expect("well-formed problem");
        match enumerate_qp(&p) {
            Some(obj) => {
                let err = (sol.objective - obj).abs() / obj.abs().max(1.0);
                worst_obj = worst_obj.max(err);
                worst_kkt = worst_kkt.max(sol.kkt.max());
                if sol.status != QpStatus::Optimal || err > QP_OBJECTIVE_TOL {
                    mismatches += 1;
                }
            }
            None => mismatches += usize::from(sol.status != QpStatus::Infeasible),
        }
    }
    (mismatches, worst_obj, worst_kkt, started.elapsed())
}

fn criterion_exchange(report: &mut Report, ledger: &mut Ledger) {
    let (phys, algo) = Preset::Simulation.params();
    let s = exchange_scenario(&phys, &algo);
    let config = EngineConfig::default();
    let started = Instant::now();
    let r = run_transition(&s, &config).expect("valid scenario");
    let elapsed = started.elapsed();
    ledger.observe(&s, &config, &r);
    let travelled: f64 = r
        .interpolated
        .agents
        .iter()
        .map(|a| a.windows(2).map(|w| (w[1].p - w[0].p).norm()).sum::<f64>())
        .sum();
    let straight = s.straight_line_distance();
    let bound = s.phys.r_min - s.algo.eps_check;
    let ok = r.success
        && r.collision.min_scaled_distance >= bound
        && travelled <= EXCHANGE_DISTANCE_FACTOR * straight
        && elapsed < EXCHANGE_BUDGET;
    report.check(
        3,
        "four-agent exchange",
        ok,
        format!(
            "success {}, min scaled distance {:.4} (>= {bound:.2}), distance {travelled:.3} m = {:.4} x straight line (<= {EXCHANGE_DISTANCE_FACTOR}), {elapsed:.2?} (budget {EXCHANGE_BUDGET:?})",
            r.success,
            r.collision.min_scaled_distance,
            travelled / straight
        ),
    );
}

fn criterion_random(report: &mut Report, ledger: &mut Ledger) {
    let (phys, algo) = Preset::Dense.params();
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [10usize, 20] {
        let mut successes = 0;
        for seed in 0..RANDOM_TRIALS {
            let s = generate_random_scenario(n, Region::Volume(RANDOM_VOLUME), &phys, &algo, seed).expect("packable");
            let config = EngineConfig { seed, ..EngineConfig::default() };
            let r = run_transition(&s, &config).expect("valid scenario");
            ledger.observe(&s, &config, &r);
            successes += usize::from(r.success);
        }
        let rate = successes as f64 / RANDOM_TRIALS as f64;
        ok &= rate >= RANDOM_MIN_SUCCESS;
        parts.push(format!("N={n}: {successes}/{RANDOM_TRIALS}"));
    }
    let elapsed = started.elapsed();
    report.check(
        4,
        "random-transition success",
        ok && elapsed < RANDOM_BUDGET,
        format!(
            "{} in a {RANDOM_VOLUME} m^3 cube, kappa {} (>= {:.0}%), {elapsed:.2?} (budget {RANDOM_BUDGET:?})",
            parts.join(", "),
            algo.kappa,
            RANDOM_MIN_SUCCESS * 100.0
        ),
    );
}

fn criterion_comparison(report: &mut Report, ledger: &mut Ledger) {
    let (phys, algo) = Preset::Simulation.params();
    let started = Instant::now();
    let scenarios: Vec<Scenario> = (0..COMPARISON_TRIALS)
        .map(|seed| {
            generate_random_scenario(COMPARISON_N, Region::Density(COMPARISON_DENSITY), &phys, &algo, seed).expect("packable")
        })
        .collect();
    let mut stats = Vec::new();
    for strategy in Strategy::ALL {
        let runs: Vec<RunMetrics> = scenarios
            .iter()
            .enumerate()
            .map(|(seed, s)| {
                let config = EngineConfig {
                    seed: seed as u64,
                    ..engine(strategy, ExecutionMode::Sequential)
                };
                let r = run_transition(s, &config).expect("valid scenario");
                ledger.observe(s, &config, &r);
                compute_metrics(&r, s)
            })
            .collect();
        stats.push((strategy, aggregate(&runs)));
    }
    let elapsed = started.elapsed();
    let [soft, hard, full] = [&stats[0].1, &stats[1].1, &stats[2].1];
    let wall = |a: &dmpc_core::metrics::Aggregate| a.mean_wall_time.expect("non-empty");
    let ok = soft.successes >= hard.successes
        && soft.successes >= full.successes
        && wall(soft) < wall(full)
        && wall(hard) < wall(full)
        && elapsed < COMPARISON_BUDGET;
    let detail = stats
        .iter()
        .map(|(s, a)| format!("{s} {}/{} in {:.4} s", a.successes, a.trials, wall(a)))
        .collect::<Vec<_>>()
        .join(", ");
    report.check(
        5,
        "strategy comparison",
        ok,
        format!("N={COMPARISON_N} at {COMPARISON_DENSITY}/m^3: {detail}; {elapsed:.2?} (budget {COMPARISON_BUDGET:?})"),
    );
}

fn criterion_adversarial(report: &mut Report, ledger: &mut Ledger) {
    let (phys, algo) = Preset::Simulation.params();
    let mut unrecoverable = Vec::new();
    let mut other_failures = 0;
    let mut max_escalations = 0;
    for seed in 0..ADVERSARIAL_INSTANCES {
        let kind = Adversarial::for_seed(seed);
        let s = adversarial_scenario(kind, &phys, &algo, seed).expect("valid instance");
        let config = EngineConfig { seed, ..EngineConfig::default() };
        let r = run_transition(&s, &config).expect("valid scenario");
        ledger.observe(&s, &config, &r);
        max_escalations = r
            .diagnostics
            .iter()
            .flat_map(|d| &d.agents)
            .map(|a| a.escalations)
            .fold(max_escalations, u32::max);
        match r.failure {
            Some(FailureReason::QpUnrecoverable) => unrecoverable.push(format!("{kind:?}#{seed}")),
            Some(_) => other_failures += 1,
            None => {}
        }
    }
    report.check(
        6,
        "recursive feasibility",
        unrecoverable.is_empty(),
        format!(
            "{ADVERSARIAL_INSTANCES} adversarial instances, {} qp_unrecoverable {:?}, most escalations in one solve {max_escalations}, {other_failures} runs failed for other reasons",
            unrecoverable.len(),
            unrecoverable
        ),
    );
}

fn csv_of(s: &Scenario, config: &EngineConfig) -> (String, TransitionResult) {
    let r = run_transition(s, config).expect("valid scenario");
    (trajectory_csv_string(&r.interpolated), r)
}

fn criterion_clusters(report: &mut Report, ledger: &mut Ledger) {
    let (phys, algo) = Preset::Simulation.params();
    let s = generate_random_scenario(CLUSTER_N, Region::Density(CLUSTER_DENSITY), &phys, &algo, 60).expect("packable");
    let started = Instant::now();
    let mut identical = true;
    let mut walls = Vec::new();
    for c in CLUSTER_COUNTS {
        let config = engine(Strategy::SoftOnDemand, mode_for(c));
        let (a, ra) = csv_of(&s, &config);
        let (b, rb) = csv_of(&s, &config);
        ledger.observe(&s, &config, &ra);
        identical &= a == b;
        walls.push((c, ra.wall_time.min(rb.wall_time), ra.success));
    }
    let elapsed = started.elapsed();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let timing = walls
        .iter()
        .map(|(c, w, ok)| format!("C={c} {w:.2?} success {ok}"))
        .collect::<Vec<_>>()
        .join(", ");
    let base = format!("N={CLUSTER_N}: reruns identical {identical}; {timing}; {elapsed:.2?} (budget {CLUSTER_BUDGET:?})");
    if !identical || elapsed >= CLUSTER_BUDGET {
        report.check(7, "parallel clusters", false, base);
    } else if cores < CLUSTER_MIN_CORES {
        report.record(
            7,
            "parallel clusters",
            Verdict::NotEvaluated,
            format!("{base}; wall-time reduction needs >= {CLUSTER_MIN_CORES} cores, host has {cores}"),
        );
    } else {
        let reduction = 1.0 - walls[1].1.as_secs_f64() / walls[0].1.as_secs_f64();
        report.check(
            7,
            "parallel clusters",
            reduction >= CLUSTER_MIN_REDUCTION,
            format!("{base}; reduction {:.0}% (>= {:.0}%)", reduction * 100.0, CLUSTER_MIN_REDUCTION * 100.0),
        );
    }
}

fn mode_for(clusters: usize) -> ExecutionMode {
    if clusters <= 1 {
        ExecutionMode::Sequential
    } else {
        ExecutionMode::Clustered(clusters)
    }
}

/// Hovering agents on a line with violations injected at random samples.
fn injected_fixture(rng: &mut ChaCha8Rng) -> (Scenario, InterpolatedTrajectory) {
    let (phys, algo) = Preset::Simulation.params();
    let n = rng.random_range(2..=6usize);
    let samples = rng.random_range(5..=60usize);
    let home: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(-2.0 + 0.8 * i as f64, 0.0, 1.0)).collect();
    let agents = home.iter().map(|p| AgentSpec { start: *p, goal: *p, is_static: true }).collect();
    let s = Scenario::new("injected", agents, phys, algo);
    let mut pos: Vec<Vec<Vector3<f64>>> = home.iter().map(|p| vec![*p; samples]).collect();
    for _ in 0..rng.random_range(1..=3) {
        let m = rng.random_range(1..samples - 1);
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let gap = rng.random_range(0.0..0.25);
        pos[j][m] = pos[i][m] + Vector3::new(gap, 0.0, 0.0);
    }
    let traj = InterpolatedTrajectory {
        ts: 0.01,
        agents: pos
            .into_iter()
            .map(|ps| {
                ps.into_iter()
                    .enumerate()
                    .map(|(m, p)| TrajectorySample { t: m as f64 * 0.01, p, v: Vector3::zeros(), a: Vector3::zeros() })
                    .collect()
            })
            .collect(),
    };
    (s, traj)
}

fn criterion_safety(report: &mut Report, ledger: &Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut wrong = Vec::new();
    for k in 0..INJECTED_FIXTURES {
        let (s, traj) = injected_fixture(&mut rng);
        let expected = brute_force_violation(&traj, &s).expect("fixture has a violation");
        let got = check_collisions(&traj, s.phys.r_min, s.algo.eps_check, s.phys.ellipsoid_c, s.phys.degree);
        let v = got.first_violation;
        let matches = v.is_some_and(|v| (v.sample, v.agents.0, v.agents.1) == expected && v.t == traj.agents[0][expected.0].t);
        if got.passed || !matches {
            wrong.push(format!("fixture {k}: expected {expected:?}, got {v:?}"));
        }
        if (k as usize) < CLI_CHECKS {
            let (code, out) = run_cli_check(&traj, &s);
            let needle = format!("agents {} and {} at t = {:.4} s", expected.1, expected.2, expected.0 as f64 * 0.01);
            if code != 3 || !out.contains(&needle) {
                wrong.push(format!("fixture {k}: dmpc check exited {code}: {out}"));
            }
        }
    }
    let ok = ledger.safety_violations.is_empty() && wrong.is_empty() && ledger.successes_checked > 0;
    let mut detail = format!(
        "{} successful runs re-scanned after CSV round trip ({} also through `dmpc check`), {} below threshold; {INJECTED_FIXTURES} injected fixtures, {} misreported",
        ledger.successes_checked,
        ledger.cli_checked,
        ledger.safety_violations.len(),
        wrong.len()
    );
    for w in ledger.safety_violations.iter().chain(&wrong).take(3) {
        detail.push_str(&format!("; {w}"));
    }
    report.check(8, "safety-check soundness", ok, detail);
}

fn criterion_determinism(report: &mut Report) {
    let (phys, algo) = Preset::Simulation.params();
    let (dphys, dalgo) = Preset::Dense.params();
    let mut scenarios = vec![exchange_scenario(&phys, &algo)];
    for seed in 0..DETERMINISM_SCENARIOS {
        scenarios.push(generate_random_scenario(COMPARISON_N, Region::Density(COMPARISON_DENSITY), &phys, &algo, seed).expect("packable"));
        scenarios.push(generate_random_scenario(20, Region::Volume(RANDOM_VOLUME), &dphys, &dalgo, seed).expect("packable"));
        scenarios.push(adversarial_scenario(Adversarial::for_seed(seed), &phys, &algo, seed).expect("valid instance"));
    }
    let mut runs = 0;
    let mut differing = Vec::new();
    for s in &scenarios {
        for strategy in Strategy::ALL {
            for mode in [ExecutionMode::Sequential, ExecutionMode::Clustered(DETERMINISM_CLUSTERS)] {
                let config = engine(strategy, mode);
                let (a, _) = csv_of(s, &config);
                let (b, _) = csv_of(s, &config);
                runs += 1;
                if a != b {
                    differing.push(format!("{} {strategy} {mode:?}", s.id));
                }
            }
        }
    }
    report.check(
        9,
        "determinism",
        differing.is_empty(),
        format!(
            "{} scenarios x 3 strategies x {{sequential, {DETERMINISM_CLUSTERS} clusters}}: {runs} reruns, {} with differing CSV bytes {:?}",
            scenarios.len(),
            differing.len(),
            differing
        ),
    );
}

fn main() {
    // `cargo test -- --list` and similar harness probes expect no work.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { lines: Vec::new() };
    let mut ledger = Ledger::default();

    criterion_model(&mut report);
    let (mismatches, worst_obj, worst_kkt, qp_elapsed) = criterion_qp_oracle();
    criterion_exchange(&mut report, &mut ledger);
    criterion_random(&mut report, &mut ledger);
    criterion_comparison(&mut report, &mut ledger);
    criterion_adversarial(&mut report, &mut ledger);
    criterion_clusters(&mut report, &mut ledger);
    report.check(
        2,
        "QP oracle",
        mismatches == 0 && worst_kkt < KKT_TOL && ledger.max_kkt < KKT_TOL && qp_elapsed < QP_BUDGET,
        format!(
            "{QP_DRAWS} tiny QPs vs enumeration: {mismatches} mismatches, max objective error {worst_obj:.1e} (tol {QP_OBJECTIVE_TOL:e}), max KKT {worst_kkt:.1e}, {qp_elapsed:.2?} (budget {QP_BUDGET:?}); {} suite solves, max KKT {:.1e} (tol {KKT_TOL:e}), {} soft solves without a solution",
            ledger.solves, ledger.max_kkt, ledger.soft_qp_failures
        ),
    );
    criterion_safety(&mut report, &ledger);
    criterion_determinism(&mut report);

    report.lines.sort_by_key(|(id, _, _)| *id);
    for (_, _, line) in &report.lines {
        println!("{line}");
    }
    let failed = report.lines.iter().filter(|(_, v, _)| matches!(v, Verdict::Fail)).count();
    println!("acceptance: {} criteria, {failed} failed", report.lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
