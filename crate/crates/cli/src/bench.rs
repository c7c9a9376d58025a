//! Seeded benchmark sweeps.
//!
//! Every combination of agent count, region, strategy and cluster count runs
//! on the trials `seed_base..seed_base + trials`; one seed draws the same
//! scenario for every strategy and cluster count. Results are rewritten after
//! each trial, and a re-run against an existing output file skips trials whose
//! key is already recorded.

use std::path::PathBuf;
use std::sync::Mutex;

use clap::{ArgGroup, Args};
use dmpc_core::engine::{run_transition, Strategy};
use dmpc_core::model::Preset;
use dmpc_core::scenario::{generate_random_scenario, Region};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::common::{engine_config, parameters, parse_preset, write_atomic, CliError, ResultsFile, TrialRecord, EXIT_OK};
use crate::gen::parse_box;

pub const WORKERS_ENV: &str = "DMPC_WORKERS";

#[derive(Args)]
#[command(group(ArgGroup::new("region").required(true).args(["density", "box_dims", "volume"])))]
pub struct BenchArgs {
    /// Trials per setting.
    #[arg(long)]
    pub trials: u64,
    /// Agent counts to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    /// Densities to sweep, agents per cubic meter.
    #[arg(long, value_delimiter = ',')]
    pub density: Vec<f64>,
    /// Workspace side lengths `x,y,z` in meters.
    #[arg(long = "box", value_name = "X,Y,Z", value_parser = parse_box)]
    pub box_dims: Option<Vector3<f64>>,
    /// Volume of a cubic workspace in cubic meters.
    #[arg(long)]
    pub volume: Option<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "soft-on-demand,hard-on-demand,hard-full-horizon"
    )]
    pub strategies: Vec<Strategy>,
    /// Cluster counts to sweep; 1 runs the agents sequentially.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub clusters: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long, default_value = "simulation", value_parser = parse_preset)]
    pub preset: Preset,
    /// JSON or TOML file overriding preset parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Retime each result to the acceleration limit.
    #[arg(long)]
    pub scale: bool,
    /// Results file; existing trials in it are kept and skipped.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy)]
struct Trial {
    n: usize,
    region: Region,
    strategy: Strategy,
    clusters: usize,
    seed: u64,
}

fn region_label(region: &Region) -> String {
    match region {
        Region::Density(rho) => format!("density{rho}"),
        Region::Volume(v) => format!("volume{v}"),
        Region::Box(d) => format!("box{}x{}x{}", d.x, d.y, d.z),
    }
}

fn group_key(strategy: Strategy, clusters: usize, n: usize, region: &str) -> String {
    format!("{strategy}/c{clusters}/n{n}/{region}")
}

impl Trial {
    fn key(&self) -> String {
        format!("{}/s{}", group_key(self.strategy, self.clusters, self.n, &region_label(&self.region)), self.seed)
    }
}

/// Group of a stored record: its key without the trailing seed.
fn group_of(record: &TrialRecord) -> String {
    record.key.rsplit_once('/').map_or(record.key.as_str(), |(g, _)| g).to_string()
}

fn workers() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_existing(path: &std::path::Path) -> Result<Vec<TrialRecord>, CliError> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str::<ResultsFile>(&text)
            .map(|f| f.trials)
            .map_err(|e| CliError::input(format!("{}: cannot resume: line {}: {e}", path.display(), e.line()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(CliError::io(path, e)),
    }
}

pub fn run(args: BenchArgs) -> Result<u8, CliError> {
    if args.clusters.contains(&0) {
        return Err(CliError::usage("cluster counts must be at least 1"));
    }
    let workers = workers()?;
    let (phys, algo) = parameters(args.preset, args.config.as_deref())?;
    let regions: Vec<Region> = if !args.density.is_empty() {
        args.density.iter().map(|&d| Region::Density(d)).collect()
    } else if let Some(d) = args.box_dims {
        vec![Region::Box(d)]
    } else {
        vec![Region::Volume(args.volume.expect("clap requires one region argument"))]
    };

    let mut sweep = Vec::new();
    for &n in &args.n {
        for region in &regions {
            for &strategy in &args.strategies {
                for &clusters in &args.clusters {
                    for seed in args.seed_base..args.seed_base + args.trials {
                        sweep.push(Trial {
                            n,
                            region: *region,
                            strategy,
                            clusters,
                            seed,
                        });
                    }
                }
            }
        }
    }
    let existing = load_existing(&args.out)?;
    let done: std::collections::HashSet<String> = existing.iter().map(|r| r.key.clone()).collect();
    let pending: Vec<Trial> = sweep.iter().filter(|t| !done.contains(&t.key())).copied().collect();
    let order: Vec<String> = sweep.iter().map(Trial::key).collect();
    let rank = |r: &TrialRecord| order.iter().position(|k| *k == r.key).unwrap_or(usize::MAX);
    eprintln!(
        "bench: {} trials, {} already recorded, {} workers",
        sweep.len(),
        sweep.len() - pending.len(),
        workers
    );

    let records = Mutex::new(existing);
    let write = |records: &mut Vec<TrialRecord>| {
        records.sort_by_key(|r| rank(r));
        write_atomic(&args.out, ResultsFile::new(records.clone(), group_of).to_json().as_bytes())
    };
    write(&mut records.lock().expect("results lock"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    pool.install(|| {
        pending.par_iter().try_for_each(|trial| {
            let record = run_trial(trial, &phys, &algo, args.scale);
            let mut all = records.lock().expect("results lock");
            all.push(record);
            write(&mut all)
        })
    })?;

    let file = ResultsFile::new(records.into_inner().expect("results lock"), group_of);
    for g in &file.aggregate {
        let s = &g.stats;
        println!(
            "{}: {}/{} succeeded, wall time {:.4} +- {:.4} s, distance ratio {}",
            g.group,
            s.successes,
            s.trials,
            s.mean_wall_time.unwrap_or(f64::NAN),
            s.std_wall_time.unwrap_or(f64::NAN),
            s.mean_distance_ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
        );
    }
    Ok(EXIT_OK)
}

fn run_trial(
    trial: &Trial,
    phys: &dmpc_core::model::PhysParams,
    algo: &dmpc_core::model::AlgoParams,
    scale: bool,
) -> TrialRecord {
    let failed = |message: String| TrialRecord {
        key: trial.key(),
        scenario: String::new(),
        agents: trial.n,
        seed: Some(trial.seed),
        strategy: trial.strategy,
        clusters: trial.clusters,
        scaled: scale,
        metrics: None,
        first_violation: None,
        solver: None,
        error: Some(message),
    };
    let scenario = match generate_random_scenario(trial.n, trial.region, phys, algo, trial.seed) {
        Ok(s) => s,
        Err(e) => return failed(format!("generation failed: {e}")),
    };
    let config = engine_config(trial.strategy, trial.clusters, scale, trial.seed);
    match run_transition(&scenario, &config) {
        Ok(result) => TrialRecord::from_result(trial.key(), &scenario, trial.strategy, trial.clusters, scale, &result),
        Err(e) => failed(e.to_string()),
    }
}
