use std::path::PathBuf;

use clap::{ArgGroup, Args};
use dmpc_core::model::Preset;
use dmpc_core::scenario::{generate_random_scenario, Region};
use nalgebra::Vector3;

use crate::common::{parameters, parse_preset, CliError, EXIT_OK};

#[derive(Args)]
#[command(group(ArgGroup::new("region").required(true).args(["density", "box_dims", "volume"])))]
pub struct GenArgs {
    /// Number of agents.
    #[arg(long)]
    pub n: usize,
    /// Agents per cubic meter; the workspace is a cube of matching volume.
    #[arg(long)]
    pub density: Option<f64>,
    /// Workspace side lengths `x,y,z` in meters.
    #[arg(long = "box", value_name = "X,Y,Z", value_parser = parse_box)]
    pub box_dims: Option<Vector3<f64>>,
    /// Volume of a cubic workspace in cubic meters.
    #[arg(long)]
    pub volume: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter preset: simulation, experiment or dense.
    #[arg(long, default_value = "simulation", value_parser = parse_preset)]
    pub preset: Preset,
    /// JSON or TOML file overriding preset parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output scenario path.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

pub fn parse_box(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err("expected three comma-separated lengths".into()),
    }
}

pub fn region_of(density: Option<f64>, box_dims: Option<Vector3<f64>>, volume: Option<f64>) -> Region {
    match (density, box_dims, volume) {
        (Some(rho), _, _) => Region::Density(rho),
        (_, Some(d), _) => Region::Box(d),
        (_, _, Some(v)) => Region::Volume(v),
        _ => unreachable!("clap requires one region argument"),
    }
}

pub fn run(args: GenArgs) -> Result<u8, CliError> {
    let (phys, algo) = parameters(args.preset, args.config.as_deref())?;
    let region = region_of(args.density, args.box_dims, args.volume);
    let scenario = generate_random_scenario(args.n, region, &phys, &algo, args.seed)
        .map_err(|e| CliError::input(format!("generation failed: {e}")))?;
    scenario.save(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let d = scenario.phys.p_max - scenario.phys.p_min;
    println!(
        "wrote {}: {} agents in a {:.3} x {:.3} x {:.3} m box",
        args.out.display(),
        scenario.len(),
        d.x,
        d.y,
        d.z
    );
    Ok(EXIT_OK)
}
