//! Trajectory CSV files.
//!
//! Header `agent_id,t,px,py,pz,vx,vy,vz,ax,ay,az`; one row per sample, rows
//! grouped by agent in ascending id and then by time. Values are SI units
//! written with 9 significant digits.

use std::io::{Read, Write};

use nalgebra::Vector3;
use thiserror::Error;

use crate::postprocess::{InterpolatedTrajectory, TrajectorySample};

pub const HEADER: [&str; 11] = ["agent_id", "t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az"];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
}

impl From<csv::Error> for CsvError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CsvError::Io(io),
            kind => CsvError::Malformed {
                line,
                message: format!("{kind:?}"),
            },
        }
    }
}

fn num(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn write_trajectory_csv<W: Write>(traj: &InterpolatedTrajectory, out: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for (id, samples) in traj.agents.iter().enumerate() {
        for s in samples {
            let mut rec = vec![id.to_string(), num(s.t)];
            rec.extend(s.p.iter().chain(s.v.iter()).chain(s.a.iter()).map(|x| num(*x)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn trajectory_csv_string(traj: &InterpolatedTrajectory) -> String {
    let mut buf = Vec::new();
    write_trajectory_csv(traj, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is ASCII")
}

/// Parses a trajectory file, requiring every agent to share one time column.
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<InterpolatedTrajectory, CsvError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(CsvError::Malformed {
            line: 1,
            message: format!("expected header `{}`", HEADER.join(",")),
        });
    }
    let mut agents: Vec<Vec<TrajectorySample>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| CsvError::Malformed { line, message };
        let id: usize = rec[0].trim().parse().map_err(|_| bad(format!("bad agent id `{}`", &rec[0])))?;
        let mut vals = [0.0f64; 10];
        for (k, v) in vals.iter_mut().enumerate() {
            let field = &rec[k + 1];
            *v = field.trim().parse().map_err(|_| bad(format!("bad number `{field}` in column {}", HEADER[k + 1])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in column {}", HEADER[k + 1])));
            }
        }
        if id == agents.len() {
            agents.push(Vec::new());
        } else if id + 1 != agents.len() {
            return Err(bad(format!("agent {id} out of order")));
        }
        let samples = agents.last_mut().expect("pushed above");
        if samples.last().is_some_and(|s| s.t >= vals[0]) {
            return Err(bad(format!("time {} does not increase", vals[0])));
        }
        samples.push(TrajectorySample {
            t: vals[0],
            p: Vector3::new(vals[1], vals[2], vals[3]),
            v: Vector3::new(vals[4], vals[5], vals[6]),
            a: Vector3::new(vals[7], vals[8], vals[9]),
        });
    }
    let Some(first) = agents.first() else {
        return Err(CsvError::Malformed {
            line: 1,
            message: "no samples".into(),
        });
    };
    for (id, samples) in agents.iter().enumerate() {
        let same = samples.len() == first.len() && samples.iter().zip(first).all(|(a, b)| a.t == b.t);
        if !same {
            return Err(CsvError::Malformed {
                line: 0,
                message: format!("agent {id} does not share agent 0's time samples"),
            });
        }
    }
    let ts = if first.len() > 1 { first[1].t - first[0].t } else { 0.0 };
    Ok(InterpolatedTrajectory { ts, agents })
}
