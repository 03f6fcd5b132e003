//! File formats: problem JSON, path CSVs and the plot-ready outputs.

use std::fs;
use std::path::Path;

use minfo_core::matcore::SymMat;
use minfo_core::planner::{clearance, Scenario, Trajectory};
use minfo_core::{DistortionSpec, ProblemFile, ResidualRecord, SystemModel};
use nalgebra::DVector;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

/// Parses a JSON file, reporting syntax errors as `path:line:column: message`.
pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::parse(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })
}

fn from_value<T: serde::de::DeserializeOwned>(value: Value, what: &Path) -> CliResult<T> {
    serde_json::from_value(value).map_err(|e| CliError::parse(format!("{}: {e}", what.display())))
}

/// Loads a problem from a model file, optionally merged with a separate
/// distortion file whose keys override the model's.
pub fn load_problem(model: &Path, spec: Option<&Path>) -> CliResult<(SystemModel, DistortionSpec)> {
    let mut merged = read_json(model)?;
    if let Some(spec) = spec {
        let extra = read_json(spec)?;
        match (merged.as_object_mut(), extra) {
            (Some(base), Value::Object(more)) => base.extend(more),
            _ => {
                return Err(CliError::parse(format!(
                    "{} and {} must both hold JSON objects",
                    model.display(),
                    spec.display()
                )))
            }
        }
    }
    let file: ProblemFile = from_value(merged, model)?;
    Ok(file.into_model()?)
}

pub fn load_scenario(path: &Path) -> CliResult<Scenario> {
    from_value(read_json(path)?, path)
}

pub fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn residual_rows(history: &[ResidualRecord]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = ["iter", "pri", "dual", "objective"].map(String::from).to_vec();
    let rows = history
        .iter()
        .map(|r| vec![r.iter.to_string(), num(r.pri), num(r.dual), num(r.objective)])
        .collect();
    (header, rows)
}

/// Reads states and inputs from a CSV with columns `x1..xn` and `u1..um`.
/// Other columns are ignored; the inputs of the last row may be empty.
pub fn read_path_csv(path: &Path, n: usize, m: usize) -> CliResult<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let column = |name: String| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::parse(format!("{}: missing column {name}", path.display())))
    };
    let xc = (1..=n).map(|i| column(format!("x{i}"))).collect::<CliResult<Vec<_>>>()?;
    let uc = (1..=m).map(|i| column(format!("u{i}"))).collect::<CliResult<Vec<_>>>()?;
    let (mut xs, mut us) = (Vec::new(), Vec::new());
    let mut inputs_ended = false;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| -> CliResult<Option<f64>> {
            let s = rec.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| CliError::parse(format!("{}:{line}: bad number {s:?}", path.display())))
        };
        let x = xc
            .iter()
            .map(|&c| field(c)?.ok_or_else(|| CliError::parse(format!("{}:{line}: empty state", path.display()))))
            .collect::<CliResult<Vec<_>>>()?;
        xs.push(DVector::from_vec(x));
        let u = uc.iter().map(|&c| field(c)).collect::<CliResult<Vec<_>>>()?;
        if u.iter().all(Option::is_none) {
            inputs_ended = true;
        } else if inputs_ended || u.iter().any(Option::is_none) {
            return Err(CliError::parse(format!("{}:{line}: incomplete input row", path.display())));
        } else {
            us.push(DVector::from_vec(u.into_iter().flatten().collect()));
        }
    }
    if xs.is_empty() || us.len() + 1 != xs.len() {
        return Err(CliError::parse(format!(
            "{}: expected one fewer input than state rows, got {} states and {} inputs",
            path.display(),
            xs.len(),
            us.len()
        )));
    }
    Ok((xs, us))
}

/// Trajectory CSV: `t, x1.., u1.., P_i_j.. (column-major), clearance_1..`.
pub fn write_trajectory(path: &Path, traj: &Trajectory, obstacles: &[DVector<f64>]) -> CliResult<()> {
    let n = traj.x.first().map_or(0, |x| x.len());
    let m = traj.u.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    for j in 1..=n {
        header.extend((1..=n).map(|i| format!("P_{i}_{j}")));
    }
    header.extend((1..=obstacles.len()).map(|k| format!("clearance_{k}")));
    let mut rows = Vec::with_capacity(traj.x.len());
    for (t, (x, p)) in traj.x.iter().zip(&traj.p).enumerate() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(x.iter().map(|&v| num(v)));
        match traj.u.get(t) {
            Some(u) => row.extend(u.iter().map(|&v| num(v))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        row.extend(p.matrix().iter().map(|&v| num(v)));
        for obs in obstacles {
            row.push(num(clearance(x, p, obs)?));
        }
        rows.push(row);
    }
    write_csv(path, &header, &rows)
}

/// Per-step rates as `t, trace_P, D, rate`.
pub fn write_rates(path: &Path, p: &[SymMat], d: &[f64], rates: &[f64]) -> CliResult<()> {
    let header = ["t", "trace_P", "D", "rate"].map(String::from).to_vec();
    let rows = p
        .iter()
        .zip(d)
        .zip(rates)
        .enumerate()
        .map(|(t, ((p, d), r))| vec![(t + 1).to_string(), num(p.trace()), num(*d), num(*r)])
        .collect::<Vec<_>>();
    write_csv(path, &header, &rows)
}
