//! CSV and JSON artifact formats.
//!
//! CSV files use RFC 4180 quoting, LF line endings and the shortest
//! round-trip decimal form of every float. JSON reports have sorted keys.
//!
//! Final points: `chain,x_0,…,x_{d-1}`.
//!
//! Trajectories: `chain,step,t,x_0,…,x_{d-1},alpha,dv_norm,deviation`, one
//! row per recorded state. The diagnostic columns describe the step leaving
//! that state and are empty on the last row of each chain.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::ChainResult;

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Write a header and rows of already formatted fields.
pub fn write_table<W: Write>(w: W, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        out.write_record(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn coord_header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("x_{i}")).collect()
}

pub fn final_points_csv<W: Write>(w: W, chains: &[ChainResult], dim: usize) -> Result<()> {
    let mut header = vec!["chain".to_string()];
    header.extend(coord_header(dim));
    let rows: Vec<Vec<String>> = chains
        .iter()
        .map(|c| {
            let mut r = vec![c.chain.to_string()];
            r.extend(c.final_point.iter().map(|v| num(*v)));
            r
        })
        .collect();
    write_table(w, &header, &rows)
}

pub fn trajectory_header(dim: usize) -> Vec<String> {
    let mut header = vec!["chain".to_string(), "step".into(), "t".into()];
    header.extend(coord_header(dim));
    header.extend(["alpha".to_string(), "dv_norm".into(), "deviation".into()]);
    header
}

pub fn trajectory_csv<W: Write>(w: W, chains: &[ChainResult], dim: usize) -> Result<()> {
    let mut rows = Vec::new();
    for c in chains {
        let Some(tr) = &c.trajectory else {
            return Err(Error::Input(format!("chain {} has no recorded trajectory", c.chain)));
        };
        for (k, (t, x)) in tr.states.iter().enumerate() {
            let mut r = vec![c.chain.to_string(), k.to_string(), num(*t)];
            r.extend(x.iter().map(|v| num(*v)));
            match tr.diagnostics.get(k) {
                Some(d) => r.extend([num(d.alpha), num(d.dv_norm), num(d.deviation_from_conditional)]),
                None => r.extend([String::new(), String::new(), String::new()]),
            }
            rows.push(r);
        }
    }
    write_table(w, &trajectory_header(dim), &rows)
}

/// One parsed trajectory-CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub chain: usize,
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
}

/// Parse a trajectory CSV. Errors name the offending line.
pub fn read_trajectory_csv(text: &str) -> Result<(usize, Vec<TrajectoryRow>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Input(format!("line 1: {e}")))?
        .clone();
    let n = header.len();
    if n < 7 {
        return Err(Error::Input(format!("line 1: expected at least 7 columns, found {n}")));
    }
    let dim = n - 6;
    let expected = trajectory_header(dim);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Input(format!("line 1: header must be {}", expected.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Input(format!("line {line}: {e}")))?;
        if rec.len() != n {
            return Err(Error::Input(format!(
                "line {line}: expected {n} fields, found {}",
                rec.len()
            )));
        }
        let int = |j: usize| {
            rec[j].parse::<usize>().map_err(|_| {
                Error::Input(format!(
                    "line {line}: bad integer {:?} in column {}",
                    &rec[j], expected[j]
                ))
            })
        };
        let float = |j: usize| {
            rec[j].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Input(format!(
                    "line {line}: bad number {:?} in column {}",
                    &rec[j], expected[j]
                ))
            })
        };
        let x = (0..dim).map(|j| float(3 + j)).collect::<Result<Vec<f64>>>()?;
        rows.push(TrajectoryRow {
            chain: int(0)?,
            step: int(1)?,
            t: float(2)?,
            x,
        });
    }
    Ok((dim, rows))
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    // Round-tripping through `Value` sorts object keys.
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::StepDiagnostics;
    use crate::sampler::Trajectory;

    fn chain() -> ChainResult {
        ChainResult {
            chain: 3,
            label: 0,
            final_point: vec![0.1, -2.5],
            trajectory: Some(Trajectory {
                label: 0,
                states: vec![(1.0, vec![1.0, 2.0]), (0.0, vec![0.1, -2.5])],
                diagnostics: vec![StepDiagnostics {
                    alpha: 0.5,
                    dv_norm: 1.25,
                    v_c_norm: 2.0,
                    deviation_from_conditional: 0.625,
                    nfe: 3,
                }],
                reference_states: None,
            }),
        }
    }

    #[test]
    fn final_points_format() {
        let mut buf = Vec::new();
        final_points_csv(&mut buf, &[chain()], 2).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "chain,x_0,x_1\n3,0.1,-2.5\n");
    }

    #[test]
    fn trajectory_round_trip() {
        let mut buf = Vec::new();
        trajectory_csv(&mut buf, &[chain()], 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "chain,step,t,x_0,x_1,alpha,dv_norm,deviation\n3,0,1,1,2,0.5,1.25,0.625\n3,1,0,0.1,-2.5,,,\n"
        );
        let (dim, rows) = read_trajectory_csv(&text).unwrap();
        assert_eq!(dim, 2);
        assert_eq!(rows[1].x, vec![0.1, -2.5]);
        assert_eq!(rows[1].chain, 3);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let text = "chain,step,t,x_0,x_1,alpha,dv_norm,deviation\n0,0,1,1,2,,,\n0,1,0,oops,2,,,\n";
        let err = read_trajectory_csv(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = read_trajectory_csv("a,b\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = read_trajectory_csv("chain,step,t,x_0,x_1,alpha,dv_norm,deviation\n0,0,1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn json_keys_are_sorted() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        let s = to_json(&S { zeta: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
    }
}
