//! Trace CSV files: `family,t1_us,n,total_time_us,p,sigma_p`.
//!
//! A file may hold several traces; consecutive rows sharing family and
//! spacing belong to the same trace. `t1_us` is empty for sequences
//! without a fixed spacing. Lines starting with `#` are comments and may
//! carry provenance.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoherenceTrace, SequenceFamily, TraceRecord};

pub const TRACE_HEADER: [&str; 6] = ["family", "t1_us", "n", "total_time_us", "p", "sigma_p"];

#[derive(Serialize, Deserialize)]
struct Row {
    family: String,
    t1_us: Option<f64>,
    n: usize,
    total_time_us: f64,
    p: f64,
    sigma_p: f64,
}

pub fn write_traces<W: Write>(out: W, traces: &[CoherenceTrace]) -> Result<()> {
    write_annotated_traces(out, &[], traces)
}

/// Like [`write_traces`], preceded by one `# ` comment line per note.
pub fn write_annotated_traces<W: Write>(
    mut out: W,
    notes: &[String],
    traces: &[CoherenceTrace],
) -> Result<()> {
    for note in notes {
        if note.contains('\n') {
            return Err(Error::InvalidData(
                "comment lines cannot contain newlines".into(),
            ));
        }
        writeln!(out, "# {note}")?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for t in traces {
        for r in &t.records {
            w.serialize(Row {
                family: t.family.to_string(),
                t1_us: t.t1,
                n: r.n,
                total_time_us: r.total_time,
                p: r.p,
                sigma_p: r.sigma_p,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn traces_to_string(traces: &[CoherenceTrace]) -> Result<String> {
    let mut buf = Vec::new();
    write_traces(&mut buf, traces)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// Reads every trace in a CSV stream. Errors name the offending line.
pub fn read_traces<R: Read>(mut input: R) -> Result<Vec<CoherenceTrace>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    // Physical line number of every non-comment line.
    let mut lines = Vec::new();
    let mut body = String::with_capacity(text.len());
    for (i, l) in text.lines().enumerate() {
        if !l.trim_start().starts_with('#') {
            lines.push(i as u64 + 1);
            body.push_str(l);
            body.push('\n');
        }
    }
    let physical = |line: u64| {
        lines
            .get(line.saturating_sub(1) as usize)
            .copied()
            .unwrap_or(line)
    };

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(TRACE_HEADER) {
        let line = physical(1);
        return Err(Error::InvalidData(format!(
            "line {line}: expected header `{}`, found `{}`",
            TRACE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut traces: Vec<CoherenceTrace> = Vec::new();
    let mut starts: Vec<u64> = Vec::new();
    let mut current: Option<(String, Option<f64>)> = None;
    let mut raw = csv::StringRecord::new();
    while rdr
        .read_record(&mut raw)
        .map_err(|e| csv_diagnostic(e, &physical))?
    {
        let line = physical(raw.position().map_or(0, |p| p.line()));
        let row: Row = raw
            .deserialize(Some(&header))
            .map_err(|e| csv_diagnostic_at(e, line))?;
        let key = (row.family.clone(), row.t1_us);
        if current.as_ref() != Some(&key) {
            let family: SequenceFamily = row
                .family
                .parse()
                .map_err(|e| Error::InvalidData(format!("line {line}: {e}")))?;
            traces.push(CoherenceTrace {
                family,
                t1: row.t1_us,
                records: Vec::new(),
            });
            starts.push(line);
            current = Some(key);
        }
        traces
            .last_mut()
            .expect("pushed above")
            .records
            .push(TraceRecord {
                n: row.n,
                total_time: row.total_time_us,
                p: row.p,
                sigma_p: row.sigma_p,
            });
    }
    for (t, line) in traces.iter().zip(starts) {
        t.validate()
            .map_err(|e| Error::InvalidData(format!("trace starting at line {line}: {e}")))?;
    }
    Ok(traces)
}

fn csv_diagnostic_at(e: csv::Error, line: u64) -> Error {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => {
            let msg = match err.field() {
                Some(i) => format!(
                    "column `{}`: {}",
                    TRACE_HEADER.get(i as usize).unwrap_or(&"?"),
                    err.kind()
                ),
                None => err.kind().to_string(),
            };
            Error::InvalidData(format!("line {line}: {msg}"))
        }
        _ => csv_diagnostic(e, &|l| l),
    }
}

fn csv_diagnostic(e: csv::Error, physical: &dyn Fn(u64) -> u64) -> Error {
    match e.position() {
        Some(pos) => {
            let msg = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => match err.field() {
                    Some(i) => format!(
                        "column `{}`: {}",
                        TRACE_HEADER.get(i as usize).unwrap_or(&"?"),
                        err.kind()
                    ),
                    None => err.kind().to_string(),
                },
                _ => e.to_string(),
            };
            Error::InvalidData(format!("line {}: {msg}", physical(pos.line())))
        }
        None => Error::Csv(e),
    }
}

pub fn read_trace_file(path: &Path) -> Result<Vec<CoherenceTrace>> {
    let f = std::fs::File::open(path)?;
    read_traces(f).map_err(|e| match e {
        Error::InvalidData(m) => Error::InvalidData(format!("{}: {m}", path.display())),
        Error::Csv(c) => Error::InvalidData(format!("{}: {c}", path.display())),
        other => other,
    })
}

/// All `*.csv` files of a directory in name order.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Every trace found in a file or in the CSV files of a directory.
pub fn read_trace_path(path: &Path) -> Result<Vec<CoherenceTrace>> {
    if path.is_dir() {
        let mut out = Vec::new();
        for f in trace_files(path)? {
            out.extend(read_trace_file(&f)?);
        }
        Ok(out)
    } else {
        read_trace_file(path)
    }
}
