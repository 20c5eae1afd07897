//! Plot-ready CSV derived from a run's trace files.
//!
//! Per chain `<id>` (see [`super::chain_id`]) this writes under
//! `metrics/plots/`:
//!
//! * `<id>_curves.csv`: one row per step with `step, noise, lambda, delta,
//!   observed_deviation`, plus `alpha, beta` when DSG was on. Runs without
//!   DSG have no such columns rather than empty ones.
//! * `<id>_score_heatmap.csv`: channels as rows and steps as columns, for
//!   runs with flow gating.
//!
//! and `adherence.csv` with one observed-deviation column per chain.

use std::collections::BTreeMap;
use std::path::Path;

use super::chain_id;
use super::manifest::{FileEntry, RunManifest};
use crate::error::{Error, Result};
use crate::io::write_atomic;

type Rows = Vec<BTreeMap<String, String>>;

fn read_csv(path: &Path) -> Result<Rows> {
    if !path.exists() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "trace file is missing".into(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn to_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Writes the plot data for every chain in `manifest` and returns the
/// inventory of written files.
pub fn emit_plots(manifest: &RunManifest, run_dir: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&run_dir.join(&rel), &bytes)?;
        files.push(FileEntry::new(&rel, &bytes));
        Ok(())
    };
    let mut adherence: Vec<(String, Vec<String>)> = Vec::new();
    let mut steps = 0;
    for cell in &manifest.cells {
        let id = chain_id(&cell.cell, cell.seed);
        let trace = read_csv(&run_dir.join("traces").join(format!("{id}.csv")))?;
        steps = steps.max(trace.len());

        let mut cols = vec!["step", "noise", "lambda", "delta", "observed_deviation"];
        if cell.dsg {
            cols.extend(["alpha", "beta"]);
        }
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(&cols)?;
        for row in &trace {
            out.write_record(cols.iter().map(|c| row.get(*c).map(String::as_str).unwrap_or("")))?;
        }
        put(format!("metrics/plots/{id}_curves.csv"), to_bytes(out)?)?;
        adherence.push((id.clone(), trace.iter().map(|r| r.get("observed_deviation").cloned().unwrap_or_default()).collect()));

        if cell.irr && cell.flf {
            let scores = read_csv(&run_dir.join("traces").join(format!("{id}_scores.csv")))?;
            let mut grid: BTreeMap<usize, BTreeMap<usize, String>> = BTreeMap::new();
            for r in &scores {
                let parse = |k: &str| r.get(k).and_then(|v| v.parse::<usize>().ok());
                if let (Some(step), Some(ch)) = (parse("step"), parse("channel")) {
                    grid.entry(ch).or_default().insert(step, r.get("score").cloned().unwrap_or_default());
                }
            }
            let mut out = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["channel".to_string()];
            header.extend((0..trace.len()).map(|s| format!("step{s}")));
            out.write_record(&header)?;
            for (ch, row) in &grid {
                let mut rec = vec![ch.to_string()];
                rec.extend((0..trace.len()).map(|s| row.get(&s).cloned().unwrap_or_default()));
                out.write_record(&rec)?;
            }
            put(format!("metrics/plots/{id}_score_heatmap.csv"), to_bytes(out)?)?;
        }
    }
    if !adherence.is_empty() {
        let mut out = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string()];
        header.extend(adherence.iter().map(|(id, _)| id.clone()));
        out.write_record(&header)?;
        for s in 0..steps {
            let mut rec = vec![s.to_string()];
            rec.extend(adherence.iter().map(|(_, v)| v.get(s).cloned().unwrap_or_default()));
            out.write_record(&rec)?;
        }
        put("metrics/plots/adherence.csv".into(), to_bytes(out)?)?;
    }
    Ok(files)
}
