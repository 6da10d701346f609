//! Report files. CSV headers:
//!
//! - iterations: `run,prompt,seed,iteration,selector,gamma,prefix_len,accepted,emitted,accept_flags,rejected_accept_prob,draft_kv_bytes,verify_kv_bytes,selection_bytes,mean_k,retention`
//! - grid: `sparse_ratio,gamma,iterations,mean_accepted,mean_emitted,context,iteration_time,throughput,per_position_acceptance`
//! - compare: `selector,gamma,sparse_ratio,iterations,mean_accepted,mean_emitted,per_position_acceptance,selection_overhead_fraction,mean_retention,throughput`
//!
//! Sequences are written as `;`-separated values and missing values as empty fields.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::harness::bench::Benchmark;
use crate::harness::compare::CompareRow;
use crate::harness::sweep::GridCell;
use crate::speculation::IterationStats;
use crate::Result;

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Raw stats line: the benchmark cell a record belongs to plus the record.
#[derive(Serialize)]
pub struct StatsLine<'a> {
    pub run: usize,
    pub prompt: usize,
    pub seed: u64,
    pub sparse_ratio: f64,
    #[serde(flatten)]
    pub stats: &'a IterationStats,
}

pub fn stats_lines<'a>(benches: &[&'a Benchmark]) -> Vec<StatsLine<'a>> {
    let mut out = Vec::new();
    for (run, b) in benches.iter().enumerate() {
        for r in &b.runs {
            for s in &r.stats {
                out.push(StatsLine { run, prompt: r.prompt_index, seed: r.seed, sparse_ratio: b.params.selector.sparse_ratio, stats: s });
            }
        }
    }
    out
}

pub fn write_iterations_csv(path: &Path, benches: &[&Benchmark]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run", "prompt", "seed", "iteration", "selector", "gamma", "prefix_len", "accepted", "emitted", "accept_flags",
        "rejected_accept_prob", "draft_kv_bytes", "verify_kv_bytes", "selection_bytes", "mean_k", "retention",
    ])?;
    for line in stats_lines(benches) {
        let s = line.stats;
        let flags: String = s.accept_flags.iter().map(|&f| if f { '1' } else { '0' }).collect();
        w.write_record([
            line.run.to_string(),
            line.prompt.to_string(),
            line.seed.to_string(),
            s.iteration.to_string(),
            s.selector.to_string(),
            s.gamma.to_string(),
            s.prefix_len.to_string(),
            s.accepted.to_string(),
            s.emitted.len().to_string(),
            flags,
            s.rejected_accept_prob.map(fmt).unwrap_or_default(),
            s.draft_kv_bytes.to_string(),
            s.verify_kv_bytes.to_string(),
            s.selection_bytes.to_string(),
            fmt(s.mean_k),
            s.retention.map(fmt).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid_csv(path: &Path, cells: &[GridCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sparse_ratio", "gamma", "iterations", "mean_accepted", "mean_emitted", "context", "iteration_time", "throughput",
        "per_position_acceptance",
    ])?;
    for c in cells {
        w.write_record([
            c.sparse_ratio.to_string(),
            c.gamma.to_string(),
            c.iterations.to_string(),
            fmt(c.mean_accepted),
            fmt(c.mean_emitted),
            fmt(c.context),
            format!("{:.9e}", c.iteration_time),
            fmt(c.throughput),
            join(&c.per_position_acceptance.iter().map(|&v| fmt(v)).collect::<Vec<_>>()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "selector", "gamma", "sparse_ratio", "iterations", "mean_accepted", "mean_emitted", "per_position_acceptance",
        "selection_overhead_fraction", "mean_retention", "throughput",
    ])?;
    for r in rows {
        w.write_record([
            r.selector.to_string(),
            r.gamma.to_string(),
            r.sparse_ratio.to_string(),
            r.iterations.to_string(),
            fmt(r.mean_accepted),
            fmt(r.mean_emitted),
            join(&r.per_position_acceptance.iter().map(|&v| fmt(v)).collect::<Vec<_>>()),
            fmt(r.selection_overhead_fraction),
            r.mean_retention.map(fmt).unwrap_or_default(),
            fmt(r.throughput),
        ])?;
    }
    w.flush()?;
    Ok(())
}
