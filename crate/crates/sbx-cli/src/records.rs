//! The per-run results CSV: `seed,task,epoch,step,split,metric,value`,
//! six-decimal values, LF line endings.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};

pub const HEADER: &str = "seed,task,epoch,step,split,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub seed: u64,
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn render(rows: &[Row]) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            r.seed, r.task, r.epoch, r.step, r.split, r.metric, r.value
        )
        .expect("writing to string");
    }
    out
}

pub fn write_file(path: &Path, rows: &[Row]) -> anyhow::Result<()> {
    std::fs::write(path, render(rows))
        .with_context(|| format!("writing records to {}", path.display()))?;
    Ok(())
}

/// Parses a records CSV; malformed lines fail with their line number.
pub fn parse_file(path: &Path) -> anyhow::Result<Vec<Row>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading records from {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == HEADER => {}
        Some((_, first)) => bail!("line 1: expected header {HEADER:?}, got {first:?}"),
        None => bail!("line 1: empty records file"),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            bail!("line {lineno}: expected 7 fields, got {}", fields.len());
        }
        let row = Row {
            seed: fields[0].parse().with_context(|| format!("line {lineno}: seed"))?,
            task: fields[1].parse().with_context(|| format!("line {lineno}: task"))?,
            epoch: fields[2].parse().with_context(|| format!("line {lineno}: epoch"))?,
            step: fields[3].parse().with_context(|| format!("line {lineno}: step"))?,
            split: fields[4].to_string(),
            metric: fields[5].to_string(),
            value: fields[6].parse().with_context(|| format!("line {lineno}: value"))?,
        };
        rows.push(row);
    }
    Ok(rows)
}
