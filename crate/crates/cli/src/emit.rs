//! Result serialization: aggregate tables as CSV/JSON/Markdown plus a
//! per-seed JSONL audit log. Aggregate files carry no timing and are
//! formatted through a single significant-digit rule, so rerunning the
//! same config reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use crate::runner::{ResultRow, RunOutput, SeedRecord};
use crate::{HarnessError, Result};

/// Format with a fixed number of significant digits (4 in all emitted
/// tables). Integers larger than 10^digits keep their full integer part.
pub fn format_sig(v: f64, digits: u32) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return format!("{:.*}", digits as usize - 1, 0.0);
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

fn fmt_row(row: &ResultRow) -> (String, String) {
    (format_sig(row.mean, 4), format_sig(row.std, 4))
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("estimator,dataset,metric,mean,std,seeds\n");
    for row in rows {
        let (mean, std) = fmt_row(row);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.estimator, row.dataset, row.metric, mean, std, row.seeds
        ));
    }
    out
}

pub fn results_json(rows: &[ResultRow]) -> Result<String> {
    #[derive(serde::Serialize)]
    struct JsonRow<'a> {
        estimator: &'a str,
        dataset: &'a str,
        metric: &'a str,
        mean: f64,
        std: f64,
        seeds: usize,
    }
    let shaped: Vec<JsonRow> = rows
        .iter()
        .map(|row| {
            let (mean, std) = fmt_row(row);
            JsonRow {
                estimator: &row.estimator,
                dataset: &row.dataset,
                metric: &row.metric,
                // re-parse the rounded strings so JSON shows the same
                // 4-digit values as the CSV
                mean: mean.parse().unwrap_or(row.mean),
                std: std.parse().unwrap_or(row.std),
                seeds: row.seeds,
            }
        })
        .collect();
    Ok(serde_json::to_string_pretty(&shaped)? + "\n")
}

pub fn results_markdown(rows: &[ResultRow]) -> String {
    let mut out = String::from(
        "| estimator | dataset | metric | mean | std | seeds |\n\
         |---|---|---|---:|---:|---:|\n",
    );
    for row in rows {
        let (mean, std) = fmt_row(row);
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            row.estimator, row.dataset, row.metric, mean, std, row.seeds
        ));
    }
    out
}

pub fn seed_log_jsonl(records: &[SeedRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse a results.csv produced by [`results_csv`] back into rows.
/// Wall time is not part of the file, so it comes back as zero.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("estimator,dataset,metric,mean,std,seeds") => {}
        other => {
            return Err(HarnessError::Config(format!(
                "unexpected results header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(HarnessError::Config(format!(
                "results line {} has {} fields",
                i + 2,
                parts.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| HarnessError::Config(format!("bad {what} '{s}' on line {}", i + 2)))
        };
        rows.push(ResultRow {
            estimator: parts[0].to_string(),
            dataset: parts[1].to_string(),
            metric: parts[2].to_string(),
            mean: parse_f(parts[3], "mean")?,
            std: parse_f(parts[4], "std")?,
            seeds: parts[5]
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad seed count on line {}", i + 2)))?,
            wall_ms_total: 0,
        });
    }
    Ok(rows)
}

/// Write the aggregate tables and the per-seed log under `dir`.
/// Returns the paths written, in a fixed order.
pub fn write_all(dir: &Path, output: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let targets = [
        ("results.csv", results_csv(&output.rows)),
        ("results.json", results_json(&output.rows)?),
        ("results.md", results_markdown(&output.rows)),
        ("seed_log.jsonl", seed_log_jsonl(&output.seed_records)?),
    ];
    let mut written = Vec::new();
    for (name, content) in targets {
        let path = dir.join(name);
        fs::write(&path, content)?;
        written.push(path);
    }
    Ok(written)
}
