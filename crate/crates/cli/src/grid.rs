//! Running an experiment grid and writing its tables.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use caic_core::simulation::{run_simulation, Estimate, ReplicateRecord, SimResult};
use serde::Serialize;

use crate::config::{ExperimentGrid, GridRow};
use crate::CliError;

pub const CSV_COLUMNS: [&str; 15] = [
    "n_ta",
    "dispersion_name",
    "dispersion_value",
    "delta",
    "rb_method2",
    "rb_method2_se",
    "rb_method1",
    "rb_method1_se",
    "n_converged",
    "n_discarded",
    "bc_true",
    "bc_true_se",
    "bc_est_method2",
    "bc_est_method1",
    "status",
];

pub const CSV_FILE: &str = "rb_table.csv";
pub const MARKDOWN_FILE: &str = "rb_table.md";
pub const RECORDS_FILE: &str = "replicates.ndjson";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub threads: usize,
    pub timestamp: bool,
}

#[derive(Debug)]
pub struct RowOutcome {
    pub row: GridRow,
    pub result: Result<SimResult, String>,
}

impl RowOutcome {
    pub fn status(&self) -> String {
        match &self.result {
            Ok(r) if r.warnings.is_empty() => "ok".into(),
            Ok(r) => format!("warning: {}", r.warnings.join("; ")),
            Err(e) => format!("failed: {e}"),
        }
    }
}

#[derive(Debug)]
pub struct GridOutcome {
    pub rows: Vec<RowOutcome>,
    pub csv_path: PathBuf,
    pub markdown_path: PathBuf,
    pub records_path: PathBuf,
}

impl GridOutcome {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.result.is_err())
    }
}

/// Run every row on a pool of `threads` workers. Results do not depend on
/// the thread count: each replicate owns its random stream and records are
/// reduced in replicate order.
pub fn run_rows(grid: &ExperimentGrid, threads: usize) -> Result<Vec<RowOutcome>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(grid
        .rows
        .iter()
        .zip(&grid.configs)
        .map(|(row, cfg)| RowOutcome {
            row: *row,
            result: pool.install(|| run_simulation(cfg)).map_err(|e| e.to_string()),
        })
        .collect())
}

pub fn run_grid(grid: &ExperimentGrid, out_dir: &Path, opts: &RunOptions) -> Result<GridOutcome, CliError> {
    std::fs::create_dir_all(out_dir).map_err(CliError::io)?;
    let rows = run_rows(grid, opts.threads)?;
    let stamp = opts.timestamp.then(timestamp_line);
    let csv_path = out_dir.join(CSV_FILE);
    let markdown_path = out_dir.join(MARKDOWN_FILE);
    let records_path = out_dir.join(RECORDS_FILE);
    std::fs::write(&csv_path, render_csv(grid, &rows, stamp.as_deref())?).map_err(CliError::io)?;
    std::fs::write(&markdown_path, render_markdown(grid, &rows, stamp.as_deref())).map_err(CliError::io)?;
    write_records(&records_path, &rows)?;
    Ok(GridOutcome { rows, csv_path, markdown_path, records_path })
}

fn timestamp_line() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("# generated at unix time {secs}")
}

fn num(x: f64) -> String {
    // shortest round-trip form, so every value can be re-read exactly
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn opt_est(e: Option<Estimate>) -> (String, String) {
    e.map_or((String::new(), String::new()), |e| (num(e.value), num(e.se)))
}

pub fn render_csv(grid: &ExperimentGrid, rows: &[RowOutcome], stamp: Option<&str>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    if let Some(s) = stamp {
        writeln!(buf, "{s}").map_err(CliError::io)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(CSV_COLUMNS).map_err(CliError::io)?;
        for r in rows {
            let row = &r.row;
            let mut rec = vec![
                row.replicates.to_string(),
                grid.family.dispersion_name().to_string(),
                num(row.dispersion),
                num(row.delta),
            ];
            match &r.result {
                Ok(s) => {
                    let (rb2, rb2se) = opt_est(s.rb_method2);
                    let (rb1, rb1se) = opt_est(s.rb_method1);
                    rec.extend([rb2, rb2se, rb1, rb1se]);
                    rec.extend([s.n_converged.to_string(), s.n_discarded.to_string()]);
                    rec.extend([num(s.bc_true.value), num(s.bc_true.se)]);
                    rec.push(s.bc_est_method2.map_or(String::new(), |e| num(e.value)));
                    rec.push(s.bc_est_method1.map_or(String::new(), |e| num(e.value)));
                }
                Err(_) => rec.extend(std::iter::repeat_n(String::new(), 10)),
            }
            rec.push(r.status());
            w.write_record(&rec).map_err(CliError::io)?;
        }
        w.flush().map_err(CliError::io)?;
    }
    Ok(buf)
}

fn fmt_rb(e: Option<Estimate>) -> String {
    match e {
        Some(e) => format!("{:.3} ({:.3})", e.value, e.se),
        None => "-".into(),
    }
}

/// Aligned markdown rendering with MC standard errors in parentheses.
pub fn render_markdown(grid: &ExperimentGrid, rows: &[RowOutcome], stamp: Option<&str>) -> String {
    let header = [
        "n_ta".to_string(),
        grid.family.dispersion_name().to_string(),
        "delta".into(),
        "RB method 2".into(),
        "RB method 1".into(),
        "BC_true".into(),
        "converged".into(),
        "discarded".into(),
        "status".into(),
    ];
    let mut table: Vec<Vec<String>> = vec![header.to_vec()];
    for r in rows {
        let mut line = vec![r.row.replicates.to_string(), format!("{}", r.row.dispersion), format!("{}", r.row.delta)];
        match &r.result {
            Ok(s) => line.extend([
                fmt_rb(s.rb_method2),
                fmt_rb(s.rb_method1),
                format!("{:.2} ({:.2})", s.bc_true.value, s.bc_true.se),
                s.n_converged.to_string(),
                s.n_discarded.to_string(),
            ]),
            Err(_) => line.extend(std::iter::repeat_n("-".to_string(), 5)),
        }
        line.push(r.status());
        table.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if let Some(s) = stamp {
        let _ = writeln!(out, "<!-- {} -->\n", s.trim_start_matches("# "));
    }
    let fmt_line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    out.push_str(&fmt_line(&table[0]));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for l in &table[1..] {
        out.push_str(&fmt_line(l));
    }
    out
}

#[derive(Serialize)]
struct RowRecord<'a> {
    row: usize,
    #[serde(flatten)]
    record: &'a ReplicateRecord,
}

fn write_records(path: &Path, rows: &[RowOutcome]) -> Result<(), CliError> {
    let f = std::fs::File::create(path).map_err(CliError::io)?;
    let mut w = std::io::BufWriter::new(f);
    for (i, r) in rows.iter().enumerate() {
        if let Ok(s) = &r.result {
            for rec in &s.records {
                serde_json::to_writer(&mut w, &RowRecord { row: i, record: rec })
                    .map_err(|e| CliError::Io(e.to_string()))?;
                w.write_all(b"\n").map_err(CliError::io)?;
            }
        }
    }
    w.flush().map_err(CliError::io)
}
