//! Report rows and their CSV, JSON and plot-data renderings.
//!
//! Floats are printed with Rust's shortest round-trip formatting, so the
//! three formats carry identical values and output is byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::sim::config::{Format, RunPoint, RunReport};

pub const CSV_HEADER: [&str; 15] = [
    "technique",
    "memory_bytes",
    "ideal_us",
    "tracked_us",
    "tracker_us",
    "overhead_tracked_pct",
    "overhead_tracker_pct",
    "init_us",
    "collect_us",
    "suspension_us",
    "n_sched_events",
    "vmexits",
    "missed",
    "dropped",
    "checkpoint_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub technique: String,
    pub memory_bytes: u64,
    pub ideal_us: f64,
    pub tracked_us: f64,
    pub tracker_us: f64,
    pub overhead_tracked_pct: f64,
    pub overhead_tracker_pct: f64,
    pub init_us: f64,
    pub collect_us: f64,
    pub suspension_us: f64,
    pub n_sched_events: u64,
    pub vmexits: u64,
    pub missed: u64,
    pub dropped: u64,
    pub checkpoint_ms: f64,
}

impl ReportRow {
    pub fn from_point(p: &RunPoint) -> Self {
        let r = &p.report;
        ReportRow {
            technique: p.technique.name().to_string(),
            memory_bytes: p.memory.bytes(),
            ideal_us: r.ideal_us,
            tracked_us: r.tracked_us,
            tracker_us: r.tracker_us,
            overhead_tracked_pct: r.overhead_tracked_pct(),
            overhead_tracker_pct: r.overhead_tracker_pct(),
            init_us: r.init_time,
            collect_us: r.collect_time,
            suspension_us: r.tracked_suspension_total,
            n_sched_events: r.ledger.counts.sched_events,
            vmexits: r.ledger.counts.vmexits,
            missed: r.missed.len() as u64,
            dropped: r.ledger.counts.dropped,
            checkpoint_ms: r.last_checkpoint_ms(),
        }
    }

    fn csv_fields(&self) -> [String; 15] {
        [
            self.technique.clone(),
            self.memory_bytes.to_string(),
            self.ideal_us.to_string(),
            self.tracked_us.to_string(),
            self.tracker_us.to_string(),
            self.overhead_tracked_pct.to_string(),
            self.overhead_tracker_pct.to_string(),
            self.init_us.to_string(),
            self.collect_us.to_string(),
            self.suspension_us.to_string(),
            self.n_sched_events.to_string(),
            self.vmexits.to_string(),
            self.missed.to_string(),
            self.dropped.to_string(),
            self.checkpoint_ms.to_string(),
        ]
    }
}

pub fn rows(report: &RunReport) -> Vec<ReportRow> {
    report.points.iter().map(ReportRow::from_point).collect()
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_fields().join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, thiserror::Error)]
#[error("csv line {line}: {msg}")]
pub struct CsvError {
    pub line: usize,
    pub msg: String,
}

/// Parses the output of [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<ReportRow>, CsvError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER.join(",") => {}
        _ => {
            return Err(CsvError {
                line: 1,
                msg: "unexpected header".into(),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let err = |msg: String| CsvError { line: i + 1, msg };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != CSV_HEADER.len() {
                return Err(err(format!("{} fields", f.len())));
            }
            let fl = |k: usize| f[k].parse::<f64>().map_err(|e| err(format!("{}: {e}", CSV_HEADER[k])));
            let int = |k: usize| f[k].parse::<u64>().map_err(|e| err(format!("{}: {e}", CSV_HEADER[k])));
            Ok(ReportRow {
                technique: f[0].to_string(),
                memory_bytes: int(1)?,
                ideal_us: fl(2)?,
                tracked_us: fl(3)?,
                tracker_us: fl(4)?,
                overhead_tracked_pct: fl(5)?,
                overhead_tracker_pct: fl(6)?,
                init_us: fl(7)?,
                collect_us: fl(8)?,
                suspension_us: fl(9)?,
                n_sched_events: int(10)?,
                vmexits: int(11)?,
                missed: int(12)?,
                dropped: int(13)?,
                checkpoint_ms: fl(14)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct JsonReport<'a> {
    rows: &'a [ReportRow],
    #[serde(skip_serializing_if = "Option::is_none")]
    migration: Option<&'a crate::migration::CoexistReport>,
}

pub fn to_json(report: &RunReport) -> String {
    let rows = rows(report);
    serde_json::to_string_pretty(&JsonReport {
        rows: &rows,
        migration: report.migration.as_ref(),
    })
    .expect("report serializes")
}

/// Plot series keyed by (metric, technique): x = memory bytes.
pub fn plot_series(rows: &[ReportRow]) -> BTreeMap<(String, String), Vec<(f64, f64)>> {
    let mut s: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let x = r.memory_bytes as f64;
        for (metric, y) in [
            ("overhead_tracked_pct", r.overhead_tracked_pct),
            ("overhead_tracker_pct", r.overhead_tracker_pct),
            ("checkpoint_ms", r.checkpoint_ms),
            ("missed", r.missed as f64),
        ] {
            s.entry((metric.to_string(), r.technique.clone()))
                .or_default()
                .push((x, y));
        }
    }
    s
}

/// Gnuplot-style blocks: `# <metric> <technique>` then `x y` lines.
pub fn to_plotdata(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for ((metric, tech), pts) in plot_series(rows) {
        let _ = writeln!(out, "# {metric} {tech}");
        for (x, y) in pts {
            let _ = writeln!(out, "{x} {y}");
        }
        out.push('\n');
    }
    out
}

/// Writes the requested formats into `dir`; returns the files written.
pub fn emit_reports(report: &RunReport, formats: &[Format], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let rows = rows(report);
    let mut written = Vec::new();
    for f in formats {
        let (name, body) = match f {
            Format::Csv => ("report.csv", to_csv(&rows)),
            Format::Json => ("report.json", to_json(report)),
            Format::Plotdata => ("plotdata.dat", to_plotdata(&rows)),
        };
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}
