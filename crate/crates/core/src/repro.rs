//! Canned experiments compared side by side with published measurements.
//!
//! Reference values live in `data/reference.txt`; logic here only looks
//! them up by (figure, series, x).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{missed_pages_experiment, MissedPagesConfig};
use crate::cost::Calibration;
use crate::migration::{coexistence_experiment, MigrationJob, PeerSpec};
use crate::sim::config::{run, ExperimentConfig, RunReport, WorkloadConfig};
use crate::size::ANCHOR_SIZES;
use crate::tracker::{breakdown_from_ledger, Technique};

const REFERENCE: &str = include_str!("../data/reference.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Figure {
    Table1,
    Table5,
    Fig6,
    Fig8,
    Fig9,
    Coexist,
}

impl Figure {
    pub const ALL: [Figure; 6] = [
        Figure::Table1,
        Figure::Table5,
        Figure::Fig6,
        Figure::Fig8,
        Figure::Fig9,
        Figure::Coexist,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Figure::Table1 => "table1",
            Figure::Table5 => "table5",
            Figure::Fig6 => "fig6",
            Figure::Fig8 => "fig8",
            Figure::Fig9 => "fig9",
            Figure::Coexist => "coexist",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown figure {0:?} (expected one of table1, table5, fig6, fig8, fig9, coexist)")]
pub struct UnknownFigure(pub String);

impl FromStr for Figure {
    type Err = UnknownFigure;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.id().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownFigure(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEntry {
    pub figure: String,
    pub series: String,
    pub x: String,
    pub value: f64,
}

/// The embedded reference table.
pub fn reference() -> Vec<RefEntry> {
    REFERENCE
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            assert_eq!(f.len(), 4, "malformed reference line {l:?}");
            RefEntry {
                figure: f[0].into(),
                series: f[1].into(),
                x: f[2].into(),
                value: f[3].parse().expect("numeric reference value"),
            }
        })
        .collect()
}

pub fn lookup(figure: Figure, series: &str, x: &str) -> Option<f64> {
    reference()
        .into_iter()
        .find(|e| e.figure == figure.id() && e.series == series && e.x == x)
        .map(|e| e.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproRow {
    pub figure: Figure,
    pub series: String,
    pub x: String,
    pub reference: Option<f64>,
    pub simulated: f64,
}

impl ReproRow {
    fn new(figure: Figure, series: &str, x: String, simulated: f64) -> Self {
        ReproRow {
            reference: lookup(figure, series, &x),
            figure,
            series: series.to_string(),
            x,
            simulated,
        }
    }

    /// |simulated − reference| / reference.
    pub fn rel_error(&self) -> Option<f64> {
        self.reference
            .filter(|r| *r != 0.0)
            .map(|r| (self.simulated - r).abs() / r.abs())
    }
}

fn sweep(
    techniques: &[Technique],
    workload: WorkloadConfig,
    checkpoint: bool,
    seed: u64,
    cal: &Calibration,
) -> RunReport {
    let cfg = ExperimentConfig {
        seed,
        memory_sizes: ANCHOR_SIZES.to_vec(),
        techniques: techniques.to_vec(),
        workload,
        checkpoint,
        ..Default::default()
    };
    run(&cfg, cal).expect("canned configs are valid")
}

/// Runs the experiment behind `figure`.
pub fn repro(figure: Figure, cal: &Calibration, seed: u64) -> Vec<ReproRow> {
    let mut rows = Vec::new();
    match figure {
        Figure::Table1 => {
            let r = sweep(
                &[Technique::Proc, Technique::Uffd],
                WorkloadConfig::default(),
                false,
                seed,
                cal,
            );
            for p in &r.points {
                let x = p.memory.to_string();
                let name = p.technique.name();
                rows.push(ReproRow::new(figure, name, x.clone(), p.report.overhead_tracked_pct()));
                rows.push(ReproRow::new(
                    figure,
                    &format!("{name}-tracker"),
                    x,
                    p.report.overhead_tracker_pct(),
                ));
            }
        }
        Figure::Table5 => {
            let w = WorkloadConfig::Microbench {
                rounds: 1,
                churn_rate: 0.0,
                checkpoint_each_round: true,
            };
            let r = sweep(&[Technique::Proc, Technique::Spml, Technique::Epml], w, true, seed, cal);
            for p in &r.points {
                rows.push(ReproRow::new(
                    figure,
                    p.technique.name(),
                    p.memory.to_string(),
                    p.report.last_checkpoint_ms(),
                ));
            }
        }
        Figure::Fig6 => {
            let r = sweep(&[Technique::Spml], WorkloadConfig::default(), false, seed, cal);
            for p in &r.points {
                let b = breakdown_from_ledger(&p.report.ledger);
                let x = p.memory.to_string();
                for (s, v) in [
                    ("reverse_mapping", b.reverse_mapping_frac),
                    ("walk", b.walk_frac),
                    ("copy", b.copy_frac),
                    ("other", b.other_frac),
                ] {
                    rows.push(ReproRow::new(figure, s, x.clone(), v));
                }
            }
        }
        Figure::Fig8 => {
            let r = sweep(&Technique::ALL, WorkloadConfig::default(), false, seed, cal);
            for p in &r.points {
                rows.push(ReproRow::new(
                    figure,
                    p.technique.name(),
                    p.memory.to_string(),
                    p.report.overhead_tracked_pct(),
                ));
            }
        }
        Figure::Fig9 => {
            let cal = Arc::new(cal.clone());
            for t in [Technique::Spml, Technique::Epml] {
                let mc = MissedPagesConfig {
                    technique: t,
                    seed,
                    ..Default::default()
                };
                for (size, p) in missed_pages_experiment(&ANCHOR_SIZES, &mc, &cal) {
                    rows.push(ReproRow::new(figure, t.name(), size.to_string(), 100.0 * p));
                }
            }
        }
        Figure::Coexist => {
            let cal = Arc::new(cal.clone());
            let job = MigrationJob {
                seed,
                ..Default::default()
            };
            let r = coexistence_experiment(&job, &PeerSpec::default(), &cal, 12);
            rows.push(ReproRow::new(figure, "inflation", "-".into(), r.inflation_pct));
            rows.push(ReproRow::new(
                figure,
                "alone_ms",
                "-".into(),
                r.alone.total_time_us / 1e3,
            ));
            rows.push(ReproRow::new(
                figure,
                "concurrent_ms",
                "-".into(),
                r.concurrent.total_time_us / 1e3,
            ));
            rows.push(ReproRow::new(
                figure,
                "model_check_violations",
                "-".into(),
                r.model_check_violations.len() as f64,
            ));
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[ReproRow]) -> String {
    let mut out = String::from("figure,series,x,reference,simulated,rel_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.figure,
            r.series,
            r.x,
            opt(r.reference),
            r.simulated,
            opt(r.rel_error())
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::size::ByteSize;

    #[test]
    fn reference_table_loads() {
        let r = reference();
        assert_eq!(r.iter().filter(|e| e.figure == "table5").count(), 21);
        assert_eq!(r.iter().filter(|e| e.figure == "table1").count(), 28);
        assert_eq!(lookup(Figure::Table5, "epml", "1GB"), Some(1011.0));
        for e in &r {
            if e.x != "-" {
                assert!(e.x.parse::<ByteSize>().is_ok(), "{}", e.x);
            }
        }
    }

    #[test]
    fn figure_ids_round_trip_and_reject_unknown() {
        for f in Figure::ALL {
            assert_eq!(f.id().parse::<Figure>().unwrap(), f);
        }
        assert!("fig7".parse::<Figure>().is_err());
    }

    #[test]
    fn rel_error_needs_a_reference() {
        let r = ReproRow {
            figure: Figure::Fig6,
            series: "walk".into(),
            x: "1MB".into(),
            reference: None,
            simulated: 0.3,
        };
        assert_eq!(r.rel_error(), None);
        let r = ReproRow {
            reference: Some(200.0),
            simulated: 150.0,
            ..r
        };
        assert_eq!(r.rel_error(), Some(0.25));
    }
}
