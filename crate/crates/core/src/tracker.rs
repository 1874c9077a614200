//! Tracker techniques, their configuration and per-run phase reports.
//!
//! A run goes through initialization, monitoring, collection and
//! exploitation. The phase flows themselves are executed by
//! [`Vm`](crate::sim::machine::Vm); this module holds the shared types.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::addr::{AddressSpace, Gva, Pid};
use crate::cost::{Calibration, Charge, CostLedger, Metric, Phase};
use crate::sim::machine::Vm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Proc,
    #[serde(rename = "userfaultfd", alias = "uffd")]
    Uffd,
    Spml,
    Epml,
}

impl Technique {
    pub const ALL: [Technique; 4] = [Technique::Proc, Technique::Uffd, Technique::Spml, Technique::Epml];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Proc => "proc",
            Technique::Uffd => "userfaultfd",
            Technique::Spml => "spml",
            Technique::Epml => "epml",
        }
    }

    /// Techniques whose Tracker polls a ring buffer.
    pub fn uses_ring(self) -> bool {
        matches!(self, Technique::Spml | Technique::Epml)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown technique {0:?} (expected proc, userfaultfd, spml or epml)")]
pub struct UnknownTechnique(pub String);

impl FromStr for Technique {
    type Err = UnknownTechnique;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proc" | "/proc" | "soft-dirty" => Ok(Technique::Proc),
            "userfaultfd" | "uffd" => Ok(Technique::Uffd),
            "spml" => Ok(Technique::Spml),
            "epml" => Ok(Technique::Epml),
            _ => Err(UnknownTechnique(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub technique: Technique,
    /// Period of ring drains; infinite means a single drain at collection.
    pub collection_interval_us: f64,
    pub target_pid: Pid,
    /// GVA page range watched by userfaultfd; `None` means everything.
    pub monitored_range: Option<Range<u64>>,
    /// Charge the SPML page-table walk on every periodic drain instead of
    /// once per collection.
    pub walk_each_drain: bool,
}

impl TrackerConfig {
    pub fn new(technique: Technique) -> Self {
        TrackerConfig {
            technique,
            collection_interval_us: 1_000.0,
            target_pid: crate::sim::machine::TRACKED_PID,
            monitored_range: None,
            walk_each_drain: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.technique.uses_ring() && (self.collection_interval_us.is_nan() || self.collection_interval_us <= 0.0) {
            return Err(TrackerError::BadInterval(self.collection_interval_us));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackerError {
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("collection interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("bottleneck breakdown needs an SPML run, got {0}")]
    WrongTechnique(String),
}

/// Results of one monitoring interval (between two collections).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub index: usize,
    /// Pages reported dirty, restricted to pages mapped at collection.
    pub dirty: BTreeSet<Gva>,
    /// Written pages whose log record could not be mapped back to them.
    pub missed: BTreeSet<Gva>,
    /// (reported GVA, GVA actually written) pairs.
    pub inaccurate: BTreeSet<(Gva, Gva)>,
    /// Pages actually written in the interval and still mapped.
    pub truth: BTreeSet<Gva>,
    pub collect_us: f64,
    pub exploit_us: f64,
    pub rearm_us: f64,
    pub dropped: u64,
}

impl IntervalReport {
    /// Collection, exploitation and re-arming time, in ms.
    pub fn checkpoint_ms(&self) -> f64 {
        (self.collect_us + self.exploit_us + self.rearm_us) / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerPhaseReport {
    pub technique: Option<Technique>,
    pub memory_bytes: u64,
    /// Untracked execution time of Tracked.
    pub ideal_us: f64,
    pub tracked_us: f64,
    pub tracker_us: f64,
    pub init_time: f64,
    pub monitor_span: f64,
    pub collect_time: f64,
    pub exploit_time: f64,
    pub tracked_suspension_total: f64,
    pub dirty_set: BTreeSet<Gva>,
    pub missed: BTreeSet<Gva>,
    pub inaccurate: BTreeSet<(Gva, Gva)>,
    pub intervals: Vec<IntervalReport>,
    pub ledger: CostLedger,
}

impl TrackerPhaseReport {
    pub fn overhead_tracked_pct(&self) -> f64 {
        crate::cost::overhead(self.tracked_us, self.ideal_us)
    }

    pub fn overhead_tracker_pct(&self) -> f64 {
        crate::cost::overhead(self.tracker_us, self.ideal_us)
    }

    pub fn last_checkpoint_ms(&self) -> f64 {
        self.intervals.last().map_or(0.0, IntervalReport::checkpoint_ms)
    }
}

/// Context handed to the exploitation plugin after each collection.
pub struct ExploitCtx<'a> {
    pub mem: &'a AddressSpace,
    pub pid: Pid,
    pub dirty: &'a BTreeSet<Gva>,
    pub interval: usize,
    pub cal: &'a Calibration,
}

/// Exploitation phase plugin (empty by default).
pub trait Exploit: Send {
    /// Runs once before Tracked starts; returns µs of Tracker work.
    fn on_launch(&mut self, _ctx: ExploitCtx<'_>) -> f64 {
        0.0
    }

    /// Runs after every collection; returns µs of Tracker work.
    fn exploit(&mut self, ctx: ExploitCtx<'_>) -> f64;

    fn as_any(&self) -> &dyn std::any::Any;
}

/// Runs the configured tracker on `vm` until Tracked finishes or `until`
/// µs of virtual time have elapsed since launch.
pub fn run_tracker(vm: &mut Vm, until: f64) -> Result<TrackerPhaseReport, TrackerError> {
    if let Some(cfg) = &vm.tracker {
        cfg.validate()?;
        if cfg.target_pid != crate::sim::machine::TRACKED_PID {
            return Err(TrackerError::UnknownPid(cfg.target_pid));
        }
    }
    Ok(crate::sim::machine::run_single(vm, until))
}

/// Drains the ring on behalf of the Tracker and returns the GVAs obtained.
pub fn drain_ring(vm: &mut Vm) -> Vec<Gva> {
    vm.drain_ring_now()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub reverse_mapping_frac: f64,
    pub walk_frac: f64,
    pub copy_frac: f64,
    pub other_frac: f64,
}

/// Splits SPML collection time by metric.
pub fn spml_bottleneck_breakdown(report: &TrackerPhaseReport) -> Result<Breakdown, TrackerError> {
    if report.technique != Some(Technique::Spml) {
        return Err(TrackerError::WrongTechnique(
            report.technique.map_or("none".into(), |t| t.to_string()),
        ));
    }
    Ok(breakdown_from_ledger(&report.ledger))
}

pub fn breakdown_from_ledger(ledger: &CostLedger) -> Breakdown {
    let of = |m: Metric| ledger.sum_where(|_, p, c| p == Phase::Collect && c == Charge::Metric(m));
    let total = ledger.phase_total(Phase::Collect);
    let (rm, walk, copy) = (of(Metric::M17), of(Metric::M16), of(Metric::M18));
    if total <= 0.0 || rm + walk + copy <= 0.0 {
        return Breakdown {
            reverse_mapping_frac: 0.0,
            walk_frac: 0.0,
            copy_frac: 0.0,
            other_frac: 1.0,
        };
    }
    let (r, w, c) = (rm / total, walk / total, copy / total);
    Breakdown {
        reverse_mapping_frac: r,
        walk_frac: w,
        copy_frac: c,
        other_frac: 1.0 - r - w - c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::Entity;

    #[test]
    fn technique_names() {
        for t in Technique::ALL {
            assert_eq!(t.name().parse::<Technique>().unwrap(), t);
        }
        assert_eq!("uffd".parse::<Technique>().unwrap(), Technique::Uffd);
        assert!("pml".parse::<Technique>().is_err());
    }

    #[test]
    fn breakdown_sums_to_one() {
        let mut l = CostLedger::new();
        l.charge(Entity::Tracker, Phase::Collect, Charge::Metric(Metric::M17), 60.0);
        l.charge(Entity::Tracker, Phase::Collect, Charge::Metric(Metric::M16), 30.0);
        l.charge(Entity::Hypervisor, Phase::Collect, Charge::Metric(Metric::M18), 5.0);
        l.charge(Entity::Tracker, Phase::Collect, Charge::Metric(Metric::M1), 5.0);
        l.charge(Entity::Tracked, Phase::Monitor, Charge::Metric(Metric::M14), 500.0);
        let b = breakdown_from_ledger(&l);
        assert!((b.reverse_mapping_frac - 0.6).abs() < 1e-12);
        assert!((b.reverse_mapping_frac + b.walk_frac + b.copy_frac + b.other_frac - 1.0).abs() < 1e-9);
        let empty = breakdown_from_ledger(&CostLedger::new());
        assert_eq!(empty.other_frac, 1.0);
    }
}
