//! Metric catalog, size interpolation, the per-run cost ledger and the
//! EPML execution-time estimator.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::size::{ByteSize, ANCHOR_SIZES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
    M11,
    M12,
    M13,
    M14,
    M15,
    M16,
    M17,
    M18,
}

impl Metric {
    pub const ALL: [Metric; 18] = [
        Metric::M1,
        Metric::M2,
        Metric::M3,
        Metric::M4,
        Metric::M5,
        Metric::M6,
        Metric::M7,
        Metric::M8,
        Metric::M9,
        Metric::M10,
        Metric::M11,
        Metric::M12,
        Metric::M13,
        Metric::M14,
        Metric::M15,
        Metric::M16,
        Metric::M17,
        Metric::M18,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Metric> {
        Metric::ALL.get(usize::from(id).checked_sub(1)?).copied()
    }

    /// Whether the cost depends on the tracked memory size.
    pub fn is_sized(self) -> bool {
        matches!(
            self,
            Metric::M2 | Metric::M5 | Metric::M6 | Metric::M14 | Metric::M15 | Metric::M16 | Metric::M17 | Metric::M18
        )
    }

    pub fn description(self) -> &'static str {
        match self {
            Metric::M1 => "context switch (user to kernel)",
            Metric::M2 => "write_protect ioctl",
            Metric::M3 => "init PML (ioctl)",
            Metric::M4 => "deactivate PML (ioctl)",
            Metric::M5 => "page fault handling in kernel",
            Metric::M6 => "page fault handling in userspace",
            Metric::M7 => "vmread",
            Metric::M8 => "vmwrite",
            Metric::M9 => "init PML hypercall",
            Metric::M10 => "init PML + VMCS shadowing hypercall",
            Metric::M11 => "PML deactivation hypercall",
            Metric::M12 => "PML + VMCS shadowing deactivation hypercall",
            Metric::M13 => "enable_logging hypercall",
            Metric::M14 => "disable_logging hypercall",
            Metric::M15 => "clear_refs soft-dirty clear",
            Metric::M16 => "userspace page table walk",
            Metric::M17 => "reverse mapping",
            Metric::M18 => "ring buffer copy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.id())
    }
}

impl FromStr for Metric {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        t.strip_prefix('M')
            .or_else(|| t.strip_prefix('m'))
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(Metric::from_id)
            .ok_or_else(|| CostError::UnknownMetric(t.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("calibration line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("anchors for {0} are not strictly increasing in memory size")]
    UnorderedAnchors(Metric),
}

/// Calibrated metric costs. Fixed costs are in µs; sized anchors are stored
/// as (bytes, µs) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    fixed: BTreeMap<Metric, f64>,
    sized: BTreeMap<Metric, Vec<(u64, f64)>>,
}

const FIXED_DEFAULTS: [(Metric, f64); 10] = [
    (Metric::M1, 0.315),
    (Metric::M3, 5_651.0),
    (Metric::M4, 2_816.0),
    (Metric::M7, 0.936),
    (Metric::M8, 0.801),
    (Metric::M9, 5_495.0),
    (Metric::M10, 5_878.0),
    (Metric::M11, 2_060.0),
    (Metric::M12, 2_755.0),
    (Metric::M13, 0.3),
];

// Milliseconds at 1MB, 10MB, 50MB, 100MB, 250MB, 500MB, 1GB.
const SIZED_DEFAULTS_MS: [(Metric, [f64; 7]); 7] = [
    (Metric::M5, [0.003, 0.3, 1.68, 3.34, 8.39, 16.79, 33.58]),
    (Metric::M6, [2.5, 27.3, 152.3, 347.1, 882.8, 1_585.0, 3_483.0]),
    (Metric::M14, [0.042, 0.047, 0.138, 0.156, 0.189, 0.203, 0.208]),
    (Metric::M15, [0.032, 0.0912, 0.174, 0.288, 0.613, 1.153, 2.234]),
    (Metric::M16, [1.912, 14.479, 41.832, 82.289, 161.973, 307.109, 594.187]),
    (
        Metric::M17,
        [6.183, 24.653, 85.117, 255.437, 1_211.0, 4_123.0, 15_738.0],
    ),
    (Metric::M18, [0.003, 0.01, 0.03, 0.048, 0.109, 0.383, 0.671]),
];

impl Default for CostTable {
    fn default() -> Self {
        let fixed = FIXED_DEFAULTS.iter().copied().collect();
        let mut sized: BTreeMap<Metric, Vec<(u64, f64)>> = SIZED_DEFAULTS_MS
            .iter()
            .map(|(m, ms)| {
                let anchors = ANCHOR_SIZES
                    .iter()
                    .zip(ms)
                    .map(|(s, v)| (s.bytes(), v * 1000.0))
                    .collect();
                (*m, anchors)
            })
            .collect();
        // No published anchors: folded into M6 unless overridden.
        sized.insert(Metric::M2, Vec::new());
        CostTable { fixed, sized }
    }
}

impl CostTable {
    /// Cost of `metric` in µs for a tracked memory of `memory` bytes.
    pub fn cost_of(&self, metric: Metric, memory: ByteSize) -> Result<f64, CostError> {
        if let Some(v) = self.fixed.get(&metric) {
            return Ok(*v);
        }
        match self.sized.get(&metric) {
            Some(anchors) => Ok(interpolate(anchors, memory.bytes())),
            None => Err(CostError::UnknownMetric(metric.to_string())),
        }
    }

    /// Like [`cost_of`](Self::cost_of) for metrics known to be present.
    pub fn us(&self, metric: Metric, memory: ByteSize) -> f64 {
        self.cost_of(metric, memory).unwrap_or(0.0)
    }

    /// Share of a sized metric attributable to one page out of `memory`.
    pub fn per_page(&self, metric: Metric, memory: ByteSize) -> f64 {
        let pages = memory.pages().max(1);
        self.us(metric, memory) / pages as f64
    }

    pub fn set_fixed(&mut self, metric: Metric, us: f64) {
        self.sized.remove(&metric);
        self.fixed.insert(metric, us);
    }

    /// Sets one anchor (µs) of a sized metric, replacing any anchor at that size.
    pub fn set_anchor(&mut self, metric: Metric, memory: ByteSize, us: f64) {
        self.fixed.remove(&metric);
        let anchors = self.sized.entry(metric).or_default();
        match anchors.binary_search_by_key(&memory.bytes(), |a| a.0) {
            Ok(i) => anchors[i].1 = us,
            Err(i) => anchors.insert(i, (memory.bytes(), us)),
        }
    }

    pub fn anchors(&self, metric: Metric) -> Option<&[(u64, f64)]> {
        self.sized.get(&metric).map(Vec::as_slice)
    }

    pub fn fixed(&self, metric: Metric) -> Option<f64> {
        self.fixed.get(&metric).copied()
    }

    pub fn validate(&self) -> Result<(), CostError> {
        for (m, a) in &self.sized {
            if a.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(CostError::UnorderedAnchors(*m));
            }
        }
        Ok(())
    }
}

/// Piecewise-linear through the anchors, linear extrapolation past the last
/// segment, clamped to the first anchor below it.
fn interpolate(anchors: &[(u64, f64)], x: u64) -> f64 {
    match anchors {
        [] => 0.0,
        [(_, v)] => *v,
        _ => {
            if x <= anchors[0].0 {
                return anchors[0].1;
            }
            let i = anchors
                .windows(2)
                .position(|w| x <= w[1].0)
                .unwrap_or(anchors.len() - 2);
            let (x0, y0) = anchors[i];
            let (x1, y1) = anchors[i + 1];
            let t = (x as f64 - x0 as f64) / (x1 as f64 - x0 as f64);
            y0 + t * (y1 - y0)
        }
    }
}

/// Cost table plus the simulator constants that the published metrics do
/// not cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub table: CostTable,
    /// Compute time of one page write of the micro-benchmark.
    pub write_us: f64,
    /// Round trip of a PML-buffer-full vmexit.
    pub vmexit_us: f64,
    /// Fixed part of a checkpoint dump.
    pub dump_base_ms: f64,
    /// Per-page part of a checkpoint dump.
    pub dump_page_us: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            table: CostTable::default(),
            write_us: 0.877,
            vmexit_us: 2_000.0,
            dump_base_ms: 109.9,
            dump_page_us: 3.995,
        }
    }
}

impl Calibration {
    /// Parses a flat `key = value` file on top of the defaults. Keys are
    /// `M<k>` (µs), `M<k>@<size>` (ms) or one of the simulator constants.
    pub fn parse(text: &str) -> Result<Calibration, CostError> {
        let mut cal = Calibration::default();
        let mut overridden: BTreeMap<Metric, bool> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| CostError::Parse { line: n + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr("expected key = value".into()))?;
            let k = k.trim();
            let v: f64 = v
                .trim()
                .replace(',', "")
                .parse()
                .map_err(|_| perr(format!("bad number {:?}", v.trim())))?;
            if !v.is_finite() || v < 0.0 {
                return Err(perr(format!("{k} must be a non-negative number")));
            }
            match k {
                "write_us" => cal.write_us = v,
                "vmexit_us" => cal.vmexit_us = v,
                "dump_base_ms" => cal.dump_base_ms = v,
                "dump_page_us" => cal.dump_page_us = v,
                _ => {
                    if let Some((m, size)) = k.split_once('@') {
                        let metric: Metric = m.parse().map_err(|e: CostError| perr(e.to_string()))?;
                        let size: ByteSize = size
                            .parse()
                            .map_err(|e: crate::size::ParseSizeError| perr(e.to_string()))?;
                        // The first anchor in a file replaces the default curve.
                        if !overridden.insert(metric, true).unwrap_or(false) {
                            cal.table.sized.insert(metric, Vec::new());
                            cal.table.fixed.remove(&metric);
                        }
                        cal.table.set_anchor(metric, size, v * 1000.0);
                    } else {
                        let metric: Metric = k.parse().map_err(|e: CostError| perr(e.to_string()))?;
                        cal.table.set_fixed(metric, v);
                    }
                }
            }
        }
        cal.table.validate()?;
        Ok(cal)
    }

    /// Serializes every value so that `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# fixed metrics in us, sized anchors in ms\n");
        for m in Metric::ALL {
            if let Some(v) = self.table.fixed.get(&m) {
                out.push_str(&format!("{m} = {v}\n"));
            } else if let Some(a) = self.table.sized.get(&m) {
                for (b, us) in a {
                    out.push_str(&format!("{m}@{} = {}\n", ByteSize(*b), us / 1000.0));
                }
            }
        }
        out.push_str(&format!("write_us = {}\n", self.write_us));
        out.push_str(&format!("vmexit_us = {}\n", self.vmexit_us));
        out.push_str(&format!("dump_base_ms = {}\n", self.dump_base_ms));
        out.push_str(&format!("dump_page_us = {}\n", self.dump_page_us));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Entity {
    Tracked,
    Tracker,
    Hypervisor,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Before Tracked is launched.
    Setup,
    Init,
    Monitor,
    Collect,
    Exploit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Charge {
    Metric(Metric),
    VmExit,
    /// Time Tracked spends descheduled in favour of competing processes.
    Competitor,
    Dump,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    /// Schedule-in plus schedule-out events involving Tracked.
    pub sched_events: u64,
    pub vmexits: u64,
    pub faults: u64,
    pub drains: u64,
    pub dropped: u64,
    pub hypercalls: u64,
    pub self_ipis: u64,
}

/// Accumulated charges keyed by who paid, in which phase, for what.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: BTreeMap<(Entity, Phase, Charge), f64>,
    pub counts: EventCounts,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, entity: Entity, phase: Phase, charge: Charge, us: f64) {
        debug_assert!(us >= 0.0 && us.is_finite(), "bad charge {us}");
        *self.entries.entry((entity, phase, charge)).or_insert(0.0) += us;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(Entity, Phase, Charge), &f64)> {
        self.entries.iter()
    }

    pub fn sum_where(&self, mut pred: impl FnMut(Entity, Phase, Charge) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|((e, p, c), _)| pred(*e, *p, *c))
            .map(|(_, v)| v)
            .fold(0.0, |a, b| a + b)
    }

    pub fn total(&self) -> f64 {
        self.entries.values().fold(0.0, |a, b| a + b)
    }

    pub fn entity_total(&self, entity: Entity) -> f64 {
        self.sum_where(|e, _, _| e == entity)
    }

    pub fn phase_total(&self, phase: Phase) -> f64 {
        self.sum_where(|_, p, _| p == phase)
    }

    pub fn metric_total(&self, metric: Metric) -> f64 {
        self.sum_where(|_, _, c| c == Charge::Metric(metric))
    }

    /// Totals per metric across all entities and phases.
    pub fn by_metric(&self) -> BTreeMap<Metric, f64> {
        let mut out = BTreeMap::new();
        for ((_, _, c), v) in &self.entries {
            if let Charge::Metric(m) = c {
                *out.entry(*m).or_insert(0.0) += v;
            }
        }
        out
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (k, v) in &other.entries {
            *self.entries.entry(*k).or_insert(0.0) += v;
        }
        let c = &mut self.counts;
        let o = &other.counts;
        c.sched_events += o.sched_events;
        c.vmexits += o.vmexits;
        c.faults += o.faults;
        c.drains += o.drains;
        c.dropped += o.dropped;
        c.hypercalls += o.hypercalls;
        c.self_ipis += o.self_ipis;
    }
}

/// Predicted execution time under EPML from an untracked run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpmlEstimate {
    pub p_vanilla: f64,
    pub n_events: u64,
    pub c_vmread: f64,
    pub c_vmwrite: f64,
    pub c_copyrb: f64,
    pub p_epml: f64,
}

impl EpmlEstimate {
    pub fn new(p_vanilla: f64, n_events: u64, c_vmread: f64, c_vmwrite: f64, c_copyrb: f64) -> Self {
        let p_epml = p_vanilla + n_events as f64 * (3.0 * c_vmwrite + c_vmread) + c_copyrb;
        EpmlEstimate {
            p_vanilla,
            n_events,
            c_vmread,
            c_vmwrite,
            c_copyrb,
            p_epml,
        }
    }
}

/// Estimates EPML execution time; `memory` selects the ring-copy cost.
pub fn estimate_epml(p_vanilla: f64, n: u64, table: &CostTable, memory: ByteSize) -> EpmlEstimate {
    EpmlEstimate::new(
        p_vanilla,
        n,
        table.us(Metric::M7, memory),
        table.us(Metric::M8, memory),
        table.us(Metric::M18, memory),
    )
}

/// Overhead in percent; zero when there is no ideal time to compare with.
pub fn overhead(tracked: f64, ideal: f64) -> f64 {
    if ideal <= 0.0 {
        return 0.0;
    }
    100.0 * (tracked / ideal - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: f64) -> f64 {
        v * 1000.0
    }

    #[test]
    fn fixed_and_anchor_values() {
        let t = CostTable::default();
        assert_eq!(t.cost_of(Metric::M8, ByteSize::mb(3)).unwrap(), 0.801);
        assert_eq!(t.cost_of(Metric::M17, ByteSize::gb(1)).unwrap(), ms(15_738.0));
        for (m, vals) in SIZED_DEFAULTS_MS {
            for (s, v) in ANCHOR_SIZES.iter().zip(vals) {
                assert_eq!(t.cost_of(m, *s).unwrap(), ms(v), "{m} at {s}");
            }
        }
    }

    #[test]
    fn interpolation_rules() {
        let t = CostTable::default();
        let mid = t.cost_of(Metric::M17, ByteSize::mb(750)).unwrap();
        assert!((mid - ms(9_930.5)).abs() < 1e-6, "{mid}");
        // clamp below the first anchor
        assert_eq!(t.us(Metric::M16, ByteSize(4096)), ms(1.912));
        // extrapolate past 1GB along the last segment
        let x = t.us(Metric::M16, ByteSize::gb(2));
        let slope = (ms(594.187) - ms(307.109)) / 500e6;
        assert!((x - (ms(594.187) + slope * 1e9)).abs() < 1e-6);
    }

    #[test]
    fn metric_ids() {
        for m in Metric::ALL {
            assert_eq!(Metric::from_id(m.id()), Some(m));
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("M19".parse::<Metric>().is_err());
        assert!("M0".parse::<Metric>().is_err());
        assert_eq!(Metric::from_id(0), None);
    }

    #[test]
    fn m2_defaults_to_zero_and_is_overridable() {
        let t = CostTable::default();
        assert_eq!(t.us(Metric::M2, ByteSize::gb(1)), 0.0);
        let c = Calibration::parse("M2@1MB = 1\nM2@1GB = 3\n").unwrap();
        assert_eq!(c.table.us(Metric::M2, ByteSize::gb(1)), 3000.0);
    }

    #[test]
    fn calibration_round_trip_and_overrides() {
        let c = Calibration::default();
        assert_eq!(Calibration::parse(&c.to_text()).unwrap(), c);
        let c = Calibration::parse("# tweak\nM8 = 1.5\nvmexit_us = 10\nM17@1GB = 100 # ms\n").unwrap();
        assert_eq!(c.table.us(Metric::M8, ByteSize::mb(1)), 1.5);
        assert_eq!(c.vmexit_us, 10.0);
        // a file anchor replaces the default curve entirely
        assert_eq!(c.table.anchors(Metric::M17).unwrap(), &[(1_000_000_000, 100_000.0)]);
        assert!(Calibration::parse("M99 = 1").is_err());
        assert!(Calibration::parse("M8 1").is_err());
        assert!(Calibration::parse("M8 = -1").is_err());
        assert!(matches!(
            Calibration::parse("\nM8 = x"),
            Err(CostError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn eq1_examples() {
        let t = CostTable::default();
        let e = EpmlEstimate::new(5.0, 0, 0.936, 0.801, 0.0);
        assert_eq!(e.p_epml, 5.0);
        let e = estimate_epml(1e6, 1000, &t, ByteSize::gb(1));
        assert_eq!(e.p_epml, 1e6 + 1000.0 * (3.0 * 0.801 + 0.936) + 671.0);
    }

    #[test]
    fn overhead_pct() {
        assert!((overhead(110.0, 100.0) - 10.0).abs() < 1e-12);
        assert_eq!(overhead(100.0, 100.0), 0.0);
        assert_eq!(overhead(0.0, 0.0), 0.0);
    }

    #[test]
    fn ledger_sums() {
        let mut l = CostLedger::new();
        l.charge(Entity::Tracked, Phase::Monitor, Charge::Metric(Metric::M5), 2.0);
        l.charge(Entity::Tracker, Phase::Collect, Charge::Metric(Metric::M5), 3.0);
        l.charge(Entity::Hypervisor, Phase::Collect, Charge::VmExit, 5.0);
        assert_eq!(l.total(), 10.0);
        assert_eq!(l.entity_total(Entity::Tracked), 2.0);
        assert_eq!(l.phase_total(Phase::Collect), 8.0);
        assert_eq!(l.metric_total(Metric::M5), 5.0);
        let mut m = l.clone();
        m.merge(&l);
        assert_eq!(m.total(), 20.0);
    }
}
