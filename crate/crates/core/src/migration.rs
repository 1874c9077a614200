//! Pre-copy live migration fed by the hypervisor's PML dirty log, and the
//! coexistence experiment where another VM tracks its own memory with PML
//! while the migration runs.
//!
//! The migration thread shares the host core with hypervisor work: every
//! vmexit, hypercall or ring copy done for any VM on the machine delays the
//! next chunk of pages.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::{Gpa, Gva};
use crate::cost::Calibration;
use crate::hypervisor::{model_check, CoordRequest, ModelCheckReport};
use crate::sim::machine::{Vm, VmConfig};
use crate::sim::queue::{EventKind, EventQueue};
use crate::size::ByteSize;
use crate::tracker::{Technique, TrackerConfig};
use crate::workload::{MicroBenchSpec, Op, Workload, REGION_BASE};

/// Pages sent between two checks of the host core.
pub const CHUNK_PAGES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationJob {
    /// Memory of the migrated VM.
    pub memory: ByteSize,
    /// Transfer time of one page, µs.
    pub page_us: f64,
    /// Stop-and-copy once fewer pages than this are dirty.
    pub stop_threshold: usize,
    pub max_rounds: u32,
    /// Guest writes per second inside the migrated VM (uniform pages).
    pub dirty_rate: f64,
    pub seed: u64,
}

impl Default for MigrationJob {
    fn default() -> Self {
        MigrationJob {
            memory: ByteSize::mb(256),
            page_us: 10.0,
            stop_threshold: CHUNK_PAGES,
            max_rounds: 30,
            dirty_rate: 20_000.0,
            seed: 1,
        }
    }
}

/// The other VM on the machine, running the micro-benchmark under a
/// tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeerSpec {
    pub technique: Technique,
    pub memory: ByteSize,
    /// Compute between two writes of the micro-benchmark, µs.
    pub write_gap_us: f64,
    pub collection_interval_us: f64,
}

impl Default for PeerSpec {
    fn default() -> Self {
        PeerSpec {
            technique: Technique::Spml,
            memory: ByteSize::mb(50),
            write_gap_us: 0.0,
            collection_interval_us: 1_000.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub total_time_us: f64,
    /// Pre-copy rounds, the stop-and-copy round included.
    pub rounds: u32,
    pub pages_sent: u64,
    /// Time the migration thread lost to hypervisor work.
    pub stolen_us: f64,
    /// Buffer-full vmexits of every VM during the migration.
    pub vmexits: u64,
    pub converged: bool,
}

/// Uniform random writes at `rate` per second, long enough to outlast
/// any migration of `pages` pages.
fn dirtying_workload(pages: u64, rate: f64, duration_us: f64, write_us: f64, seed: u64) -> Workload {
    let premapped: Vec<Gva> = (0..pages).map(|i| Gva(REGION_BASE + i)).collect();
    let mut ops = Vec::new();
    if rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = (1e6 / rate - write_us).max(0.0);
        let n = (duration_us * rate / 1e6).ceil() as u64;
        for _ in 0..n {
            ops.push(Op::Write(premapped[rng.random_range(0..premapped.len())]));
            if gap > 0.0 {
                ops.push(Op::Compute(gap));
            }
        }
    }
    Workload { premapped, ops }
}

fn peer_workload(p: &PeerSpec, write_us: f64, duration_us: f64) -> Workload {
    let spec = MicroBenchSpec::new(p.memory);
    let per_round = spec.num_pages() as f64 * (write_us + p.write_gap_us);
    let rounds = (duration_us / per_round).ceil().max(1.0) as u32;
    let base = MicroBenchSpec {
        rounds,
        checkpoint_each_round: true,
        ..spec
    }
    .build(write_us, 0);
    if p.write_gap_us <= 0.0 {
        return base;
    }
    let mut ops = Vec::with_capacity(base.ops.len() * 2);
    for op in base.ops {
        ops.push(op);
        if matches!(op, Op::Write(_)) {
            ops.push(Op::Compute(p.write_gap_us));
        }
    }
    Workload {
        premapped: base.premapped,
        ops,
    }
}

struct Precopy {
    to_send: Vec<Gpa>,
    sent_in_round: usize,
    rounds: u32,
    pages_sent: u64,
    stolen: f64,
    start: f64,
    stopping: bool,
}

/// Runs a pre-copy migration of one VM, optionally next to a tracked peer.
pub fn run_migration(job: &MigrationJob, peer: Option<&PeerSpec>, cal: &Arc<Calibration>) -> MigrationReport {
    let pages = job.memory.pages().max(1);
    // Generous bound on the migration length for sizing the op streams.
    let budget_us = pages as f64 * job.page_us * 8.0 + 1e6;
    let mut vms = Vec::new();
    let w = dirtying_workload(pages, job.dirty_rate, budget_us, cal.write_us, job.seed);
    let mut migrated = Vm::new(0, VmConfig::new(job.memory), None, Arc::clone(cal), Arc::new(w));
    migrated.hv.coordinate(CoordRequest::VmmEnable);
    vms.push(migrated);
    if let Some(p) = peer {
        let mut tc = TrackerConfig::new(p.technique);
        tc.collection_interval_us = p.collection_interval_us;
        let w = peer_workload(p, cal.write_us, budget_us);
        vms.push(Vm::new(
            1,
            VmConfig::new(p.memory),
            Some(tc),
            Arc::clone(cal),
            Arc::new(w),
        ));
    }

    let mut q = EventQueue::new();
    for vm in &mut vms {
        vm.start(&mut q, f64::INFINITY);
    }
    // Set-up work (init hypercalls) happens before the migration starts.
    let t0 = vms.iter().map(Vm::now).fold(0.0, f64::max);
    for vm in &mut vms {
        vm.stolen_us = 0.0;
    }
    let vmexits0: u64 = vms.iter().map(|v| v.ledger.counts.vmexits).sum();
    let mut mig = Precopy {
        to_send: vms[0]
            .mem
            .table(crate::sim::machine::TRACKED_PID)
            .expect("migrated process exists")
            .iter()
            .map(|(_, pte)| pte.gpa)
            .collect(),
        sent_in_round: 0,
        rounds: 0,
        pages_sent: 0,
        stolen: 0.0,
        start: t0,
        stopping: false,
    };
    let mig_vm = usize::MAX;
    q.push(t0, mig_vm, EventKind::MigrationRound);

    let mut end = None;
    while let Some(ev) = q.pop() {
        if ev.vm != mig_vm {
            vms[ev.vm].handle(ev, &mut q);
            continue;
        }
        // One chunk of pages, stretched by hypervisor work since the last.
        let stolen = vms
            .iter_mut()
            .map(|v| std::mem::take(&mut v.stolen_us))
            .fold(0.0, |a, b| a + b);
        mig.stolen += stolen;
        let n = CHUNK_PAGES.min(mig.to_send.len() - mig.sent_in_round);
        mig.sent_in_round += n;
        mig.pages_sent += n as u64;
        let t = ev.time + n as f64 * job.page_us + stolen;
        if mig.sent_in_round < mig.to_send.len() {
            q.push(t, mig_vm, EventKind::MigrationRound);
            continue;
        }
        mig.rounds += 1;
        if mig.stopping {
            end = Some(t);
            break;
        }
        let vm = &mut vms[0];
        let dirty: BTreeSet<Gpa> = vm.flush_for_migration().into_iter().collect();
        if dirty.is_empty() {
            end = Some(t);
            break;
        }
        for g in &dirty {
            vm.mem.clear_ept_dirty(*g);
        }
        mig.stopping = dirty.len() < job.stop_threshold || mig.rounds + 1 >= job.max_rounds;
        mig.to_send = dirty.into_iter().collect();
        mig.sent_in_round = 0;
        q.push(t, mig_vm, EventKind::MigrationRound);
    }
    let end = end.unwrap_or_else(|| vms.iter().map(Vm::now).fold(t0, f64::max));
    MigrationReport {
        total_time_us: end - mig.start,
        rounds: mig.rounds,
        pages_sent: mig.pages_sent,
        stolen_us: mig.stolen,
        vmexits: vms.iter().map(|v| v.ledger.counts.vmexits).sum::<u64>() - vmexits0,
        converged: mig.rounds < job.max_rounds,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoexistReport {
    pub alone: MigrationReport,
    pub concurrent: MigrationReport,
    pub inflation_pct: f64,
    pub model_check_states: usize,
    pub model_check_violations: Vec<String>,
}

/// Migration alone vs. next to a tracked peer, plus the exhaustive check
/// of the coordination protocol to `depth` requests.
pub fn coexistence_experiment(
    job: &MigrationJob,
    peer: &PeerSpec,
    cal: &Arc<Calibration>,
    depth: usize,
) -> CoexistReport {
    let alone = run_migration(job, None, cal);
    let concurrent = run_migration(job, Some(peer), cal);
    let ModelCheckReport { states, violations, .. } = model_check(depth);
    CoexistReport {
        inflation_pct: crate::cost::overhead(concurrent.total_time_us, alone.total_time_us),
        alone,
        concurrent,
        model_check_states: states,
        model_check_violations: violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MigrationJob {
        MigrationJob {
            memory: ByteSize::mb(8),
            ..Default::default()
        }
    }

    #[test]
    fn idle_vm_migrates_in_one_round() {
        let cal = Arc::new(Calibration::default());
        let r = run_migration(
            &MigrationJob {
                dirty_rate: 0.0,
                ..small()
            },
            None,
            &cal,
        );
        assert_eq!(r.rounds, 1, "{r:?}");
        assert_eq!(r.pages_sent, ByteSize::mb(8).pages());
        assert!((r.total_time_us - r.pages_sent as f64 * 10.0).abs() < 1e-6);
    }

    #[test]
    fn dirtying_adds_rounds_and_converges() {
        let cal = Arc::new(Calibration::default());
        let r = run_migration(&small(), None, &cal);
        assert!(r.rounds > 2 && r.converged, "{r:?}");
        assert!(r.pages_sent > ByteSize::mb(8).pages());
    }

    #[test]
    fn tracked_peer_slows_migration() {
        let cal = Arc::new(Calibration::default());
        let alone = run_migration(&small(), None, &cal);
        let peer = PeerSpec {
            memory: ByteSize::mb(4),
            ..Default::default()
        };
        let both = run_migration(&small(), Some(&peer), &cal);
        assert!(both.total_time_us > alone.total_time_us);
        assert!(both.vmexits >= alone.vmexits);
    }
}
