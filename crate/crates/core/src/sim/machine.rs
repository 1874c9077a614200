//! One simulated VM with a single vCPU shared by Tracked, the Tracker and
//! any competing processes. Work done by the Tracker, the guest kernel or
//! the hypervisor on that vCPU delays Tracked.
//!
//! Handlers run at `max(event time, vCPU free time)`. Tracked's op stream
//! is a chain of `Write` events; a write that needs a fault, vmexit or
//! self-IPI to complete parks the chain and the handler of the last event
//! in that chain resumes it, retrying the same op.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::addr::{AddrError, AddressSpace, FaultKind, Gpa, Gva, Pid, WriteProbe};
use crate::cost::{Calibration, Charge, CostLedger, Entity, Metric, Phase};
use crate::guest::{Direction, GuestKernel, ScheduleEffect, SchedulerConfig, UffdMode};
use crate::hypervisor::{Actions, Hypercall, Hypervisor, DEFAULT_RING_CAPACITY};
use crate::pml::{LogOutcome, INDEX_FULL};
use crate::sim::queue::{Event, EventKind, EventQueue};
use crate::size::ByteSize;
use crate::tracker::{Exploit, ExploitCtx, IntervalReport, Technique, TrackerConfig, TrackerPhaseReport};
use crate::workload::{Op, Workload};

pub const TRACKED_PID: Pid = 1;
pub const TRACKER_PID: Pid = 2;
const FIRST_COMPETITOR_PID: Pid = 3;

#[derive(Debug, Clone)]
pub struct VmConfig {
    /// Tracked memory size used to scale sized metrics.
    pub memory: ByteSize,
    pub sched: SchedulerConfig,
    pub ring_capacity: usize,
    pub payloads: bool,
}

impl VmConfig {
    pub fn new(memory: ByteSize) -> Self {
        VmConfig {
            memory,
            sched: SchedulerConfig::default(),
            ring_capacity: DEFAULT_RING_CAPACITY,
            payloads: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    None,
    /// Waiting for a fault / vmexit / softirq chain to finish.
    Chain,
    /// Waiting for the Tracker to make room in a full ring.
    Ring,
}

#[derive(Debug, Default)]
struct IntervalAcc {
    dirty: BTreeSet<Gva>,
    missed: BTreeSet<Gva>,
    inaccurate: BTreeSet<(Gva, Gva)>,
    truth: BTreeSet<Gva>,
    dropped_at_start: u64,
    /// Collect-phase ledger total when the interval began.
    collect_at_start: f64,
}

pub struct Vm {
    pub id: usize,
    pub cfg: VmConfig,
    pub tracker: Option<TrackerConfig>,
    pub cal: Arc<Calibration>,
    pub mem: AddressSpace,
    pub hv: Hypervisor,
    pub kernel: GuestKernel,
    pub ledger: CostLedger,
    ops: Arc<Workload>,
    pc: usize,
    now: f64,
    phase: Phase,
    /// Hypervisor work done since last taken; it competes with other users
    /// of the host core (live migration).
    pub stolen_us: f64,
    stamp: u64,
    compute_us: f64,
    launched_at: Option<f64>,
    finished_at: Option<f64>,
    horizon: f64,
    block: Block,
    slice_us: f64,
    drain_pending: bool,
    ghost: BTreeMap<Gpa, Gva>,
    acc: IntervalAcc,
    intervals: Vec<IntervalReport>,
    exploit: Option<Box<dyn Exploit>>,
    last_op_was_checkpoint: bool,
    /// Log records lost because a signaled buffer was still full.
    pub log_drops: u64,
}

impl Vm {
    pub fn new(
        id: usize,
        cfg: VmConfig,
        tracker: Option<TrackerConfig>,
        cal: Arc<Calibration>,
        workload: Arc<Workload>,
    ) -> Self {
        let mut mem = AddressSpace::new(cfg.payloads);
        let hv = Hypervisor::new(cfg.ring_capacity);
        let mut kernel = GuestKernel::new(cfg.sched, cfg.ring_capacity);
        kernel.spawn(TRACKED_PID, &mut mem);
        kernel.spawn(TRACKER_PID, &mut mem);
        for i in 0..cfg.sched.competitors {
            kernel.spawn(FIRST_COMPETITOR_PID + i, &mut mem);
        }
        Vm {
            id,
            cfg,
            tracker,
            cal,
            mem,
            hv,
            kernel,
            ledger: CostLedger::new(),
            ops: workload,
            pc: 0,
            now: 0.0,
            phase: Phase::Setup,
            stolen_us: 0.0,
            stamp: 0,
            compute_us: 0.0,
            launched_at: None,
            finished_at: None,
            horizon: f64::INFINITY,
            block: Block::None,
            slice_us: 0.0,
            drain_pending: false,
            ghost: BTreeMap::new(),
            acc: IntervalAcc::default(),
            intervals: Vec::new(),
            exploit: None,
            last_op_was_checkpoint: false,
            log_drops: 0,
        }
    }

    pub fn with_exploit(mut self, e: Box<dyn Exploit>) -> Self {
        self.exploit = Some(e);
        self
    }

    pub fn exploit(&self) -> Option<&dyn Exploit> {
        self.exploit.as_deref()
    }

    pub fn take_exploit(&mut self) -> Option<Box<dyn Exploit>> {
        self.exploit.take()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn finished(&self) -> bool {
        self.finished_at.is_some()
    }

    pub fn technique(&self) -> Option<Technique> {
        self.tracker.as_ref().map(|t| t.technique)
    }

    fn memory(&self) -> ByteSize {
        self.cfg.memory
    }

    fn cost(&self, m: Metric) -> f64 {
        self.cal.table.us(m, self.memory())
    }

    fn share(&self, m: Metric, n: usize) -> f64 {
        self.cal.table.per_page(m, self.memory()) * n as f64
    }

    fn spend(&mut self, entity: Entity, charge: Charge, us: f64) {
        let phase = self.phase;
        self.spend_in(phase, entity, charge, us);
    }

    fn spend_in(&mut self, phase: Phase, entity: Entity, charge: Charge, us: f64) {
        if us <= 0.0 {
            return;
        }
        self.ledger.charge(entity, phase, charge, us);
        self.now += us;
        if entity == Entity::Hypervisor {
            self.stolen_us += us;
        }
    }

    fn hypercall_metric(&self, h: Hypercall) -> Metric {
        match h {
            Hypercall::InitPml { .. } => Metric::M9,
            Hypercall::InitShadowVmcs => Metric::M10,
            Hypercall::DeactivatePml => Metric::M11,
            Hypercall::DeactivateShadowVmcs => Metric::M12,
            Hypercall::EnableLogging { .. } => Metric::M13,
            Hypercall::DisableLogging => Metric::M14,
        }
    }

    fn charge_flush(&mut self, a: Actions) {
        if a.to_ring > 0 {
            let us = self.share(Metric::M18, a.to_ring);
            self.spend_in(Phase::Collect, Entity::Hypervisor, Charge::Metric(Metric::M18), us);
        }
        self.ledger.counts.dropped += a.dropped as u64;
        if a.interrupt {
            self.drain_pending = true;
        }
    }

    fn charge_schedule(&mut self, e: &ScheduleEffect) {
        if e.tracked_event {
            self.ledger.counts.sched_events += 1;
        }
        for h in &e.hypercalls {
            let m = self.hypercall_metric(*h);
            let us = self.cost(m);
            self.ledger.counts.hypercalls += 1;
            self.spend(Entity::Hypervisor, Charge::Metric(m), us);
        }
        let r = self.cost(Metric::M7) * f64::from(e.vmreads);
        let w = self.cost(Metric::M8) * f64::from(e.vmwrites);
        self.spend(Entity::Tracked, Charge::Metric(Metric::M7), r);
        self.spend(Entity::Tracked, Charge::Metric(Metric::M8), w);
    }

    fn schedule(&mut self, pid: Pid, dir: Direction) {
        let before = self.hv.ring.dropped;
        let mig_before = self.hv.migration_log.len();
        let ring_before = self.hv.ring.delivered;
        let e = self
            .kernel
            .on_schedule(pid, dir, &mut self.hv, &self.mem)
            .expect("schedule hooks follow the protocol");
        self.charge_schedule(&e);
        let a = Actions {
            to_ring: (self.hv.ring.delivered - ring_before) as usize,
            to_migration: self.hv.migration_log.len() - mig_before,
            dropped: (self.hv.ring.dropped - before) as usize,
            interrupt: self.hv.pending_interrupt,
            ..Default::default()
        };
        self.charge_flush(a);
    }

    fn drain_ring_due(&self) -> bool {
        self.drain_pending || self.hv.pending_interrupt
    }

    /// Setup, initialization and launch of Tracked.
    pub fn start(&mut self, q: &mut EventQueue, horizon: f64) {
        self.phase = Phase::Setup;
        let ops = Arc::clone(&self.ops);
        for g in &ops.premapped {
            self.mem.map(TRACKED_PID, *g).expect("premapped pages are distinct");
        }
        let tech = self.technique();
        if let Some(t) = tech {
            let calls = self
                .kernel
                .register_tracked(TRACKED_PID, t, &mut self.hv, &mut self.mem)
                .expect("fresh registration");
            for c in calls {
                let m = self.hypercall_metric(c);
                let us = self.cost(m);
                self.ledger.counts.hypercalls += 1;
                self.spend(Entity::Hypervisor, Charge::Metric(m), us);
            }
        }
        if let Some(mut ex) = self.exploit.take() {
            let dirty = BTreeSet::new();
            let us = ex.on_launch(ExploitCtx {
                mem: &self.mem,
                pid: TRACKED_PID,
                dirty: &dirty,
                interval: 0,
                cal: &self.cal,
            });
            self.exploit = Some(ex);
            self.spend_in(Phase::Exploit, Entity::Tracker, Charge::Dump, us);
        }
        // SPML pre-launch init treated the tracker context as scheduled in.
        if tech == Some(Technique::Spml) {
            self.schedule(TRACKED_PID, Direction::Out);
        }

        self.launched_at = Some(self.now);
        self.horizon = self.now + horizon;
        self.phase = Phase::Init;
        self.arm();
        self.phase = Phase::Monitor;
        self.acc.dropped_at_start = self.ledger.counts.dropped;
        self.schedule(TRACKED_PID, Direction::In);
        q.push(self.now, self.id, EventKind::Write);
        if let Some(cfg) = &self.tracker {
            if cfg.technique.uses_ring() && cfg.collection_interval_us.is_finite() {
                q.push(
                    self.now + cfg.collection_interval_us,
                    self.id,
                    EventKind::RingDrain { periodic: true },
                );
            }
        }
    }

    /// Initialization (first interval) or re-arming (later intervals).
    fn arm(&mut self) {
        match self.technique() {
            Some(Technique::Proc) => {
                self.kernel
                    .clear_soft_dirty(TRACKED_PID, &mut self.mem)
                    .expect("tracked exists");
                let us = self.cost(Metric::M15);
                self.spend(Entity::Tracker, Charge::Metric(Metric::M15), us);
            }
            Some(Technique::Uffd) => {
                let n = if self.kernel.uffd.contains_key(&TRACKED_PID) {
                    self.kernel
                        .uffd_reprotect(TRACKED_PID, &mut self.mem)
                        .expect("tracked exists")
                } else {
                    let range = self
                        .tracker
                        .as_ref()
                        .and_then(|c| c.monitored_range.clone())
                        .unwrap_or(0..u64::MAX);
                    self.kernel
                        .uffd_register(TRACKED_PID, range, UffdMode::Both, &mut self.mem)
                        .expect("tracked exists")
                };
                let us = self.share(Metric::M2, n);
                self.spend(Entity::Tracker, Charge::Metric(Metric::M2), us);
            }
            Some(Technique::Spml) | Some(Technique::Epml) => {
                self.mem.clear_ept_dirty_for(TRACKED_PID).expect("tracked exists");
            }
            None => {}
        }
        self.mem.clear_pte_dirty(TRACKED_PID).expect("tracked exists");
    }

    pub fn handle(&mut self, ev: Event, q: &mut EventQueue) {
        if self.finished() {
            return;
        }
        self.now = self.now.max(ev.time);
        match ev.kind {
            EventKind::Write => self.on_write(q),
            EventKind::PageFault { gva, missing } => self.on_uffd_fault(gva, missing, q),
            EventKind::VmExit => self.on_vmexit(q),
            EventKind::SelfIpi => {
                self.ledger.counts.self_ipis += 1;
                self.kernel.deliver_guest_buffer_full(TRACKED_PID);
                q.push(self.now, self.id, EventKind::Softirq);
            }
            EventKind::Softirq => self.on_softirq(q),
            EventKind::RingDrain { periodic } => self.on_ring_drain(periodic, q),
            EventKind::Schedule => self.on_quantum(q),
            EventKind::CheckpointTick => {
                self.collect(false);
                self.resume(q);
            }
            EventKind::MigrationRound => {}
        }
    }

    fn resume(&mut self, q: &mut EventQueue) {
        self.block = Block::None;
        if self.drain_ring_due() {
            q.push(self.now, self.id, EventKind::RingDrain { periodic: false });
            self.drain_pending = false;
            self.hv.pending_interrupt = false;
        }
        q.push(self.now, self.id, EventKind::Write);
    }

    fn on_write(&mut self, q: &mut EventQueue) {
        if self.block != Block::None {
            return;
        }
        if self.now >= self.horizon {
            self.finish();
            return;
        }
        let start = self.now;
        let Some(op) = self.ops.ops.get(self.pc).copied() else {
            self.finish();
            return;
        };
        let mut parked = false;
        match op {
            Op::Compute(us) => {
                self.now += us;
                self.compute_us += us;
            }
            Op::Unmap(g) => {
                let _ = self.mem.unmap(TRACKED_PID, g);
            }
            Op::Relocate(g) => {
                let _ = self.mem.relocate(TRACKED_PID, g);
            }
            Op::Move { from, to } => {
                let _ = self.mem.remap(TRACKED_PID, from, to);
            }
            Op::Checkpoint => {}
            Op::Write(g) => parked = !self.try_write(g, q),
        }
        if parked {
            self.block = Block::Chain;
            return;
        }
        self.pc += 1;
        self.last_op_was_checkpoint = op == Op::Checkpoint;
        self.slice_us += self.now - start;
        if op == Op::Checkpoint {
            q.push(self.now, self.id, EventKind::CheckpointTick);
            self.block = Block::Chain;
            return;
        }
        if self.pc >= self.ops.ops.len() {
            self.finish();
            return;
        }
        if self.cfg.sched.competitors > 0 && self.slice_us >= self.cfg.sched.quantum_us {
            q.push(self.now, self.id, EventKind::Schedule);
            self.block = Block::Chain;
            return;
        }
        q.push(self.now, self.id, EventKind::Write);
    }

    /// Attempts the write; false when the write is parked on a chain.
    fn try_write(&mut self, g: Gva, q: &mut EventQueue) -> bool {
        loop {
            match self.mem.probe_write(TRACKED_PID, g) {
                Err(AddrError::NotMapped { .. }) => {
                    let missing = self
                        .kernel
                        .uffd
                        .get(&TRACKED_PID)
                        .is_some_and(|r| r.missing() && r.covers(g));
                    if missing && self.technique() == Some(Technique::Uffd) {
                        q.push(self.now, self.id, EventKind::PageFault { gva: g, missing: true });
                        return false;
                    }
                    self.mem.map(TRACKED_PID, g).expect("checked absent");
                }
                Err(e) => panic!("tracked process vanished: {e}"),
                Ok(WriteProbe::Fault(FaultKind::SoftDirty)) => {
                    self.ledger.counts.faults += 1;
                    let us = self.share(Metric::M5, 1);
                    self.spend(Entity::Tracked, Charge::Metric(Metric::M5), us);
                    self.mem.resolve_soft_dirty_fault(TRACKED_PID, g).expect("mapped");
                }
                Ok(WriteProbe::Fault(FaultKind::UffdWp)) => {
                    q.push(self.now, self.id, EventKind::PageFault { gva: g, missing: false });
                    return false;
                }
                Ok(WriteProbe::Clean { gpa, transition }) => {
                    if transition {
                        match self.hv.log_dirty(gpa, g) {
                            LogOutcome::HvBufferFull => {
                                q.push(self.now, self.id, EventKind::VmExit);
                                return false;
                            }
                            LogOutcome::GuestBufferFull => {
                                q.push(self.now, self.id, EventKind::SelfIpi);
                                return false;
                            }
                            LogOutcome::Dropped => self.log_drops += 1,
                            LogOutcome::Logged | LogOutcome::Disabled => {}
                        }
                        if self.technique() == Some(Technique::Spml) {
                            self.ghost.insert(gpa, g);
                        }
                    }
                    let w = self.cal.write_us;
                    self.now += w;
                    self.compute_us += w;
                    self.stamp += 1;
                    self.mem.commit_write(TRACKED_PID, g, self.stamp).expect("mapped");
                    self.acc.truth.insert(g);
                    return true;
                }
            }
        }
    }

    fn on_uffd_fault(&mut self, g: Gva, missing: bool, q: &mut EventQueue) {
        self.ledger.counts.faults += 1;
        let us = self.share(Metric::M5, 1);
        self.spend(Entity::Tracked, Charge::Metric(Metric::M5), us);
        self.kernel.uffd_fault(TRACKED_PID);
        self.schedule(TRACKED_PID, Direction::Out);
        // Tracker reads the notification and resolves the fault.
        let m1 = self.cost(Metric::M1);
        self.spend(Entity::Tracker, Charge::Metric(Metric::M1), m1);
        let m6 = self.share(Metric::M6, 1);
        self.spend(Entity::Tracker, Charge::Metric(Metric::M6), m6);
        if missing {
            self.mem.map(TRACKED_PID, g).expect("fault was on an absent page");
        } else {
            self.kernel
                .uffd_resolve(TRACKED_PID, g, &mut self.mem)
                .expect("fault inside registered range");
        }
        self.acc.dirty.insert(g);
        self.schedule(TRACKED_PID, Direction::In);
        self.resume(q);
    }

    fn on_vmexit(&mut self, q: &mut EventQueue) {
        self.ledger.counts.vmexits += 1;
        let x = self.cal.vmexit_us;
        self.spend(Entity::Hypervisor, Charge::VmExit, x);
        let a = self.hv.handle_pml_full_vmexit();
        self.charge_flush(a);
        self.resume(q);
    }

    fn on_softirq(&mut self, q: &mut EventQueue) {
        let e = self.kernel.run_softirq(&mut self.hv, &self.mem);
        let copy = self.share(Metric::M18, e.copied);
        self.spend(Entity::Tracked, Charge::Metric(Metric::M18), copy);
        let w = self.cost(Metric::M8) * f64::from(e.vmwrites);
        self.spend(Entity::Tracked, Charge::Metric(Metric::M8), w);
        if e.held > 0 {
            self.block = Block::Ring;
            q.push(self.now, self.id, EventKind::RingDrain { periodic: false });
            return;
        }
        self.resume(q);
    }

    fn on_quantum(&mut self, q: &mut EventQueue) {
        self.schedule(TRACKED_PID, Direction::Out);
        let quantum = self.cfg.sched.quantum_us;
        for i in 0..self.cfg.sched.competitors {
            let pid = FIRST_COMPETITOR_PID + i;
            self.schedule(pid, Direction::In);
            self.spend(Entity::Other, Charge::Competitor, quantum);
            self.schedule(pid, Direction::Out);
        }
        self.schedule(TRACKED_PID, Direction::In);
        self.slice_us = 0.0;
        self.resume(q);
    }

    fn on_ring_drain(&mut self, periodic: bool, q: &mut EventQueue) {
        if self.block == Block::Chain {
            // let the in-flight fault/vmexit finish first
            q.push(self.now, self.id, EventKind::RingDrain { periodic });
            return;
        }
        self.schedule(TRACKED_PID, Direction::Out);
        self.ledger.counts.drains += 1;
        let prev = self.phase;
        self.phase = Phase::Collect;
        self.drain(false);
        if self.tracker.as_ref().is_some_and(|c| c.walk_each_drain) && self.technique() == Some(Technique::Spml) {
            let us = self.cost(Metric::M16);
            self.spend(Entity::Tracker, Charge::Metric(Metric::M16), us);
        }
        self.phase = prev;
        self.schedule(TRACKED_PID, Direction::In);
        self.hv.pending_interrupt = false;
        self.drain_pending = false;
        if periodic {
            if let Some(i) = self.tracker.as_ref().map(|c| c.collection_interval_us) {
                q.push(self.now + i, self.id, EventKind::RingDrain { periodic: true });
            }
        }
        if self.block == Block::Ring {
            self.resume(q);
        }
    }

    /// Public entry for draining outside the event loop (Tracked must be
    /// scheduled out by the caller's protocol; used by tests and tools).
    pub fn drain_ring_now(&mut self) -> Vec<Gva> {
        let before = self.acc.dirty.clone();
        let prev = self.phase;
        self.phase = Phase::Collect;
        self.drain(true);
        self.phase = prev;
        self.acc.dirty.difference(&before).copied().collect()
    }

    /// Tracker side of a ring drain (Tracked descheduled).
    fn drain(&mut self, final_flush: bool) {
        let m1 = self.cost(Metric::M1);
        match self.technique() {
            Some(Technique::Spml) => {
                self.spend(Entity::Tracker, Charge::Metric(Metric::M1), m1);
                let recs = self.hv.ring.drain();
                let ours: Vec<Gpa> = recs
                    .iter()
                    .filter(|(p, _)| *p == TRACKED_PID)
                    .map(|(_, g)| *g)
                    .collect();
                let us = self.share(Metric::M17, ours.len());
                self.spend(Entity::Tracker, Charge::Metric(Metric::M17), us);
                for gpa in ours {
                    let truth = self.ghost.get(&gpa).copied();
                    match self.mem.reverse_map(TRACKED_PID, gpa) {
                        Ok(g) => {
                            self.acc.dirty.insert(g);
                            if let Some(t) = truth.filter(|t| *t != g) {
                                self.acc.inaccurate.insert((g, t));
                            }
                        }
                        Err(_) => {
                            if let Some(t) = truth {
                                self.acc.missed.insert(t);
                            }
                        }
                    }
                }
            }
            Some(Technique::Epml) => {
                self.spend(Entity::Tracker, Charge::Metric(Metric::M1), m1);
                loop {
                    let got = self.kernel.uio.ring.drain();
                    self.acc.dirty.extend(got);
                    let saved_full = self
                        .kernel
                        .uio
                        .guest_buffers
                        .get(&TRACKED_PID)
                        .is_some_and(|b| b.saved_index == INDEX_FULL || b.consumed > 0);
                    if !(final_flush || saved_full) {
                        break;
                    }
                    let e = self.kernel.flush_saved_buffer(TRACKED_PID, &self.hv, &self.mem);
                    let us = self.share(Metric::M18, e.copied);
                    self.spend(Entity::Tracker, Charge::Metric(Metric::M18), us);
                    if e.copied == 0 && e.held == 0 {
                        break;
                    }
                }
            }
            _ => {}
        }
    }

    /// Ends a monitoring interval: collection, exploitation and, unless this
    /// is the end of the run without a checkpointer, re-arming.
    fn collect(&mut self, final_run: bool) {
        let tech = self.technique();
        self.phase = Phase::Collect;
        self.schedule(TRACKED_PID, Direction::Out);
        match tech {
            Some(Technique::Proc) => {
                let m1 = self.cost(Metric::M1);
                self.spend(Entity::Tracker, Charge::Metric(Metric::M1), m1);
                let sd = self
                    .kernel
                    .read_pagemap(TRACKED_PID, &self.mem)
                    .expect("tracked exists");
                let us = self.cost(Metric::M16);
                self.spend(Entity::Tracker, Charge::Metric(Metric::M16), us);
                self.acc.dirty.extend(sd);
            }
            Some(Technique::Spml) => {
                self.drain(true);
                let us = self.cost(Metric::M16);
                self.spend(Entity::Tracker, Charge::Metric(Metric::M16), us);
            }
            Some(Technique::Epml) => self.drain(true),
            Some(Technique::Uffd) | None => {}
        }
        // Periodic drains during the interval are collection work too.
        let collect_us = self.ledger.phase_total(Phase::Collect) - self.acc.collect_at_start;

        let acc = std::mem::take(&mut self.acc);
        let mapped = self.mem.mapped_pages(TRACKED_PID).expect("tracked exists");
        let dirty: BTreeSet<Gva> = acc.dirty.intersection(&mapped).copied().collect();
        let missed: BTreeSet<Gva> = acc
            .missed
            .iter()
            .filter(|g| mapped.contains(g) && !dirty.contains(g))
            .copied()
            .collect();
        let truth: BTreeSet<Gva> = acc.truth.intersection(&mapped).copied().collect();
        let index = self.intervals.len() + 1;

        self.phase = Phase::Exploit;
        let mut exploit_us = 0.0;
        if let Some(mut ex) = self.exploit.take() {
            exploit_us = ex.exploit(ExploitCtx {
                mem: &self.mem,
                pid: TRACKED_PID,
                dirty: &dirty,
                interval: index,
                cal: &self.cal,
            });
            self.exploit = Some(ex);
            self.spend(Entity::Tracker, Charge::Dump, exploit_us);
        }

        let mut rearm_us = 0.0;
        if !final_run || self.exploit.is_some() {
            self.phase = Phase::Init;
            let t = self.now;
            self.arm();
            rearm_us = self.now - t;
        }
        self.intervals.push(IntervalReport {
            index,
            dirty,
            missed,
            inaccurate: acc.inaccurate,
            truth,
            collect_us,
            exploit_us,
            rearm_us,
            dropped: self.ledger.counts.dropped - acc.dropped_at_start,
        });
        self.acc.dropped_at_start = self.ledger.counts.dropped;
        self.acc.collect_at_start = self.ledger.phase_total(Phase::Collect);
        self.phase = Phase::Monitor;
        if !final_run {
            self.schedule(TRACKED_PID, Direction::In);
        }
    }

    fn finish(&mut self) {
        if self.finished() {
            return;
        }
        let pending = !self.last_op_was_checkpoint || !self.acc.truth.is_empty();
        if pending && self.launched_at.is_some() {
            self.collect(true);
        } else {
            self.schedule(TRACKED_PID, Direction::Out);
        }
        self.finished_at = Some(self.now);
    }

    /// Hypervisor-side flush used by live migration between rounds.
    pub fn flush_for_migration(&mut self) -> Vec<Gpa> {
        let a = self.hv.flush();
        self.charge_flush(a);
        self.hv.take_migration_log()
    }

    pub fn report(&self) -> TrackerPhaseReport {
        let ideal = self.ops.ideal_us(self.cal.write_us);
        let l = &self.ledger;
        let in_run = |p: Phase| matches!(p, Phase::Init | Phase::Monitor | Phase::Collect);
        let overhead = l.sum_where(|_, p, c| in_run(p) && c != Charge::Competitor);
        let tracker = l.sum_where(|e, _, _| e == Entity::Tracker);
        let mut dirty = BTreeSet::new();
        let mut missed = BTreeSet::new();
        let mut inaccurate = BTreeSet::new();
        for i in &self.intervals {
            dirty.extend(i.dirty.iter().copied());
            missed.extend(i.missed.iter().copied());
            inaccurate.extend(i.inaccurate.iter().copied());
        }
        let missed = missed.difference(&dirty).copied().collect();
        TrackerPhaseReport {
            technique: self.technique(),
            memory_bytes: self.cfg.memory.bytes(),
            ideal_us: ideal,
            tracked_us: ideal + overhead,
            tracker_us: ideal + tracker,
            init_time: l.phase_total(Phase::Setup) + l.phase_total(Phase::Init),
            monitor_span: self.finished_at.unwrap_or(self.now) - self.launched_at.unwrap_or(0.0),
            collect_time: l.phase_total(Phase::Collect),
            exploit_time: l.phase_total(Phase::Exploit),
            tracked_suspension_total: overhead,
            dirty_set: dirty,
            missed,
            inaccurate,
            intervals: self.intervals.clone(),
            ledger: self.ledger.clone(),
        }
    }

    /// Compute time Tracked has executed so far.
    pub fn compute_us(&self) -> f64 {
        self.compute_us
    }
}

/// Runs one VM to completion (or to `horizon` µs after launch).
pub fn run_single(vm: &mut Vm, horizon: f64) -> TrackerPhaseReport {
    let mut q = EventQueue::new();
    vm.start(&mut q, horizon);
    while let Some(ev) = q.pop() {
        vm.handle(ev, &mut q);
        if vm.finished() {
            break;
        }
    }
    if !vm.finished() {
        vm.finish();
    }
    vm.report()
}
