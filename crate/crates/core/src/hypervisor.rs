//! Hypervisor side of PML: hypercalls, buffer-full vmexits, the SPML ring
//! and coordination between guest-level and hypervisor-level users.
//!
//! Every coordination request first flushes the hypervisor buffer using the
//! flags in force when its records were logged, then updates the flags and
//! re-arms the device so that it logs iff
//! `enable_by_vmm || (enable_by_guest && sched_in)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::addr::{Gpa, Gva, Hpa, Pid};
use crate::pml::{LogOutcome, PmlState, ShadowVmcs, Which, INDEX_DISABLED, INDEX_START};

pub const DEFAULT_RING_CAPACITY: usize = 16_384;
/// Ring entries taken by a block header (PID and count).
pub const BLOCK_HEADER: usize = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoexistenceFlags {
    pub enable_by_vmm: bool,
    pub enable_by_guest: bool,
    pub sched_in: bool,
}

impl CoexistenceFlags {
    pub fn should_arm(self) -> bool {
        self.enable_by_vmm || (self.enable_by_guest && self.sched_in)
    }

    fn guest_entitled(self) -> bool {
        self.enable_by_guest && self.sched_in
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingBlock {
    pub pid: Pid,
    pub addrs: VecDeque<Gpa>,
}

impl RingBlock {
    pub fn count(&self) -> usize {
        self.addrs.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AppendResult {
    pub appended: usize,
    pub dropped: usize,
    pub now_full: bool,
}

/// Guest-visible ring of GPAs framed as `{pid, count, addrs...}` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpmlRingBuffer {
    pub capacity: usize,
    blocks: VecDeque<RingBlock>,
    used: usize,
    full: bool,
    pub dropped: u64,
    pub delivered: u64,
}

impl SpmlRingBuffer {
    pub fn new(capacity: usize) -> Self {
        SpmlRingBuffer {
            capacity,
            blocks: VecDeque::new(),
            used: 0,
            full: false,
            dropped: 0,
            delivered: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    /// Entries in use, headers included.
    pub fn used(&self) -> usize {
        self.used
    }

    pub fn blocks(&self) -> impl Iterator<Item = &RingBlock> {
        self.blocks.iter()
    }

    pub fn pending(&self) -> usize {
        self.blocks.iter().map(RingBlock::count).sum()
    }

    /// Appends under `pid`'s block. Once an address does not fit the ring is
    /// marked full and everything else is dropped until the next drain.
    pub fn append(&mut self, pid: Pid, addrs: &[Gpa]) -> AppendResult {
        let mut r = AppendResult::default();
        for a in addrs {
            if self.full {
                r.dropped += 1;
                continue;
            }
            let open = self.blocks.back().is_some_and(|b| b.pid == pid);
            let need = if open { 1 } else { BLOCK_HEADER + 1 };
            if self.used + need > self.capacity {
                self.full = true;
                r.dropped += 1;
                continue;
            }
            if !open {
                self.blocks.push_back(RingBlock {
                    pid,
                    addrs: VecDeque::new(),
                });
            }
            self.blocks.back_mut().expect("just ensured").addrs.push_back(*a);
            self.used += need;
            r.appended += 1;
        }
        if self.used + 1 > self.capacity {
            self.full = true;
        }
        self.dropped += r.dropped as u64;
        self.delivered += r.appended as u64;
        r.now_full = self.full;
        r
    }

    /// Consumes up to `max` addresses, oldest block first, decrementing
    /// block counts and retiring emptied blocks.
    pub fn consume(&mut self, max: usize) -> Vec<(Pid, Gpa)> {
        let mut out = Vec::new();
        while out.len() < max {
            let Some(b) = self.blocks.front_mut() else { break };
            match b.addrs.pop_front() {
                Some(a) => {
                    out.push((b.pid, a));
                    self.used -= 1;
                }
                None => {
                    self.blocks.pop_front();
                    self.used -= BLOCK_HEADER;
                }
            }
        }
        if self.blocks.front().is_some_and(|b| b.addrs.is_empty()) {
            self.blocks.pop_front();
            self.used -= BLOCK_HEADER;
        }
        if !out.is_empty() || self.blocks.is_empty() {
            self.full = false;
        }
        out
    }

    pub fn drain(&mut self) -> Vec<(Pid, Gpa)> {
        self.consume(usize::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordRequest {
    GuestDisable,
    GuestEnable,
    VmmDisable,
    VmmEnable,
    SchedOut,
    SchedIn(Pid),
}

/// What a coordination step did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Actions {
    pub flushed: usize,
    pub to_migration: usize,
    pub to_ring: usize,
    pub dropped: usize,
    /// Records nobody was entitled to (only possible if logging was armed
    /// against the invariant).
    pub discarded: usize,
    pub interrupt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypercall {
    /// Allocates the PML buffer and enables guest use on behalf of `pid`,
    /// which counts as scheduled in until the next schedule-out.
    InitPml {
        pid: Pid,
    },
    DeactivatePml,
    /// PML plus VMCS shadowing for EPML.
    InitShadowVmcs,
    DeactivateShadowVmcs,
    EnableLogging {
        pid: Pid,
    },
    DisableLogging,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("{0:?} issued before PML was initialized")]
    NotInitialized(Hypercall),
    #[error("{0:?} issued twice")]
    AlreadyInitialized(Hypercall),
}

#[derive(Debug, Clone)]
pub struct Hypervisor {
    pub flags: CoexistenceFlags,
    pub pml: PmlState,
    pub ring: SpmlRingBuffer,
    /// GPAs handed to the migration process, in flush order.
    pub migration_log: Vec<Gpa>,
    /// PID recorded at the most recent schedule-in.
    pub current_pid: Option<Pid>,
    pub pending_interrupt: bool,
    pub vmexits: u64,
    pml_initialized: bool,
    shadow_initialized: bool,
    next_buffer_hpa: u64,
}

impl Hypervisor {
    pub fn new(ring_capacity: usize) -> Self {
        Hypervisor {
            flags: CoexistenceFlags::default(),
            pml: PmlState::default(),
            ring: SpmlRingBuffer::new(ring_capacity),
            migration_log: Vec::new(),
            current_pid: None,
            pending_interrupt: false,
            vmexits: 0,
            pml_initialized: false,
            shadow_initialized: false,
            next_buffer_hpa: 0xF000_0000,
        }
    }

    pub fn pml_initialized(&self) -> bool {
        self.pml_initialized
    }

    fn ensure_buffer(&mut self) {
        if self.pml.pml_address.is_none() {
            self.pml.pml_address = Some(Hpa(self.next_buffer_hpa));
            self.next_buffer_hpa += 1;
        }
    }

    pub fn log_dirty(&mut self, gpa: Gpa, gva: Gva) -> LogOutcome {
        self.pml.log_dirty(gpa, gva)
    }

    /// Moves every buffered record to its entitled consumers under the
    /// current flags and re-arms the buffer at 511 if it was armed.
    pub fn flush(&mut self) -> Actions {
        let recs = self.pml.take_hv_records();
        let mut a = Actions {
            flushed: recs.len(),
            ..Default::default()
        };
        if recs.is_empty() {
            return a;
        }
        let f = self.flags;
        if f.enable_by_vmm {
            self.migration_log.extend_from_slice(&recs);
            a.to_migration = recs.len();
        }
        if f.guest_entitled() {
            let pid = self.current_pid.unwrap_or(0);
            let r = self.ring.append(pid, &recs);
            a.to_ring = r.appended;
            a.dropped = r.dropped;
            if r.dropped > 0 || r.now_full {
                self.pending_interrupt = true;
                a.interrupt = true;
            }
        }
        if !f.enable_by_vmm && !f.guest_entitled() {
            a.discarded = recs.len();
        }
        a
    }

    fn rearm(&mut self) {
        let v = if self.flags.should_arm() {
            INDEX_START
        } else {
            INDEX_DISABLED
        };
        self.pml.reset_index(Which::Hypervisor, v).expect("protocol value");
    }

    pub fn coordinate(&mut self, req: CoordRequest) -> Actions {
        let a = self.flush();
        match req {
            CoordRequest::GuestDisable => self.flags.enable_by_guest = false,
            CoordRequest::GuestEnable => {
                self.ensure_buffer();
                self.flags.enable_by_guest = true;
            }
            CoordRequest::VmmDisable => self.flags.enable_by_vmm = false,
            CoordRequest::VmmEnable => {
                self.ensure_buffer();
                self.flags.enable_by_vmm = true;
            }
            CoordRequest::SchedOut => self.flags.sched_in = false,
            CoordRequest::SchedIn(pid) => {
                self.flags.sched_in = true;
                self.current_pid = Some(pid);
            }
        }
        self.rearm();
        a
    }

    pub fn hypercall(&mut self, call: Hypercall) -> Result<Actions, ProtocolError> {
        let need_init = |h: &Self| {
            if h.pml_initialized {
                Ok(())
            } else {
                Err(ProtocolError::NotInitialized(call))
            }
        };
        match call {
            Hypercall::InitPml { pid } => {
                if self.pml_initialized {
                    return Err(ProtocolError::AlreadyInitialized(call));
                }
                self.pml_initialized = true;
                let mut a = self.coordinate(CoordRequest::GuestEnable);
                merge(&mut a, self.coordinate(CoordRequest::SchedIn(pid)));
                Ok(a)
            }
            Hypercall::DeactivatePml => {
                need_init(self)?;
                self.pml_initialized = false;
                Ok(self.coordinate(CoordRequest::GuestDisable))
            }
            Hypercall::EnableLogging { pid } => {
                need_init(self)?;
                Ok(self.coordinate(CoordRequest::SchedIn(pid)))
            }
            Hypercall::DisableLogging => {
                need_init(self)?;
                Ok(self.coordinate(CoordRequest::SchedOut))
            }
            Hypercall::InitShadowVmcs => {
                if self.shadow_initialized {
                    return Err(ProtocolError::AlreadyInitialized(call));
                }
                self.shadow_initialized = true;
                self.pml.epml_enabled = true;
                self.pml.shadow = ShadowVmcs::epml();
                Ok(Actions::default())
            }
            Hypercall::DeactivateShadowVmcs => {
                if !self.shadow_initialized {
                    return Err(ProtocolError::NotInitialized(call));
                }
                self.shadow_initialized = false;
                self.pml.epml_enabled = false;
                self.pml.shadow = ShadowVmcs::closed();
                self.pml
                    .reset_index(Which::Guest, INDEX_DISABLED)
                    .expect("protocol value");
                Ok(Actions::default())
            }
        }
    }

    /// Buffer-full vmexit: hand the records out and resume logging at 511.
    pub fn handle_pml_full_vmexit(&mut self) -> Actions {
        self.vmexits += 1;
        self.flush()
    }

    pub fn take_migration_log(&mut self) -> Vec<Gpa> {
        std::mem::take(&mut self.migration_log)
    }
}

fn merge(a: &mut Actions, b: Actions) {
    a.flushed += b.flushed;
    a.to_migration += b.to_migration;
    a.to_ring += b.to_ring;
    a.dropped += b.dropped;
    a.discarded += b.discarded;
    a.interrupt |= b.interrupt;
}

/// Outcome of the exhaustive coordination check.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelCheckReport {
    pub depth: usize,
    pub states: usize,
    pub transitions: u64,
    pub violations: Vec<String>,
}

const REQUESTS: [CoordRequest; 6] = [
    CoordRequest::GuestDisable,
    CoordRequest::GuestEnable,
    CoordRequest::VmmDisable,
    CoordRequest::VmmEnable,
    CoordRequest::SchedOut,
    CoordRequest::SchedIn(1),
];

// Low GPA bits carry who was entitled to the record when it was logged.
const TAG_VMM: u64 = 0b10;
const TAG_GUEST: u64 = 0b01;

type AbstractState = (CoexistenceFlags, u16, Vec<u64>);

fn abstract_state(h: &Hypervisor) -> AbstractState {
    let tags = h.pml.hv_records().iter().map(|g| g.0 & 0b11).collect();
    (h.flags, h.pml.pml_index, tags)
}

/// Explores every sequence of `depth` steps, each step being one
/// coordination request followed by one write that may be logged. Checks
/// the arming invariant after every request and that every drained record
/// reaches exactly the consumers entitled to it.
pub fn model_check(depth: usize) -> ModelCheckReport {
    let mut report = ModelCheckReport {
        depth,
        ..Default::default()
    };
    let mut seen: BTreeMap<AbstractState, usize> = BTreeMap::new();
    let mut stack = vec![(
        Hypervisor::new(DEFAULT_RING_CAPACITY),
        depth,
        Vec::<CoordRequest>::new(),
    )];
    let mut seq = 0u64;
    while let Some((h, left, trace)) = stack.pop() {
        if left == 0 {
            continue;
        }
        for req in REQUESTS {
            report.transitions += 1;
            let mut n = h.clone();
            let before = n.flags;
            let buffered: Vec<Gpa> = n.pml.hv_records();
            let mig0 = n.migration_log.len();
            let ring0: BTreeSet<Gpa> = n.ring.blocks().flat_map(|b| b.addrs.iter().copied()).collect();
            n.coordinate(req);
            let mut path = trace.clone();
            path.push(req);
            if n.pml.logging_armed() != n.flags.should_arm() {
                report
                    .violations
                    .push(format!("arming invariant broken after {path:?}"));
            }
            let mig: BTreeSet<Gpa> = n.migration_log[mig0..].iter().copied().collect();
            let ring: BTreeSet<Gpa> = n
                .ring
                .blocks()
                .flat_map(|b| b.addrs.iter().copied())
                .filter(|g| !ring0.contains(g))
                .collect();
            for g in &buffered {
                let owed_vmm = g.0 & TAG_VMM != 0 && before.enable_by_vmm;
                let owed_guest = g.0 & TAG_GUEST != 0 && before.enable_by_guest;
                if owed_vmm != mig.contains(g) {
                    report
                        .violations
                        .push(format!("migration entitlement of {g} after {path:?}"));
                }
                if owed_guest != ring.contains(g) {
                    report
                        .violations
                        .push(format!("guest entitlement of {g} after {path:?}"));
                }
            }
            if ring.iter().chain(&mig).any(|g| !buffered.contains(g)) {
                report
                    .violations
                    .push(format!("unknown record delivered after {path:?}"));
            }
            // one write per step, tagged with its entitlement at log time
            seq += 1;
            let f = n.flags;
            let tag = (u64::from(f.enable_by_vmm) << 1) | u64::from(f.guest_entitled());
            let gpa = Gpa((seq << 2) | tag);
            match n.log_dirty(gpa, Gva(seq)) {
                LogOutcome::Logged if !f.should_arm() => {
                    report.violations.push(format!("logged while disarmed after {path:?}"))
                }
                LogOutcome::Disabled if f.should_arm() => {
                    report.violations.push(format!("not logged while armed after {path:?}"))
                }
                _ => {}
            }
            if !report.violations.is_empty() {
                return report;
            }
            let key = abstract_state(&n);
            let rem = left - 1;
            if seen.get(&key).is_some_and(|d| *d >= rem) {
                continue;
            }
            seen.insert(key, rem);
            stack.push((n, rem, path));
        }
    }
    report.states = seen.len();
    report
}
