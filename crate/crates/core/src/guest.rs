//! Guest OS model: processes, the scheduler hooks installed by the tracking
//! kernel module, EPML's interrupt split, and the kernel facilities behind
//! soft-dirty and userfaultfd tracking.
//!
//! Operations change state and report what they did (hypercalls issued,
//! shadow-VMCS accesses, records copied); pricing is left to the caller.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::addr::{AddrError, AddressSpace, Gpa, Gva, Pid};
use crate::hypervisor::{Hypercall, Hypervisor, ProtocolError};
use crate::pml::{VmcsField, INDEX_DISABLED, INDEX_START};
use crate::tracker::Technique;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcState {
    Runnable,
    Running,
    SuspendedOnFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Process {
    pub pid: Pid,
    pub tracked: bool,
    pub state: ProcState,
    /// Schedule-in and schedule-out events seen while tracked.
    pub tracked_switches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub quantum_us: f64,
    /// Other runnable processes sharing the vCPU round-robin with Tracked.
    pub competitors: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            quantum_us: 10_000.0,
            competitors: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GuestError {
    #[error("pid {0} already registered")]
    AlreadyRegistered(Pid),
    #[error("pid {0} does not exist")]
    UnknownPid(Pid),
    #[error("{gva} of pid {pid} is not registered with userfaultfd")]
    NotRegistered { pid: Pid, gva: Gva },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Addr(#[from] AddrError),
}

/// Flat ring of GVA records shared with the EPML Tracker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GvaRing {
    pub capacity: usize,
    records: VecDeque<Gva>,
}

impl GvaRing {
    pub fn new(capacity: usize) -> Self {
        GvaRing {
            capacity,
            records: VecDeque::new(),
        }
    }

    pub fn free(&self) -> usize {
        self.capacity - self.records.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn drain(&mut self) -> Vec<Gva> {
        self.records.drain(..).collect()
    }
}

/// Per-process guest-level PML buffer kept by the kernel module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestBuffer {
    /// Guest frame holding the buffer.
    pub gpa: Gpa,
    /// Index saved at schedule-out and restored at schedule-in.
    pub saved_index: u16,
    /// Records at the top of the buffer already copied to the ring.
    pub consumed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UioModuleState {
    pub registered: BTreeMap<Pid, Technique>,
    pub guest_buffers: BTreeMap<Pid, GuestBuffer>,
    pub pending_softirq: Option<Pid>,
    pub ring: GvaRing,
}

impl UioModuleState {
    pub fn callbacks_installed(&self) -> bool {
        !self.registered.is_empty()
    }
}

/// What a schedule hook did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleEffect {
    pub hypercalls: Vec<Hypercall>,
    pub vmreads: u32,
    pub vmwrites: u32,
    /// Whether the event involved a tracked process (counts towards N).
    pub tracked_event: bool,
}

/// What an EPML buffer copy did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CopyEffect {
    pub copied: usize,
    /// Records still waiting in the guest buffer because the ring is full.
    pub held: usize,
    pub vmwrites: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UffdMode {
    Missing,
    WriteProtect,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UffdRegistration {
    pub range: Range<u64>,
    pub mode: UffdMode,
}

impl UffdRegistration {
    pub fn covers(&self, gva: Gva) -> bool {
        self.range.contains(&gva.0)
    }

    pub fn missing(&self) -> bool {
        matches!(self.mode, UffdMode::Missing | UffdMode::Both)
    }

    pub fn write_protect(&self) -> bool {
        matches!(self.mode, UffdMode::WriteProtect | UffdMode::Both)
    }
}

#[derive(Debug, Clone)]
pub struct GuestKernel {
    pub processes: BTreeMap<Pid, Process>,
    pub uio: UioModuleState,
    pub sched: SchedulerConfig,
    pub uffd: BTreeMap<Pid, UffdRegistration>,
    pub current: Option<Pid>,
}

impl GuestKernel {
    pub fn new(sched: SchedulerConfig, ring_capacity: usize) -> Self {
        GuestKernel {
            processes: BTreeMap::new(),
            uio: UioModuleState {
                registered: BTreeMap::new(),
                guest_buffers: BTreeMap::new(),
                pending_softirq: None,
                ring: GvaRing::new(ring_capacity),
            },
            sched,
            uffd: BTreeMap::new(),
            current: None,
        }
    }

    pub fn spawn(&mut self, pid: Pid, mem: &mut AddressSpace) {
        mem.add_process(pid);
        self.processes.insert(
            pid,
            Process {
                pid,
                tracked: false,
                state: ProcState::Runnable,
                tracked_switches: 0,
            },
        );
    }

    pub fn is_tracked(&self, pid: Pid) -> bool {
        self.uio.registered.contains_key(&pid)
    }

    /// Registers `pid` with the tracking module. PML techniques issue their
    /// initialization hypercall on the first registration only.
    pub fn register_tracked(
        &mut self,
        pid: Pid,
        technique: Technique,
        hv: &mut Hypervisor,
        mem: &mut AddressSpace,
    ) -> Result<Vec<Hypercall>, GuestError> {
        if !self.processes.contains_key(&pid) {
            return Err(GuestError::UnknownPid(pid));
        }
        if self.uio.registered.contains_key(&pid) {
            return Err(GuestError::AlreadyRegistered(pid));
        }
        let first_pml = !self.uio.registered.values().any(|t| *t == technique);
        let mut calls = Vec::new();
        match technique {
            Technique::Spml if first_pml => {
                let c = Hypercall::InitPml { pid };
                hv.hypercall(c)?;
                calls.push(c);
            }
            Technique::Epml => {
                if first_pml {
                    hv.hypercall(Hypercall::InitShadowVmcs)?;
                    calls.push(Hypercall::InitShadowVmcs);
                }
                let gpa = mem.alloc_kernel_frame();
                self.uio.guest_buffers.insert(
                    pid,
                    GuestBuffer {
                        gpa,
                        saved_index: INDEX_START,
                        consumed: 0,
                    },
                );
            }
            _ => {}
        }
        self.uio.registered.insert(pid, technique);
        if let Some(p) = self.processes.get_mut(&pid) {
            p.tracked = true;
        }
        Ok(calls)
    }

    /// Scheduler callback for `pid` entering or leaving the vCPU.
    pub fn on_schedule(
        &mut self,
        pid: Pid,
        dir: Direction,
        hv: &mut Hypervisor,
        mem: &AddressSpace,
    ) -> Result<ScheduleEffect, GuestError> {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.state = match dir {
                Direction::In => ProcState::Running,
                Direction::Out if p.state == ProcState::SuspendedOnFault => ProcState::SuspendedOnFault,
                Direction::Out => ProcState::Runnable,
            };
            if p.tracked {
                p.tracked_switches += 1;
            }
        }
        match dir {
            Direction::In => self.current = Some(pid),
            Direction::Out if self.current == Some(pid) => self.current = None,
            Direction::Out => {}
        }
        let Some(tech) = self.uio.registered.get(&pid).copied() else {
            return Ok(ScheduleEffect::default());
        };
        let mut e = ScheduleEffect {
            tracked_event: true,
            ..Default::default()
        };
        match (tech, dir) {
            (Technique::Spml, Direction::In) => {
                let c = Hypercall::EnableLogging { pid };
                hv.hypercall(c)?;
                e.hypercalls.push(c);
            }
            (Technique::Spml, Direction::Out) => {
                hv.hypercall(Hypercall::DisableLogging)?;
                e.hypercalls.push(Hypercall::DisableLogging);
            }
            (Technique::Epml, Direction::In) => {
                let b = self.uio.guest_buffers[&pid];
                hv.pml
                    .guest_vmwrite(VmcsField::GuestPmlAddress, b.gpa.0, &mem.ept)
                    .expect("guest buffer frame is mapped");
                hv.pml
                    .guest_vmwrite(VmcsField::GuestPmlIndex, b.saved_index.into(), &mem.ept)
                    .expect("saved index is valid");
                e.vmwrites = 2;
            }
            (Technique::Epml, Direction::Out) => {
                let idx = hv.pml.guest_vmread(VmcsField::GuestPmlIndex).expect("exposed");
                hv.pml
                    .guest_vmwrite(VmcsField::GuestPmlIndex, INDEX_DISABLED.into(), &mem.ept)
                    .expect("exposed");
                if let Some(b) = self.uio.guest_buffers.get_mut(&pid) {
                    b.saved_index = idx as u16;
                }
                e.vmreads = 1;
                e.vmwrites = 1;
            }
            _ => {}
        }
        Ok(e)
    }

    /// Top half of the guest-buffer-full self-IPI: defer to a softirq.
    pub fn deliver_guest_buffer_full(&mut self, pid: Pid) {
        self.uio.pending_softirq = Some(pid);
    }

    /// Bottom half: copy the running process's guest buffer into the ring
    /// and re-arm it when everything fit.
    pub fn run_softirq(&mut self, hv: &mut Hypervisor, mem: &AddressSpace) -> CopyEffect {
        let Some(pid) = self.uio.pending_softirq.take() else {
            return CopyEffect::default();
        };
        let Some(hpa) = hv.pml.guest_pml_address else {
            return CopyEffect::default();
        };
        let index = hv.pml.guest_pml_index;
        let Some(b) = self.uio.guest_buffers.get_mut(&pid) else {
            return CopyEffect::default();
        };
        let recs = hv.pml.guest_records(hpa, index);
        let mut e = copy_records(&mut self.uio.ring, b, &recs);
        if e.held == 0 && !recs.is_empty() {
            hv.pml
                .guest_vmwrite(VmcsField::GuestPmlIndex, INDEX_START.into(), &mem.ept)
                .expect("exposed");
            e.vmwrites = 1;
        }
        e
    }

    /// Copies what a descheduled process left in its guest buffer. Used by
    /// the Tracker when draining and at final collection; the restored
    /// index takes effect at the next schedule-in.
    pub fn flush_saved_buffer(&mut self, pid: Pid, hv: &Hypervisor, mem: &AddressSpace) -> CopyEffect {
        let Some(b) = self.uio.guest_buffers.get_mut(&pid) else {
            return CopyEffect::default();
        };
        let Some(hpa) = mem.ept.translate(b.gpa) else {
            return CopyEffect::default();
        };
        let recs = hv.pml.guest_records(hpa, b.saved_index);
        let e = copy_records(&mut self.uio.ring, b, &recs);
        if e.held == 0 {
            b.saved_index = INDEX_START;
        }
        e
    }

    /// Records sitting in `pid`'s guest buffer and not yet copied.
    pub fn resident_records(&self, pid: Pid, hv: &Hypervisor, mem: &AddressSpace) -> Vec<Gva> {
        let Some(b) = self.uio.guest_buffers.get(&pid) else {
            return Vec::new();
        };
        let Some(hpa) = mem.ept.translate(b.gpa) else {
            return Vec::new();
        };
        let live = hv.pml.guest_pml_address == Some(hpa) && self.current == Some(pid);
        let index = if live { hv.pml.guest_pml_index } else { b.saved_index };
        let mut recs = hv.pml.guest_records(hpa, index);
        recs.drain(..b.consumed.min(recs.len()));
        recs
    }

    /// `echo 4 > clear_refs`: returns the number of PTEs cleared.
    pub fn clear_soft_dirty(&self, pid: Pid, mem: &mut AddressSpace) -> Result<usize, GuestError> {
        Ok(mem.clear_soft_dirty(pid)?)
    }

    /// Userspace scan of the pagemap soft-dirty bits.
    pub fn read_pagemap(&self, pid: Pid, mem: &AddressSpace) -> Result<BTreeSet<Gva>, GuestError> {
        Ok(mem.soft_dirty_pages(pid)?)
    }

    pub fn uffd_register(
        &mut self,
        pid: Pid,
        range: Range<u64>,
        mode: UffdMode,
        mem: &mut AddressSpace,
    ) -> Result<usize, GuestError> {
        if !self.processes.contains_key(&pid) {
            return Err(GuestError::UnknownPid(pid));
        }
        let n = if matches!(mode, UffdMode::WriteProtect | UffdMode::Both) {
            mem.uffd_protect(pid, range.clone())?
        } else {
            0
        };
        self.uffd.insert(pid, UffdRegistration { range, mode });
        Ok(n)
    }

    /// Re-protects the registered range (next monitoring interval).
    pub fn uffd_reprotect(&mut self, pid: Pid, mem: &mut AddressSpace) -> Result<usize, GuestError> {
        match self.uffd.get(&pid) {
            Some(r) if r.write_protect() => Ok(mem.uffd_protect(pid, r.range.clone())?),
            _ => Ok(0),
        }
    }

    /// Marks `pid` suspended on a userfaultfd fault.
    pub fn uffd_fault(&mut self, pid: Pid) {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.state = ProcState::SuspendedOnFault;
        }
    }

    /// Write-unprotects `gva` and makes `pid` runnable again.
    pub fn uffd_resolve(&mut self, pid: Pid, gva: Gva, mem: &mut AddressSpace) -> Result<(), GuestError> {
        let covered = self.uffd.get(&pid).is_some_and(|r| r.covers(gva));
        if !covered {
            return Err(GuestError::NotRegistered { pid, gva });
        }
        mem.uffd_unprotect(pid, gva)?;
        if let Some(p) = self.processes.get_mut(&pid) {
            if p.state == ProcState::SuspendedOnFault {
                p.state = ProcState::Runnable;
            }
        }
        Ok(())
    }
}

fn copy_records(ring: &mut GvaRing, b: &mut GuestBuffer, recs: &[Gva]) -> CopyEffect {
    let pending = &recs[b.consumed.min(recs.len())..];
    let n = pending.len().min(ring.free());
    ring.records.extend(&pending[..n]);
    let held = pending.len() - n;
    b.consumed = if held == 0 { 0 } else { b.consumed + n };
    CopyEffect {
        copied: n,
        held,
        vmwrites: 0,
    }
}
