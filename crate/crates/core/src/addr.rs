//! Guest virtual, guest physical and host physical memory.
//!
//! All addresses are page numbers. Guest page tables are flat maps; the EPT
//! is VM-wide and reference counted so aliased GPAs survive partial unmaps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub const PAGE_SIZE: usize = 4096;

pub type Pid = u32;

macro_rules! page_number {
    ($name:ident, $tag:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($tag, ":{:#x}"), self.0)
            }
        }
    };
}

page_number!(Gva, "gva");
page_number!(Gpa, "gpa");
page_number!(Hpa, "hpa");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PageFlags {
    pub present: bool,
    pub writable: bool,
    pub dirty: bool,
    pub soft_dirty: bool,
    /// userfaultfd write-protect marker.
    pub uffd_wp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pte {
    pub gpa: Gpa,
    pub flags: PageFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EptEntry {
    pub hpa: Hpa,
    pub dirty: bool,
    refs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AddrError {
    #[error("{gva} not mapped in pid {pid}")]
    NotMapped { pid: Pid, gva: Gva },
    #[error("no mapping for {gva} in pid {pid}")]
    UnknownMapping { pid: Pid, gva: Gva },
    #[error("{gva} already mapped in pid {pid}")]
    AlreadyMapped { pid: Pid, gva: Gva },
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("{0} has no guest virtual mapping")]
    Lost(Gpa),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestPageTable {
    pub pid: Pid,
    entries: BTreeMap<Gva, Pte>,
    reverse: BTreeMap<Gpa, BTreeSet<Gva>>,
}

impl GuestPageTable {
    pub fn new(pid: Pid) -> Self {
        GuestPageTable {
            pid,
            ..Default::default()
        }
    }

    pub fn get(&self, gva: Gva) -> Option<&Pte> {
        self.entries.get(&gva)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Gva, &Pte)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// GVAs currently mapping `gpa`, ascending.
    pub fn gvas_of(&self, gpa: Gpa) -> impl Iterator<Item = Gva> + '_ {
        self.reverse.get(&gpa).into_iter().flatten().copied()
    }

    fn insert(&mut self, gva: Gva, pte: Pte) {
        self.reverse.entry(pte.gpa).or_default().insert(gva);
        self.entries.insert(gva, pte);
    }

    fn remove(&mut self, gva: Gva) -> Option<Pte> {
        let pte = self.entries.remove(&gva)?;
        if let Some(set) = self.reverse.get_mut(&pte.gpa) {
            set.remove(&gva);
            if set.is_empty() {
                self.reverse.remove(&pte.gpa);
            }
        }
        Some(pte)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ept {
    entries: BTreeMap<Gpa, EptEntry>,
}

impl Ept {
    pub fn translate(&self, gpa: Gpa) -> Option<Hpa> {
        self.entries.get(&gpa).map(|e| e.hpa)
    }

    pub fn get(&self, gpa: Gpa) -> Option<&EptEntry> {
        self.entries.get(&gpa)
    }

    pub fn is_dirty(&self, gpa: Gpa) -> bool {
        self.entries.get(&gpa).is_some_and(|e| e.dirty)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dirty_gpas(&self) -> impl Iterator<Item = Gpa> + '_ {
        self.entries.iter().filter(|(_, e)| e.dirty).map(|(g, _)| *g)
    }
}

/// Host page contents. When payloads are disabled only metadata is kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageStore {
    pub page_size: usize,
    payloads: bool,
    contents: BTreeMap<Hpa, Box<[u8]>>,
}

impl PageStore {
    pub fn new(payloads: bool) -> Self {
        PageStore {
            page_size: PAGE_SIZE,
            payloads,
            contents: BTreeMap::new(),
        }
    }

    pub fn payloads(&self) -> bool {
        self.payloads
    }

    pub fn get(&self, hpa: Hpa) -> Option<&[u8]> {
        self.contents.get(&hpa).map(|b| &b[..])
    }

    fn alloc(&mut self, hpa: Hpa, init: Option<Box<[u8]>>) {
        if self.payloads {
            let page = init.unwrap_or_else(|| vec![0u8; self.page_size].into_boxed_slice());
            self.contents.insert(hpa, page);
        }
    }

    fn take(&mut self, hpa: Hpa) -> Option<Box<[u8]>> {
        self.contents.remove(&hpa)
    }

    fn stamp(&mut self, hpa: Hpa, value: u64) {
        if let Some(p) = self.contents.get_mut(&hpa) {
            let off = (value as usize % (p.len() / 8)) * 8;
            p[..8].copy_from_slice(&value.to_le_bytes());
            p[off..off + 8].copy_from_slice(&value.to_le_bytes());
        }
    }
}

/// Why a write could not complete without kernel involvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Write-protected by a soft-dirty clear.
    SoftDirty,
    /// Write-protected by userfaultfd.
    UffdWp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteProbe {
    Fault(FaultKind),
    /// The write can proceed; `transition` is true when it would set a clear
    /// EPT dirty bit (the condition for a PML log record).
    Clean {
        gpa: Gpa,
        transition: bool,
    },
}

/// Result of a completed [`AddressSpace::write_page`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Fault(FaultKind),
    Written { gpa: Gpa, pml_log: bool },
}

/// Guest page tables of every process plus the VM-wide EPT and host pages.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    tables: BTreeMap<Pid, GuestPageTable>,
    pub ept: Ept,
    pub store: PageStore,
    next_gpa: u64,
    next_hpa: u64,
}

impl AddressSpace {
    pub fn new(payloads: bool) -> Self {
        AddressSpace {
            tables: BTreeMap::new(),
            ept: Ept::default(),
            store: PageStore::new(payloads),
            next_gpa: 0x100,
            next_hpa: 0x10_0000,
        }
    }

    pub fn add_process(&mut self, pid: Pid) {
        self.tables.entry(pid).or_insert_with(|| GuestPageTable::new(pid));
    }

    pub fn table(&self, pid: Pid) -> Result<&GuestPageTable, AddrError> {
        self.tables.get(&pid).ok_or(AddrError::UnknownPid(pid))
    }

    fn table_mut(&mut self, pid: Pid) -> Result<&mut GuestPageTable, AddrError> {
        self.tables.get_mut(&pid).ok_or(AddrError::UnknownPid(pid))
    }

    fn pte_mut(&mut self, pid: Pid, gva: Gva) -> Result<&mut Pte, AddrError> {
        self.table_mut(pid)?
            .entries
            .get_mut(&gva)
            .ok_or(AddrError::NotMapped { pid, gva })
    }

    pub fn translate_gva(&self, pid: Pid, gva: Gva) -> Result<(Gpa, PageFlags), AddrError> {
        self.table(pid)?
            .get(gva)
            .map(|p| (p.gpa, p.flags))
            .ok_or(AddrError::NotMapped { pid, gva })
    }

    /// Lowest GVA of `pid` currently mapping `gpa`.
    pub fn reverse_map(&self, pid: Pid, gpa: Gpa) -> Result<Gva, AddrError> {
        self.table(pid)?.gvas_of(gpa).next().ok_or(AddrError::Lost(gpa))
    }

    fn fresh_frame(&mut self, init: Option<Box<[u8]>>) -> Gpa {
        let gpa = Gpa(self.next_gpa);
        let hpa = Hpa(self.next_hpa);
        self.next_gpa += 1;
        self.next_hpa += 1;
        self.ept.entries.insert(
            gpa,
            EptEntry {
                hpa,
                dirty: false,
                refs: 0,
            },
        );
        self.store.alloc(hpa, init);
        gpa
    }

    fn release(&mut self, gpa: Gpa) -> Option<Box<[u8]>> {
        let e = self.ept.entries.get_mut(&gpa)?;
        e.refs -= 1;
        if e.refs == 0 {
            let hpa = e.hpa;
            self.ept.entries.remove(&gpa);
            return self.store.take(hpa);
        }
        None
    }

    /// Allocates a frame owned by the guest kernel (not mapped by any
    /// process), e.g. a guest-level PML buffer.
    pub fn alloc_kernel_frame(&mut self) -> Gpa {
        let gpa = self.fresh_frame(None);
        self.ept.entries.get_mut(&gpa).expect("fresh").refs = 1;
        gpa
    }

    /// Demand-maps `gva` onto a fresh zeroed frame.
    pub fn map(&mut self, pid: Pid, gva: Gva) -> Result<Gpa, AddrError> {
        if self.table(pid)?.get(gva).is_some() {
            return Err(AddrError::AlreadyMapped { pid, gva });
        }
        let gpa = self.fresh_frame(None);
        self.install(pid, gva, gpa)?;
        Ok(gpa)
    }

    fn install(&mut self, pid: Pid, gva: Gva, gpa: Gpa) -> Result<(), AddrError> {
        let flags = PageFlags {
            present: true,
            writable: true,
            ..Default::default()
        };
        self.table_mut(pid)?.insert(gva, Pte { gpa, flags });
        if let Some(e) = self.ept.entries.get_mut(&gpa) {
            e.refs += 1;
        }
        Ok(())
    }

    /// Maps `gva` onto the frame already backing `existing` (page sharing).
    pub fn alias(&mut self, pid: Pid, gva: Gva, existing: Gva) -> Result<Gpa, AddrError> {
        let (gpa, _) = self
            .translate_gva(pid, existing)
            .map_err(|_| AddrError::UnknownMapping { pid, gva: existing })?;
        if self.table(pid)?.get(gva).is_some() {
            return Err(AddrError::AlreadyMapped { pid, gva });
        }
        self.install(pid, gva, gpa)?;
        Ok(gpa)
    }

    /// Moves the mapping of `old` to `new`; the backing frame is unchanged.
    pub fn remap(&mut self, pid: Pid, old: Gva, new: Gva) -> Result<(), AddrError> {
        let t = self.table_mut(pid)?;
        if t.get(old).is_none() {
            return Err(AddrError::UnknownMapping { pid, gva: old });
        }
        if t.get(new).is_some() {
            return Err(AddrError::AlreadyMapped { pid, gva: new });
        }
        let pte = t.remove(old).expect("checked above");
        t.insert(new, pte);
        Ok(())
    }

    pub fn unmap(&mut self, pid: Pid, gva: Gva) -> Result<(), AddrError> {
        let pte = self
            .table_mut(pid)?
            .remove(gva)
            .ok_or(AddrError::UnknownMapping { pid, gva })?;
        self.release(pte.gpa);
        Ok(())
    }

    /// Kernel-side frame relocation: `gva` keeps its contents and PTE flags
    /// but is backed by a brand-new GPA whose EPT dirty bit is clear.
    pub fn relocate(&mut self, pid: Pid, gva: Gva) -> Result<(Gpa, Gpa), AddrError> {
        let old = *self
            .table(pid)?
            .get(gva)
            .ok_or(AddrError::UnknownMapping { pid, gva })?;
        let payload = self
            .ept
            .translate(old.gpa)
            .and_then(|h| self.store.get(h))
            .map(Box::from);
        let new_gpa = self.fresh_frame(payload);
        let t = self.table_mut(pid)?;
        t.remove(gva);
        t.insert(
            gva,
            Pte {
                gpa: new_gpa,
                flags: old.flags,
            },
        );
        self.ept.entries.get_mut(&new_gpa).expect("fresh").refs += 1;
        self.release(old.gpa);
        Ok((old.gpa, new_gpa))
    }

    /// Checks what a write to `gva` would do without changing any state.
    pub fn probe_write(&self, pid: Pid, gva: Gva) -> Result<WriteProbe, AddrError> {
        let pte = self.table(pid)?.get(gva).ok_or(AddrError::NotMapped { pid, gva })?;
        if pte.flags.uffd_wp {
            return Ok(WriteProbe::Fault(FaultKind::UffdWp));
        }
        if !pte.flags.writable || !pte.flags.present {
            return Ok(WriteProbe::Fault(FaultKind::SoftDirty));
        }
        Ok(WriteProbe::Clean {
            gpa: pte.gpa,
            transition: !self.ept.is_dirty(pte.gpa),
        })
    }

    /// Performs a write that [`probe_write`](Self::probe_write) reported as
    /// clean. `stamp` is recorded in the page payload when payloads are on.
    pub fn commit_write(&mut self, pid: Pid, gva: Gva, stamp: u64) -> Result<Gpa, AddrError> {
        let pte = self.pte_mut(pid, gva)?;
        pte.flags.dirty = true;
        pte.flags.soft_dirty = true;
        let gpa = pte.gpa;
        let e = self.ept.entries.get_mut(&gpa).expect("mapped GPA has EPT entry");
        e.dirty = true;
        let hpa = e.hpa;
        self.store.stamp(hpa, stamp);
        Ok(gpa)
    }

    /// Probe and commit in one step. `pml_log` reports an EPT dirty
    /// transition; whether a record is produced is the device's business.
    pub fn write_page(&mut self, pid: Pid, gva: Gva, stamp: u64) -> Result<WriteOutcome, AddrError> {
        match self.probe_write(pid, gva)? {
            WriteProbe::Fault(k) => Ok(WriteOutcome::Fault(k)),
            WriteProbe::Clean { transition, .. } => {
                let gpa = self.commit_write(pid, gva, stamp)?;
                Ok(WriteOutcome::Written {
                    gpa,
                    pml_log: transition,
                })
            }
        }
    }

    /// Soft-dirty clear: drops every soft-dirty bit of `pid` and
    /// write-protects its pages. Returns the number of PTEs visited.
    pub fn clear_soft_dirty(&mut self, pid: Pid) -> Result<usize, AddrError> {
        let t = self.table_mut(pid)?;
        for pte in t.entries.values_mut() {
            pte.flags.soft_dirty = false;
            pte.flags.writable = false;
        }
        Ok(t.entries.len())
    }

    /// Kernel soft-dirty fault path: make the page writable again.
    pub fn resolve_soft_dirty_fault(&mut self, pid: Pid, gva: Gva) -> Result<(), AddrError> {
        self.pte_mut(pid, gva)?.flags.writable = true;
        Ok(())
    }

    pub fn soft_dirty_pages(&self, pid: Pid) -> Result<BTreeSet<Gva>, AddrError> {
        Ok(self
            .table(pid)?
            .iter()
            .filter(|(_, p)| p.flags.soft_dirty)
            .map(|(g, _)| *g)
            .collect())
    }

    /// Write-protects every mapped page of `pid` in `range` for userfaultfd.
    pub fn uffd_protect(&mut self, pid: Pid, range: std::ops::Range<u64>) -> Result<usize, AddrError> {
        let t = self.table_mut(pid)?;
        let mut n = 0;
        for (_, pte) in t.entries.range_mut(Gva(range.start)..Gva(range.end)) {
            pte.flags.uffd_wp = true;
            n += 1;
        }
        Ok(n)
    }

    /// Returns false when the page was not write-protected.
    pub fn uffd_unprotect(&mut self, pid: Pid, gva: Gva) -> Result<bool, AddrError> {
        let f = &mut self.pte_mut(pid, gva)?.flags;
        Ok(std::mem::replace(&mut f.uffd_wp, false))
    }

    pub fn clear_ept_dirty(&mut self, gpa: Gpa) {
        if let Some(e) = self.ept.entries.get_mut(&gpa) {
            e.dirty = false;
        }
    }

    /// Clears the EPT dirty bit of every frame mapped by `pid`.
    pub fn clear_ept_dirty_for(&mut self, pid: Pid) -> Result<usize, AddrError> {
        let gpas: Vec<Gpa> = self.table(pid)?.reverse.keys().copied().collect();
        for g in &gpas {
            self.clear_ept_dirty(*g);
        }
        Ok(gpas.len())
    }

    pub fn clear_pte_dirty(&mut self, pid: Pid) -> Result<(), AddrError> {
        for pte in self.table_mut(pid)?.entries.values_mut() {
            pte.flags.dirty = false;
        }
        Ok(())
    }

    pub fn pte_dirty_pages(&self, pid: Pid) -> Result<BTreeSet<Gva>, AddrError> {
        Ok(self
            .table(pid)?
            .iter()
            .filter(|(_, p)| p.flags.dirty)
            .map(|(g, _)| *g)
            .collect())
    }

    pub fn mapped_pages(&self, pid: Pid) -> Result<BTreeSet<Gva>, AddrError> {
        Ok(self.table(pid)?.entries.keys().copied().collect())
    }

    pub fn read_page(&self, pid: Pid, gva: Gva) -> Option<&[u8]> {
        let (gpa, _) = self.translate_gva(pid, gva).ok()?;
        self.store.get(self.ept.translate(gpa)?)
    }

    /// Copies out every mapped page of `pid` (empty payloads when disabled).
    pub fn snapshot(&self, pid: Pid) -> Result<BTreeMap<Gva, Vec<u8>>, AddrError> {
        Ok(self
            .table(pid)?
            .iter()
            .map(|(g, _)| (*g, self.read_page(pid, *g).map(<[u8]>::to_vec).unwrap_or_default()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> AddressSpace {
        let mut s = AddressSpace::new(true);
        s.add_process(1);
        s
    }

    #[test]
    fn translate_and_alias() {
        let mut s = space();
        let g = s.map(1, Gva(7)).unwrap();
        assert_eq!(s.translate_gva(1, Gva(7)).unwrap().0, g);
        assert_eq!(
            s.translate_gva(1, Gva(9)),
            Err(AddrError::NotMapped { pid: 1, gva: Gva(9) })
        );
        s.map(1, Gva(3)).unwrap();
        let shared = s.alias(1, Gva(4), Gva(3)).unwrap();
        assert_eq!(s.translate_gva(1, Gva(3)).unwrap().0, shared);
        assert_eq!(s.translate_gva(1, Gva(4)).unwrap().0, shared);
        assert_eq!(s.reverse_map(1, shared), Ok(Gva(3)));
    }

    #[test]
    fn reverse_map_after_remap_and_unmap() {
        let mut s = space();
        let g = s.map(1, Gva(3)).unwrap();
        s.remap(1, Gva(3), Gva(12)).unwrap();
        assert_eq!(s.reverse_map(1, g), Ok(Gva(12)));
        s.unmap(1, Gva(12)).unwrap();
        assert_eq!(s.reverse_map(1, g), Err(AddrError::Lost(g)));
        assert_eq!(
            s.unmap(1, Gva(12)),
            Err(AddrError::UnknownMapping { pid: 1, gva: Gva(12) })
        );
        assert!(s.ept.get(g).is_none());
    }

    #[test]
    fn alias_keeps_frame_alive_on_partial_unmap() {
        let mut s = space();
        let g = s.map(1, Gva(1)).unwrap();
        s.alias(1, Gva(2), Gva(1)).unwrap();
        s.unmap(1, Gva(1)).unwrap();
        assert!(s.ept.get(g).is_some());
        assert_eq!(s.reverse_map(1, g), Ok(Gva(2)));
    }

    #[test]
    fn dirty_transition_only_once() {
        let mut s = space();
        s.map(1, Gva(5)).unwrap();
        assert!(matches!(
            s.write_page(1, Gva(5), 1),
            Ok(WriteOutcome::Written { pml_log: true, .. })
        ));
        assert!(matches!(
            s.write_page(1, Gva(5), 2),
            Ok(WriteOutcome::Written { pml_log: false, .. })
        ));
        s.clear_ept_dirty_for(1).unwrap();
        assert!(matches!(
            s.write_page(1, Gva(5), 3),
            Ok(WriteOutcome::Written { pml_log: true, .. })
        ));
    }

    #[test]
    fn uffd_and_soft_dirty_faults() {
        let mut s = space();
        for g in 0..4 {
            s.map(1, Gva(g)).unwrap();
        }
        assert_eq!(s.uffd_protect(1, 1..3).unwrap(), 2);
        assert_eq!(s.write_page(1, Gva(1), 1), Ok(WriteOutcome::Fault(FaultKind::UffdWp)));
        assert!(!s.ept.is_dirty(s.translate_gva(1, Gva(1)).unwrap().0));
        assert!(matches!(s.write_page(1, Gva(3), 1), Ok(WriteOutcome::Written { .. })));
        assert!(s.uffd_unprotect(1, Gva(1)).unwrap());
        assert!(matches!(s.write_page(1, Gva(1), 1), Ok(WriteOutcome::Written { .. })));

        s.clear_soft_dirty(1).unwrap();
        assert!(s.soft_dirty_pages(1).unwrap().is_empty());
        assert_eq!(
            s.write_page(1, Gva(0), 1),
            Ok(WriteOutcome::Fault(FaultKind::SoftDirty))
        );
        s.resolve_soft_dirty_fault(1, Gva(0)).unwrap();
        s.write_page(1, Gva(0), 1).unwrap();
        assert_eq!(s.soft_dirty_pages(1).unwrap(), BTreeSet::from([Gva(0)]));
    }

    #[test]
    fn relocate_preserves_contents_and_flags() {
        let mut s = space();
        s.map(1, Gva(2)).unwrap();
        s.write_page(1, Gva(2), 0xABCD).unwrap();
        let before = s.read_page(1, Gva(2)).unwrap().to_vec();
        let (old, new) = s.relocate(1, Gva(2)).unwrap();
        assert_ne!(old, new);
        assert!(s.ept.get(old).is_none());
        assert!(!s.ept.is_dirty(new));
        assert_eq!(s.read_page(1, Gva(2)).unwrap(), &before[..]);
        assert!(s.translate_gva(1, Gva(2)).unwrap().1.dirty);
        assert_eq!(s.reverse_map(1, old), Err(AddrError::Lost(old)));
    }

    #[test]
    fn payloads_optional() {
        let mut s = AddressSpace::new(false);
        s.add_process(1);
        s.map(1, Gva(0)).unwrap();
        s.write_page(1, Gva(0), 9).unwrap();
        assert!(s.read_page(1, Gva(0)).is_none());
        assert_eq!(s.snapshot(1).unwrap()[&Gva(0)], Vec::<u8>::new());
    }
}
