//! Page Modification Logging hardware: VMCS fields, the hypervisor-level
//! buffer, EPML's guest-level buffer and shadow-VMCS access control.
//!
//! Indices behave like the 16-bit hardware field: logging writes slot
//! `index` then decrements, so after 512 records the index wraps to
//! `0xFFFF` and the next attempt reports the buffer full. The write that hit
//! the full buffer is restarted once the handler has drained it; only if a
//! signaled buffer is still full on restart is the record dropped.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addr::{Ept, Gpa, Gva, Hpa};

pub const PML_ENTRIES: usize = 512;
pub const INDEX_START: u16 = 511;
pub const INDEX_DISABLED: u16 = 512;
/// Index value after the last slot has been used.
pub const INDEX_FULL: u16 = u16::MAX;

/// Number of records held by a buffer with the given index.
pub fn logged_count(index: u16) -> usize {
    match index {
        INDEX_FULL => PML_ENTRIES,
        i if i <= INDEX_START => usize::from(INDEX_START - i),
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogOutcome {
    Logged,
    /// The hypervisor buffer is full: vmexit, then restart the write.
    HvBufferFull,
    /// The guest buffer is full: posted self-IPI, then restart the write.
    GuestBufferFull,
    Disabled,
    /// A buffer that already signaled full is still full; its record was
    /// dropped (the other buffer, if armed, logged normally).
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VmcsField {
    PmlAddress,
    PmlIndex,
    GuestPmlAddress,
    GuestPmlIndex,
    EptPointer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    Hypervisor,
    Guest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PmlError {
    #[error("guest access to {0:?} is not allowed by the shadow VMCS bitmap")]
    Trap(VmcsField),
    #[error("{0} is not mapped in the EPT")]
    TranslationFault(Gpa),
    #[error("invalid value {0} for a PML index")]
    InvalidValue(u64),
}

/// Guest-accessible view of the VMCS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowVmcs {
    pub vmread_bitmap: BTreeSet<VmcsField>,
    pub vmwrite_bitmap: BTreeSet<VmcsField>,
}

impl ShadowVmcs {
    /// No guest access at all.
    pub fn closed() -> Self {
        ShadowVmcs {
            vmread_bitmap: BTreeSet::new(),
            vmwrite_bitmap: BTreeSet::new(),
        }
    }

    /// The EPML configuration: only the guest-level PML fields are exposed.
    pub fn epml() -> Self {
        let f = BTreeSet::from([VmcsField::GuestPmlAddress, VmcsField::GuestPmlIndex]);
        ShadowVmcs {
            vmread_bitmap: f.clone(),
            vmwrite_bitmap: f,
        }
    }
}

type Slots = Box<[u64; PML_ENTRIES]>;

fn empty_slots() -> Slots {
    Box::new([0; PML_ENTRIES])
}

/// Records in logging order (slot 511 first) for a buffer at `index`.
fn records(slots: &[u64; PML_ENTRIES], index: u16) -> impl Iterator<Item = u64> + '_ {
    let n = logged_count(index);
    (PML_ENTRIES - n..PML_ENTRIES).rev().map(move |i| slots[i])
}

/// Per-vCPU PML state, including guest memory holding guest-level buffers.
#[derive(Debug, Clone)]
pub struct PmlState {
    pub pml_address: Option<Hpa>,
    pub pml_index: u16,
    hv_buffer: Slots,
    hv_signaled: bool,
    pub guest_pml_address: Option<Hpa>,
    pub guest_pml_index: u16,
    guest_signaled: bool,
    pub epml_enabled: bool,
    pub shadow: ShadowVmcs,
    /// Guest-level buffers, addressed by the HPA of the page backing them.
    guest_mem: BTreeMap<Hpa, Slots>,
    pub hv_dropped: u64,
    pub guest_dropped: u64,
}

impl Default for PmlState {
    fn default() -> Self {
        PmlState {
            pml_address: None,
            pml_index: INDEX_DISABLED,
            hv_buffer: empty_slots(),
            hv_signaled: false,
            guest_pml_address: None,
            guest_pml_index: INDEX_DISABLED,
            guest_signaled: false,
            epml_enabled: false,
            shadow: ShadowVmcs::closed(),
            guest_mem: BTreeMap::new(),
            hv_dropped: 0,
            guest_dropped: 0,
        }
    }
}

impl PmlState {
    fn hv_armed(&self) -> bool {
        self.pml_address.is_some() && self.pml_index != INDEX_DISABLED
    }

    fn guest_armed(&self) -> bool {
        self.epml_enabled && self.guest_pml_address.is_some() && self.guest_pml_index != INDEX_DISABLED
    }

    pub fn logging_armed(&self) -> bool {
        self.hv_armed() || self.guest_armed()
    }

    /// Called on an EPT dirty-bit transition caused by a write through `gva`.
    pub fn log_dirty(&mut self, gpa: Gpa, gva: Gva) -> LogOutcome {
        let hv = self.hv_armed();
        let guest = self.guest_armed();
        if !hv && !guest {
            return LogOutcome::Disabled;
        }
        let hv_full = hv && self.pml_index == INDEX_FULL;
        let guest_full = guest && self.guest_pml_index == INDEX_FULL;
        if hv_full && !self.hv_signaled {
            self.hv_signaled = true;
            return LogOutcome::HvBufferFull;
        }
        if guest_full && !self.guest_signaled {
            self.guest_signaled = true;
            return LogOutcome::GuestBufferFull;
        }
        let mut dropped = false;
        if hv {
            if hv_full {
                self.hv_dropped += 1;
                dropped = true;
            } else {
                self.hv_buffer[usize::from(self.pml_index)] = gpa.0;
                self.pml_index = self.pml_index.wrapping_sub(1);
            }
        }
        if guest {
            if guest_full {
                self.guest_dropped += 1;
                dropped = true;
            } else {
                let hpa = self.guest_pml_address.expect("armed");
                let slots = self.guest_mem.entry(hpa).or_insert_with(empty_slots);
                slots[usize::from(self.guest_pml_index)] = gva.0;
                self.guest_pml_index = self.guest_pml_index.wrapping_sub(1);
            }
        }
        if dropped {
            LogOutcome::Dropped
        } else {
            LogOutcome::Logged
        }
    }

    /// Hypervisor-side reset of either index to one of the protocol values.
    pub fn reset_index(&mut self, which: Which, value: u16) -> Result<(), PmlError> {
        if value != INDEX_START && value != INDEX_DISABLED {
            return Err(PmlError::InvalidValue(value.into()));
        }
        self.set_index(which, value);
        Ok(())
    }

    fn set_index(&mut self, which: Which, value: u16) {
        match which {
            Which::Hypervisor => {
                self.pml_index = value;
                self.hv_signaled = false;
            }
            Which::Guest => {
                self.guest_pml_index = value;
                self.guest_signaled = false;
            }
        }
    }

    /// Hypervisor-buffer records in logging order.
    pub fn hv_records(&self) -> Vec<Gpa> {
        records(&self.hv_buffer, self.pml_index).map(Gpa).collect()
    }

    pub fn hv_count(&self) -> usize {
        logged_count(self.pml_index)
    }

    /// Takes every hypervisor-buffer record and re-arms at 511 (or leaves
    /// the buffer disabled if it was).
    pub fn take_hv_records(&mut self) -> Vec<Gpa> {
        let out = self.hv_records();
        if self.pml_index != INDEX_DISABLED {
            self.set_index(Which::Hypervisor, INDEX_START);
        }
        out
    }

    /// Records of the guest-level buffer at `hpa` for a given index value,
    /// as read by the guest kernel from its own memory.
    pub fn guest_records(&self, hpa: Hpa, index: u16) -> Vec<Gva> {
        self.guest_mem
            .get(&hpa)
            .map(|s| records(s, index).map(Gva).collect())
            .unwrap_or_default()
    }

    pub fn guest_buffer_full_pending(&self) -> bool {
        self.guest_signaled
    }

    /// Guest `vmwrite` through the shadow VMCS.
    pub fn guest_vmwrite(&mut self, field: VmcsField, value: u64, ept: &Ept) -> Result<(), PmlError> {
        if !self.shadow.vmwrite_bitmap.contains(&field) {
            return Err(PmlError::Trap(field));
        }
        match field {
            VmcsField::GuestPmlAddress => {
                let hpa = ept
                    .translate(Gpa(value))
                    .ok_or(PmlError::TranslationFault(Gpa(value)))?;
                self.guest_pml_address = Some(hpa);
                self.guest_mem.entry(hpa).or_insert_with(empty_slots);
            }
            VmcsField::GuestPmlIndex => self.set_index(Which::Guest, index_value(value)?),
            VmcsField::PmlIndex => self.set_index(Which::Hypervisor, index_value(value)?),
            VmcsField::PmlAddress => self.pml_address = Some(Hpa(value)),
            VmcsField::EptPointer => {}
        }
        Ok(())
    }

    /// Guest `vmread` through the shadow VMCS.
    pub fn guest_vmread(&self, field: VmcsField) -> Result<u64, PmlError> {
        if !self.shadow.vmread_bitmap.contains(&field) {
            return Err(PmlError::Trap(field));
        }
        Ok(match field {
            VmcsField::GuestPmlAddress => self.guest_pml_address.map_or(0, |h| h.0),
            VmcsField::GuestPmlIndex => self.guest_pml_index.into(),
            VmcsField::PmlAddress => self.pml_address.map_or(0, |h| h.0),
            VmcsField::PmlIndex => self.pml_index.into(),
            VmcsField::EptPointer => 0,
        })
    }
}

fn index_value(v: u64) -> Result<u16, PmlError> {
    match u16::try_from(v) {
        Ok(i) if i <= INDEX_DISABLED || i == INDEX_FULL => Ok(i),
        _ => Err(PmlError::InvalidValue(v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::AddressSpace;

    fn armed() -> PmlState {
        let mut s = PmlState {
            pml_address: Some(Hpa(1)),
            ..Default::default()
        };
        s.reset_index(Which::Hypervisor, INDEX_START).unwrap();
        s
    }

    #[test]
    fn first_log_lands_in_slot_511() {
        let mut s = armed();
        assert_eq!(s.log_dirty(Gpa(10), Gva(1)), LogOutcome::Logged);
        assert_eq!(s.pml_index, 510);
        assert_eq!(s.hv_buffer[511], 10);
        assert_eq!(s.hv_records(), vec![Gpa(10)]);
    }

    #[test]
    fn full_on_513th_attempt_and_restart() {
        let mut s = armed();
        for i in 0..512 {
            assert_eq!(s.log_dirty(Gpa(i), Gva(i)), LogOutcome::Logged);
        }
        assert_eq!(s.pml_index, INDEX_FULL);
        assert_eq!(s.hv_count(), 512);
        assert_eq!(s.log_dirty(Gpa(512), Gva(512)), LogOutcome::HvBufferFull);
        assert_eq!(s.hv_count(), 512);
        let got = s.take_hv_records();
        assert_eq!(got, (0..512).map(Gpa).collect::<Vec<_>>());
        // restarted write
        assert_eq!(s.log_dirty(Gpa(512), Gva(512)), LogOutcome::Logged);
        assert_eq!(s.hv_buffer[511], 512);
    }

    #[test]
    fn signaled_full_buffer_drops() {
        let mut s = armed();
        for i in 0..512 {
            s.log_dirty(Gpa(i), Gva(i));
        }
        assert_eq!(s.log_dirty(Gpa(1000), Gva(0)), LogOutcome::HvBufferFull);
        assert_eq!(s.log_dirty(Gpa(1000), Gva(0)), LogOutcome::Dropped);
        assert_eq!(s.hv_dropped, 1);
    }

    #[test]
    fn disabled_at_512() {
        let mut s = armed();
        s.reset_index(Which::Hypervisor, INDEX_DISABLED).unwrap();
        assert_eq!(s.log_dirty(Gpa(1), Gva(1)), LogOutcome::Disabled);
        assert_eq!(s.hv_count(), 0);
        assert_eq!(s.reset_index(Which::Hypervisor, 300), Err(PmlError::InvalidValue(300)));
    }

    fn epml() -> (PmlState, AddressSpace, Gpa) {
        let mut mem = AddressSpace::new(false);
        let buf = mem.alloc_kernel_frame();
        let s = PmlState {
            epml_enabled: true,
            shadow: ShadowVmcs::epml(),
            ..Default::default()
        };
        (s, mem, buf)
    }

    #[test]
    fn guest_vmwrite_translates_address() {
        let (mut s, mem, buf) = epml();
        s.guest_vmwrite(VmcsField::GuestPmlAddress, buf.0, &mem.ept).unwrap();
        let hpa = mem.ept.translate(buf).unwrap();
        assert_eq!(s.guest_pml_address, Some(hpa));
        assert_eq!(s.guest_vmread(VmcsField::GuestPmlAddress), Ok(hpa.0));
        assert_eq!(
            s.guest_vmwrite(VmcsField::GuestPmlAddress, 0xdead_beef, &mem.ept),
            Err(PmlError::TranslationFault(Gpa(0xdead_beef)))
        );
        assert_eq!(
            s.guest_vmwrite(VmcsField::PmlIndex, 511, &mem.ept),
            Err(PmlError::Trap(VmcsField::PmlIndex))
        );
        assert_eq!(
            s.guest_vmread(VmcsField::EptPointer),
            Err(PmlError::Trap(VmcsField::EptPointer))
        );
    }

    #[test]
    fn guest_logging_and_index_reads() {
        let (mut s, mem, buf) = epml();
        s.guest_vmwrite(VmcsField::GuestPmlAddress, buf.0, &mem.ept).unwrap();
        s.guest_vmwrite(VmcsField::GuestPmlIndex, 511, &mem.ept).unwrap();
        for i in 0..3 {
            assert_eq!(s.log_dirty(Gpa(100 + i), Gva(i)), LogOutcome::Logged);
        }
        assert_eq!(s.guest_vmread(VmcsField::GuestPmlIndex), Ok(508));
        // the hypervisor buffer was never armed
        assert_eq!(s.hv_count(), 0);
        let hpa = s.guest_pml_address.unwrap();
        assert_eq!(s.guest_records(hpa, 508), vec![Gva(0), Gva(1), Gva(2)]);
        s.guest_vmwrite(VmcsField::GuestPmlIndex, 512, &mem.ept).unwrap();
        assert_eq!(s.log_dirty(Gpa(1), Gva(9)), LogOutcome::Disabled);
    }

    #[test]
    fn dual_buffers_log_atomically() {
        let (mut s, mem, buf) = epml();
        s.pml_address = Some(Hpa(1));
        s.reset_index(Which::Hypervisor, INDEX_START).unwrap();
        s.guest_vmwrite(VmcsField::GuestPmlAddress, buf.0, &mem.ept).unwrap();
        s.guest_vmwrite(VmcsField::GuestPmlIndex, 5, &mem.ept).unwrap();
        for i in 0..6 {
            assert_eq!(s.log_dirty(Gpa(i), Gva(i)), LogOutcome::Logged);
        }
        // guest buffer full first; the hv buffer must not get the record twice
        assert_eq!(s.log_dirty(Gpa(6), Gva(6)), LogOutcome::GuestBufferFull);
        assert_eq!(s.hv_count(), 6);
        s.guest_vmwrite(VmcsField::GuestPmlIndex, 511, &mem.ept).unwrap();
        assert_eq!(s.log_dirty(Gpa(6), Gva(6)), LogOutcome::Logged);
        assert_eq!(s.hv_count(), 7);
    }

    #[test]
    fn index_value_range() {
        assert!(index_value(0).is_ok());
        assert!(index_value(512).is_ok());
        assert!(index_value(u64::from(INDEX_FULL)).is_ok());
        assert_eq!(index_value(513), Err(PmlError::InvalidValue(513)));
    }
}
