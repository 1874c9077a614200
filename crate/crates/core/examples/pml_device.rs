//! The PML buffer by hand: fill it, watch the full signal, disable it, and
//! route a flush into the guest-visible ring.
//!
//! cargo run --example pml_device

use oohsim::addr::{Ept, Gpa, Gva, Hpa};
use oohsim::hypervisor::{CoordRequest, Hypercall, Hypervisor, DEFAULT_RING_CAPACITY};
use oohsim::pml::{LogOutcome, PmlState, VmcsField, Which, INDEX_DISABLED, INDEX_START};

fn main() {
    let mut pml = PmlState::default();
    pml.pml_address = Some(Hpa(0x8000));
    pml.reset_index(Which::Hypervisor, INDEX_START).unwrap();

    let mut logged = 0;
    let full_at = loop {
        match pml.log_dirty(Gpa(logged), Gva(logged)) {
            LogOutcome::Logged => logged += 1,
            LogOutcome::HvBufferFull => break logged + 1,
            other => panic!("unexpected {other:?}"),
        }
    };
    println!("{logged} records logged, full signaled on attempt {full_at}");

    let recs = pml.take_hv_records();
    println!("drained {} records, index back at {}", recs.len(), pml.pml_index);

    pml.reset_index(Which::Hypervisor, INDEX_DISABLED).unwrap();
    println!("index {} -> {:?}", INDEX_DISABLED, pml.log_dirty(Gpa(1), Gva(1)));
    println!("index 300 -> {:?}", pml.reset_index(Which::Hypervisor, 300));

    // Without shadowing the guest cannot touch any PML field.
    let ept = Ept::default();
    println!("guest vmwrite: {:?}", pml.guest_vmwrite(VmcsField::PmlIndex, 511, &ept));

    // Through the hypervisor: a guest-enabled buffer flushes into the ring.
    let mut hv = Hypervisor::new(DEFAULT_RING_CAPACITY);
    hv.hypercall(Hypercall::InitPml { pid: 7 }).unwrap();
    for g in 0..600 {
        if hv.log_dirty(Gpa(g), Gva(g)) == LogOutcome::HvBufferFull {
            let a = hv.handle_pml_full_vmexit();
            println!("vmexit after {g} writes: {} records to the ring", a.to_ring);
            hv.log_dirty(Gpa(g), Gva(g));
        }
    }
    let a = hv.coordinate(CoordRequest::SchedOut);
    println!("schedule-out flushed {} more", a.to_ring);
    for b in hv.ring.blocks() {
        println!("ring block pid {} count {}", b.pid, b.count());
    }
}
