//! Trace fuzzer and brute-force replay oracle shared by the integration
//! tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use oohsim::addr::Gva;
use oohsim::cost::Calibration;
use oohsim::sim::machine::{run_single, Vm, VmConfig};
use oohsim::size::ByteSize;
use oohsim::tracker::{Technique, TrackerConfig, TrackerPhaseReport};
use oohsim::workload::{Op, Workload, REGION_BASE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Trace {
    pub pages: u64,
    pub workload: Workload,
}

/// Random trace over at most `max_pages` pages: writes, compute, unmaps,
/// an occasional interval boundary and, when `churn`, frame relocations.
pub fn fuzz_trace(seed: u64, max_pages: u64, churn: bool) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages = rng.random_range(1..=max_pages);
    let page = |rng: &mut ChaCha8Rng| Gva(REGION_BASE + rng.random_range(0..pages));
    let premapped: Vec<Gva> = (0..pages)
        .filter(|_| rng.random_bool(0.8))
        .map(|i| Gva(REGION_BASE + i))
        .collect();
    let n_ops = rng.random_range(1..=2 * pages);
    let mut ops = Vec::with_capacity(n_ops as usize);
    for _ in 0..n_ops {
        let r: f64 = rng.random();
        let op = if r < 0.80 {
            Op::Write(page(&mut rng))
        } else if r < 0.86 {
            Op::Compute(rng.random_range(1.0..500.0))
        } else if r < 0.89 {
            Op::Unmap(page(&mut rng))
        } else if r < 0.90 {
            Op::Checkpoint
        } else if churn {
            Op::Relocate(page(&mut rng))
        } else {
            Op::Write(page(&mut rng))
        };
        ops.push(op);
    }
    Trace {
        pages,
        workload: Workload { premapped, ops },
    }
}

/// Expected result of one monitoring interval.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct OracleInterval {
    /// Pages written during the interval and still mapped at its end.
    pub dirty: BTreeSet<Gva>,
    /// Dirty pages whose frame moved after their last write: their logged
    /// GPA no longer maps back to anything when a single drain happens at
    /// the end of the interval.
    pub lost: BTreeSet<Gva>,
}

/// Replays the trace on plain sets, one entry per interval. A trailing
/// interval is present unless the trace ends on a boundary with nothing
/// written since.
pub fn oracle(w: &Workload) -> Vec<OracleInterval> {
    let mut mapped: BTreeSet<Gva> = w.premapped.iter().copied().collect();
    let mut out = Vec::new();
    let mut written: BTreeMap<Gva, u64> = BTreeMap::new();
    let mut relocated: BTreeMap<Gva, u64> = BTreeMap::new();
    let close = |mapped: &BTreeSet<Gva>, written: &mut BTreeMap<Gva, u64>, relocated: &mut BTreeMap<Gva, u64>| {
        let dirty: BTreeSet<Gva> = written.keys().filter(|g| mapped.contains(g)).copied().collect();
        let lost = dirty
            .iter()
            .filter(|g| relocated.get(g).is_some_and(|r| *r > written[g]))
            .copied()
            .collect();
        written.clear();
        relocated.clear();
        OracleInterval { dirty, lost }
    };
    let mut last_was_boundary = false;
    for (t, op) in w.ops.iter().enumerate() {
        let t = t as u64;
        last_was_boundary = false;
        match *op {
            Op::Write(g) => {
                mapped.insert(g);
                written.insert(g, t);
            }
            Op::Unmap(g) => {
                mapped.remove(&g);
                written.remove(&g);
                relocated.remove(&g);
            }
            Op::Relocate(g) => {
                if mapped.contains(&g) {
                    relocated.insert(g, t);
                }
            }
            Op::Move { .. } => unimplemented!("not generated"),
            Op::Compute(_) => {}
            Op::Checkpoint => {
                out.push(close(&mapped, &mut written, &mut relocated));
                last_was_boundary = true;
            }
        }
    }
    if !last_was_boundary || !written.is_empty() {
        out.push(close(&mapped, &mut written, &mut relocated));
    }
    out
}

pub fn run_trace(t: &Trace, tech: Technique, interval_us: f64, cal: &Arc<Calibration>) -> TrackerPhaseReport {
    let mut tc = TrackerConfig::new(tech);
    tc.collection_interval_us = interval_us;
    let mut vm = Vm::new(
        0,
        VmConfig::new(ByteSize::from_pages(t.pages)),
        Some(tc),
        cal.clone(),
        Arc::new(t.workload.clone()),
    );
    run_single(&mut vm, f64::INFINITY)
}

/// Checks a run against the oracle; `Err` carries a description.
pub fn check_against_oracle(t: &Trace, tech: Technique, r: &TrackerPhaseReport) -> Result<(), String> {
    let want = oracle(&t.workload);
    if want.len() != r.intervals.len() {
        return Err(format!("{} intervals, oracle has {}", r.intervals.len(), want.len()));
    }
    for (i, (o, got)) in want.iter().zip(&r.intervals).enumerate() {
        if tech == Technique::Spml {
            if !got.dirty.is_subset(&o.dirty) {
                return Err(format!("interval {i}: spml reported pages that were not dirtied"));
            }
            if got.missed != o.lost {
                return Err(format!(
                    "interval {i}: missed {} pages, oracle says {}",
                    got.missed.len(),
                    o.lost.len()
                ));
            }
            let union: BTreeSet<Gva> = got.dirty.union(&got.missed).copied().collect();
            if union != o.dirty {
                return Err(format!("interval {i}: found + missed differs from the dirty set"));
            }
        } else if got.dirty != o.dirty {
            let extra = got.dirty.difference(&o.dirty).count();
            let absent = o.dirty.difference(&got.dirty).count();
            return Err(format!("interval {i}: {extra} extra, {absent} absent pages"));
        }
    }
    Ok(())
}
