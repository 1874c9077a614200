//! Property tests over whole simulated runs.

mod common;

use std::sync::Arc;

use oohsim::cost::Calibration;
use oohsim::guest::SchedulerConfig;
use oohsim::sim::config::{run, ExperimentConfig, WorkloadConfig};
use oohsim::sim::machine::{Vm, VmConfig, TRACKED_PID};
use oohsim::sim::queue::EventQueue;
use oohsim::sim::report::{from_csv, plot_series, rows, to_csv, to_json, ReportRow};
use oohsim::size::ByteSize;
use oohsim::tracker::{Technique, TrackerConfig};
use proptest::prelude::*;

fn technique() -> impl Strategy<Value = Technique> {
    prop::sample::select(Technique::ALL.to_vec())
}

/// Runs to completion and hands back the machine for inspection.
fn run_vm(t: &common::Trace, tc: TrackerConfig, cfg: VmConfig) -> Vm {
    let mut vm = Vm::new(
        0,
        cfg,
        Some(tc),
        Arc::new(Calibration::default()),
        Arc::new(t.workload.clone()),
    );
    let mut q = EventQueue::new();
    vm.start(&mut q, f64::INFINITY);
    while let Some(ev) = q.pop() {
        vm.handle(ev, &mut q);
        if vm.finished() {
            break;
        }
    }
    assert!(vm.finished());
    vm
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ledger_accounts_for_all_non_compute_time(
        seed in any::<u64>(),
        tech in technique(),
        competitors in 0u32..3,
        quantum_us in 200.0f64..5_000.0,
    ) {
        let t = common::fuzz_trace(seed, 1024, true);
        let mut cfg = VmConfig::new(ByteSize::from_pages(t.pages));
        cfg.sched = SchedulerConfig { quantum_us, competitors };
        let vm = run_vm(&t, TrackerConfig::new(tech), cfg);
        let by_metric: f64 = vm.ledger.entries().map(|(_, v)| v).sum();
        let elapsed = vm.now() - vm.compute_us();
        let events = vm.ledger.counts.sched_events + vm.ledger.counts.faults + vm.ledger.counts.vmexits + 1;
        prop_assert!((by_metric - elapsed).abs() <= 1.0 * (events as f64 / 1e6).max(1e-3),
            "ledger {} vs elapsed {}", by_metric, elapsed);
        let r = vm.report();
        let collect: f64 = r.intervals.iter().map(|i| i.collect_us).sum();
        prop_assert!((collect - r.collect_time).abs() < 1e-6 * r.collect_time.max(1.0));
    }

    #[test]
    fn n_matches_the_scheduler(
        seed in any::<u64>(),
        tech in technique(),
        competitors in 0u32..4,
        quantum_us in 100.0f64..3_000.0,
    ) {
        let t = common::fuzz_trace(seed, 512, false);
        let mut cfg = VmConfig::new(ByteSize::from_pages(t.pages));
        cfg.sched = SchedulerConfig { quantum_us, competitors };
        let vm = run_vm(&t, TrackerConfig::new(tech), cfg);
        prop_assert_eq!(
            vm.ledger.counts.sched_events,
            vm.kernel.processes[&TRACKED_PID].tracked_switches
        );
    }

    #[test]
    fn epml_loses_nothing_with_a_small_ring(
        seed in any::<u64>(),
        ring_capacity in 8usize..2_048,
        interval_us in prop_oneof![Just(f64::INFINITY), 100.0f64..5_000.0],
    ) {
        let t = common::fuzz_trace(seed, 2048, false);
        let mut cfg = VmConfig::new(ByteSize::from_pages(t.pages));
        cfg.ring_capacity = ring_capacity;
        let mut tc = TrackerConfig::new(Technique::Epml);
        tc.collection_interval_us = interval_us;
        let vm = run_vm(&t, tc, cfg);
        let r = vm.report();
        prop_assert_eq!(r.ledger.counts.dropped, 0);
        prop_assert!(vm.kernel.uio.ring.is_empty());
        common::check_against_oracle(&t, Technique::Epml, &r).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn report_formats_carry_the_same_values() {
    let cfg = ExperimentConfig {
        seed: 5,
        memory_sizes: vec![ByteSize::mb(1), ByteSize::mb(7)],
        techniques: Technique::ALL.to_vec(),
        workload: WorkloadConfig::Microbench {
            rounds: 2,
            churn_rate: 10_000.0,
            checkpoint_each_round: true,
        },
        checkpoint: true,
        ..Default::default()
    };
    let report = run(&cfg, &Calibration::default()).unwrap();
    let rows = rows(&report);
    assert_eq!(rows.len(), 8);

    assert_eq!(from_csv(&to_csv(&rows)).unwrap(), rows);

    let json: serde_json::Value = serde_json::from_str(&to_json(&report)).unwrap();
    let from_json: Vec<ReportRow> = serde_json::from_value(json["rows"].clone()).unwrap();
    assert_eq!(from_json, rows);

    let text = oohsim::sim::report::to_plotdata(&rows);
    let mut parsed = std::collections::BTreeMap::new();
    let mut key = None;
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("# ") {
            let (m, t) = h.split_once(' ').unwrap();
            key = Some((m.to_string(), t.to_string()));
        } else if let Some((x, y)) = line.split_once(' ') {
            parsed
                .entry(key.clone().unwrap())
                .or_insert_with(Vec::new)
                .push((x.parse::<f64>().unwrap(), y.parse::<f64>().unwrap()));
        }
    }
    assert_eq!(parsed, plot_series(&rows));

    // Overhead columns follow from the time columns.
    for r in &rows {
        let o = 100.0 * (r.tracked_us - r.ideal_us) / r.ideal_us;
        assert!((o - r.overhead_tracked_pct).abs() < 1e-9 * o.abs().max(1.0));
    }
}
