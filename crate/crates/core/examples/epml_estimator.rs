//! Closed-form EPML estimate next to the event-driven simulation, for a few
//! scheduler settings. The estimate needs only the untracked run time and
//! the number of times Tracked was scheduled in or out.
//!
//! cargo run --release --example epml_estimator

use std::sync::Arc;

use oohsim::cost::{estimate_epml, Calibration};
use oohsim::guest::SchedulerConfig;
use oohsim::sim::machine::{run_single, Vm, VmConfig};
use oohsim::size::ByteSize;
use oohsim::tracker::{Technique, TrackerConfig};
use oohsim::workload::MicroBenchSpec;

fn main() {
    let cal = Arc::new(Calibration::default());
    println!(
        "{:>6} {:>5} {:>8} {:>7} {:>12} {:>12} {:>8}",
        "size", "comp", "quantum", "N", "estimate ms", "simulated ms", "error"
    );
    for (size, competitors, quantum_us) in [
        (ByteSize::mb(1), 2, 500.0),
        (ByteSize::mb(10), 1, 1_000.0),
        (ByteSize::mb(100), 2, 4_000.0),
        (ByteSize::mb(500), 3, 10_000.0),
        (ByteSize::gb(1), 1, 2_000.0),
    ] {
        let w = Arc::new(MicroBenchSpec::new(size).build(cal.write_us, 3));
        let mut cfg = VmConfig::new(size);
        cfg.sched = SchedulerConfig {
            quantum_us,
            competitors,
        };
        let vanilla = run_single(
            &mut Vm::new(0, cfg.clone(), None, cal.clone(), w.clone()),
            f64::INFINITY,
        );
        let tc = TrackerConfig::new(Technique::Epml);
        let epml = run_single(&mut Vm::new(0, cfg, Some(tc), cal.clone(), w), f64::INFINITY);
        let n = epml.ledger.counts.sched_events;
        let est = estimate_epml(vanilla.tracked_us, n, &cal.table, size);
        let err = (est.p_epml - epml.tracked_us).abs() / epml.tracked_us;
        println!(
            "{:>6} {:>5} {:>8} {:>7} {:>12.3} {:>12.3} {:>7.3}%",
            size.to_string(),
            competitors,
            quantum_us,
            n,
            est.p_epml / 1e3,
            epml.tracked_us / 1e3,
            100.0 * err
        );
    }
}
