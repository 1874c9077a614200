//! Overhead of the four trackers on the array-walking micro-benchmark.
//!
//! cargo run --release --example tracker_comparison

use std::sync::Arc;

use oohsim::cost::Calibration;
use oohsim::sim::machine::{run_single, Vm, VmConfig};
use oohsim::size::ANCHOR_SIZES;
use oohsim::tracker::{Technique, TrackerConfig};
use oohsim::workload::MicroBenchSpec;

fn main() {
    let cal = Arc::new(Calibration::default());
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12}",
        "size", "proc", "userfaultfd", "spml", "epml"
    );
    for size in ANCHOR_SIZES {
        let w = Arc::new(MicroBenchSpec::new(size).build(cal.write_us, 7));
        let mut row = format!("{:>6}", size.to_string());
        for t in Technique::ALL {
            let mut vm = Vm::new(
                0,
                VmConfig::new(size),
                Some(TrackerConfig::new(t)),
                cal.clone(),
                w.clone(),
            );
            let r = run_single(&mut vm, f64::INFINITY);
            row.push_str(&format!(" {:>11.1}%", r.overhead_tracked_pct()));
        }
        println!("{row}");
    }
}
