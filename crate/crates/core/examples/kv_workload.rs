//! Zipf-skewed key-value workload under each tracker, with a checkpoint
//! every 20k requests.
//!
//! cargo run --release --example kv_workload

use std::sync::Arc;

use oohsim::checkpoint::Checkpointer;
use oohsim::cost::Calibration;
use oohsim::sim::machine::{run_single, Vm, VmConfig};
use oohsim::tracker::{Technique, TrackerConfig};
use oohsim::workload::KvWorkloadSpec;

fn main() {
    let cal = Arc::new(Calibration::default());
    for engine in ["stdtree", "cache"] {
        let spec = KvWorkloadSpec {
            checkpoint_every: 20_000,
            ..KvWorkloadSpec::engine(engine).expect("known engine")
        };
        let w = Arc::new(spec.build(cal.write_us, 11));
        println!("{engine}: {} footprint, {} writes", spec.footprint, w.writes());
        for t in Technique::ALL {
            let mut tc = TrackerConfig::new(t);
            tc.collection_interval_us = f64::INFINITY;
            let mut vm = Vm::new(0, VmConfig::new(spec.footprint), Some(tc), cal.clone(), w.clone())
                .with_exploit(Box::new(Checkpointer::new()));
            let r = run_single(&mut vm, f64::INFINITY);
            let per_ckpt: Vec<usize> = r.intervals.iter().map(|i| i.dirty.len()).collect();
            println!(
                "  {:<12} overhead {:>8.1}%  dirty per checkpoint {:?}",
                t.name(),
                r.overhead_tracked_pct(),
                per_ckpt
            );
        }
    }
}
