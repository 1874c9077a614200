//! Incremental checkpoints driven by each tracker, then a restore check.
//!
//! cargo run --release --example incremental_checkpoint

use std::sync::Arc;

use oohsim::checkpoint::{restore_verify, Checkpointer};
use oohsim::cost::Calibration;
use oohsim::sim::machine::{run_single, Vm, VmConfig};
use oohsim::size::{ByteSize, ANCHOR_SIZES};
use oohsim::tracker::{Technique, TrackerConfig};
use oohsim::workload::MicroBenchSpec;

fn checkpoint_ms(t: Technique, size: ByteSize, cal: &Arc<Calibration>) -> f64 {
    let spec = MicroBenchSpec {
        memory: size,
        rounds: 1,
        checkpoint_each_round: true,
        ..Default::default()
    };
    let w = Arc::new(spec.build(cal.write_us, 1));
    let mut vm = Vm::new(0, VmConfig::new(size), Some(TrackerConfig::new(t)), cal.clone(), w)
        .with_exploit(Box::new(Checkpointer::new()));
    run_single(&mut vm, f64::INFINITY).last_checkpoint_ms()
}

fn main() {
    let cal = Arc::new(Calibration::default());
    println!("checkpoint time after one round of writes (ms)");
    println!("{:>6} {:>10} {:>10} {:>10}", "size", "proc", "spml", "epml");
    for size in ANCHOR_SIZES {
        let [p, s, e] = [Technique::Proc, Technique::Spml, Technique::Epml].map(|t| checkpoint_ms(t, size, &cal));
        println!("{:>6} {p:>10.1} {s:>10.1} {e:>10.1}", size.to_string());
    }

    // Small run with payloads: the restored chain must match memory.
    let size = ByteSize::mb(2);
    let spec = MicroBenchSpec {
        memory: size,
        rounds: 3,
        checkpoint_each_round: true,
        ..Default::default()
    };
    let mut cfg = VmConfig::new(size);
    cfg.payloads = true;
    let w = Arc::new(spec.build(cal.write_us, 1));
    let mut vm = Vm::new(0, cfg, Some(TrackerConfig::new(Technique::Epml)), cal.clone(), w)
        .with_exploit(Box::new(Checkpointer::with_oracle()));
    run_single(&mut vm, f64::INFINITY);
    let ex = vm.take_exploit().expect("checkpointer attached");
    let ck = ex.as_any().downcast_ref::<Checkpointer>().expect("is a checkpointer");
    let verdict = restore_verify(&ck.images, ck.last_oracle().expect("oracle kept")).expect("valid chain");
    println!("epml chain of {} images: {verdict:?}", ck.images.len());
}
