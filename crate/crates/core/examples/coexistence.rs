//! Live migration of one VM while another tracks its memory with PML.
//!
//! cargo run --release --example coexistence

use std::sync::Arc;

use oohsim::cost::Calibration;
use oohsim::migration::{coexistence_experiment, run_migration, MigrationJob, PeerSpec};
use oohsim::tracker::Technique;

fn main() {
    let cal = Arc::new(Calibration::default());
    let job = MigrationJob::default();
    let r = coexistence_experiment(&job, &PeerSpec::default(), &cal, 12);
    println!(
        "alone: {:.1} ms in {} rounds, {} vmexits",
        r.alone.total_time_us / 1e3,
        r.alone.rounds,
        r.alone.vmexits
    );
    println!(
        "next to spml: {:.1} ms in {} rounds, {} vmexits (+{:.1}%)",
        r.concurrent.total_time_us / 1e3,
        r.concurrent.rounds,
        r.concurrent.vmexits,
        r.inflation_pct
    );
    let epml_peer = PeerSpec {
        technique: Technique::Epml,
        ..Default::default()
    };
    let e = run_migration(&job, Some(&epml_peer), &cal);
    println!("next to epml: {:.1} ms", e.total_time_us / 1e3);
    println!(
        "coordination check: {} states, {} violations",
        r.model_check_states,
        r.model_check_violations.len()
    );
}
