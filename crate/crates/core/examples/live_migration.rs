//! Pre-copy migration driven by the PML dirty log, at a few dirtying rates.
//!
//! cargo run --release --example live_migration

use std::sync::Arc;

use oohsim::cost::Calibration;
use oohsim::migration::{run_migration, MigrationJob};

fn main() {
    let cal = Arc::new(Calibration::default());
    println!(
        "{:>10} {:>7} {:>10} {:>10} {:>9}",
        "writes/s", "rounds", "pages", "time ms", "converged"
    );
    for rate in [0.0, 5_000.0, 20_000.0, 60_000.0, 120_000.0] {
        let job = MigrationJob {
            dirty_rate: rate,
            ..Default::default()
        };
        let r = run_migration(&job, None, &cal);
        println!(
            "{:>10} {:>7} {:>10} {:>10.1} {:>9}",
            rate,
            r.rounds,
            r.pages_sent,
            r.total_time_us / 1e3,
            r.converged
        );
    }
}
