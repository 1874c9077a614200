//! Share of written pages SPML loses to page relocation, by working set.
//!
//! cargo run --release --example missed_pages

use std::sync::Arc;

use oohsim::checkpoint::{missed_pages_experiment, MissedPagesConfig};
use oohsim::cost::Calibration;
use oohsim::size::ANCHOR_SIZES;
use oohsim::tracker::Technique;

fn main() {
    let cal = Arc::new(Calibration::default());
    let spml = missed_pages_experiment(&ANCHOR_SIZES, &MissedPagesConfig::default(), &cal);
    let epml_cfg = MissedPagesConfig {
        technique: Technique::Epml,
        ..Default::default()
    };
    let epml = missed_pages_experiment(&ANCHOR_SIZES, &epml_cfg, &cal);
    println!("{:>6} {:>9} {:>9}", "wss", "spml", "epml");
    for ((size, s), (_, e)) in spml.iter().zip(&epml) {
        println!("{:>6} {:>8.2}% {:>8.2}%", size.to_string(), s * 100.0, e * 100.0);
    }
}
