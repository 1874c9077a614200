//! Cost table lookups and a calibration override.
//!
//! cargo run --example calibration

use oohsim::cost::{Calibration, Metric};
use oohsim::size::ByteSize;

fn main() {
    let cal = Calibration::default();
    for size in [ByteSize::mb(500), ByteSize::mb(750), ByteSize::gb(1), ByteSize::gb(2)] {
        println!("M17 at {size}: {:.1} ms", cal.table.us(Metric::M17, size) / 1e3);
    }
    println!("M8 (fixed): {} us", cal.table.us(Metric::M8, ByteSize::gb(1)));

    // Overrides are layered on the defaults; a sized metric gets a new curve.
    let text = "vmexit_us = 150\nM17@1GB = 5000\nM17@100MB = 400\n";
    let tuned = Calibration::parse(text).expect("valid calibration");
    println!(
        "override: vmexit {} us, M17 at 500MB {:.1} ms",
        tuned.vmexit_us,
        tuned.table.us(Metric::M17, ByteSize::mb(500)) / 1e3
    );
    assert_eq!(Calibration::parse(&tuned.to_text()).unwrap(), tuned);

    match Calibration::parse("M99 = 1\n") {
        Ok(_) => unreachable!(),
        Err(e) => println!("rejected: {e}"),
    }
}
