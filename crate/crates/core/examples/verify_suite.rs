//! The cross-module property suite behind `multipop verify`.
//!
//! ```bash
//! cargo run --release --example verify_suite
//! ```

use std::f64::consts::LN_2;

use multipop::verify::{run_verify, VerifyOptions};
use multipop::ModelSpec;

fn main() -> multipop::Result<()> {
    let report = run_verify(&ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0), &VerifyOptions::default())?;
    for c in &report.checks {
        println!("{} {:<20} {:.3e} (threshold {:.1e})", if c.passed { "ok  " } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    println!("all passed: {}", report.passed());
    Ok(())
}
