//! Individual-based runs against the deterministic predictions.
//!
//! ```bash
//! cargo run --release --example monte_carlo
//! ```

use std::f64::consts::LN_2;

use multipop::mc::{estimate_growth_rate, pooled_census, simulate, simulate_with, stable_cohort, synchronized_cohort, McOptions};
use multipop::{validate_model, ModelSpec, StateVector};

fn main() -> multipop::Result<()> {
    let model = validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.1))?;
    let newborn = StateVector::new(1.0, vec![0.0, 0.0]);

    let founders = synchronized_cohort(&newborn, 1000);
    let trs = simulate(&model, &founders, &McOptions::at(vec![0.0, 0.5, 1.5, 2.5, 3.5], 3, 16))?;
    // divisions happen at t = 1, 2, 3, one per census window after the first
    for k in 2..=4 {
        let g = k - 1;
        let mean = trs.iter().map(|t| t.births[k] as f64).sum::<f64>() / trs.len() as f64;
        let expected = 1000.0 * (2.0 * (-0.1f64).exp()).powi(g as i32);
        println!("generation {g}: mean newborns {mean:.1}, renewal weight x 1000 = {expected:.1}");
    }

    let opts = McOptions::uniform(8.0, 0.25, 5, 8);
    let trs = simulate_with(&model, |r| stable_cohort(&model, &newborn, 2000, 5, r), &opts)?;
    let g = estimate_growth_rate(&trs, (3.0, 8.0))?;
    println!("growth rate {:.5} +/- {:.1e}, ln2 - mu_d = {:.5}", g.lambda_hat, g.stderr, LN_2 - 0.1);

    let (a, b) = (pooled_census(&trs, 4.0)?, pooled_census(&trs, 5.0)?);
    println!("census shape distance over one division age: {:.4} ({} vs {} cells)", a.shape_distance(&b), a.count, b.count);
    Ok(())
}
