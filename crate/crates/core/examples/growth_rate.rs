//! Malthusian parameter: closed form, the generic root finder, and power
//! iteration on a lattice for a smooth division hazard.
//!
//! ```bash
//! cargo run --release --example growth_rate
//! ```

use std::f64::consts::LN_2;

use multipop::renewal::GridSpec;
use multipop::spectral::{dominant_eigenvalue, Discretization, EigenOptions};
use multipop::{validate_model, DivisionRule, HazardSpec, ModelSpec};

fn main() -> multipop::Result<()> {
    for mu_d in [0.0, 0.1] {
        let model = validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, mu_d))?;
        let closed = dominant_eigenvalue(&model, &EigenOptions::default())?;
        let generic = dominant_eigenvalue(&model, &EigenOptions { force_generic: true, ..Default::default() })?;
        println!(
            "mu_d = {mu_d}: lambda0 = {:.12} ({}), {:.12} ({}), ln2/a* = {:.6}, flagged {}",
            closed.lambda0,
            closed.method.as_str(),
            generic.lambda0,
            generic.method.as_str(),
            closed.undamped_lambda.unwrap_or(f64::NAN),
            closed.discrepancy_flag
        );
    }

    let hazard = validate_model(
        ModelSpec::doubling(1, 0.5, 2.0, 0.7, 0.05).with_division(DivisionRule::Hazard, HazardSpec::Constant { b0: 2.0 }),
    )?;
    for size_nodes in [13, 25, 49] {
        let opts = EigenOptions {
            tol: 1e-9,
            discretization: Discretization {
                grid: GridSpec { dt: 0.02, size_nodes, aux_nodes: 9, aux_max: 2.0 },
                age_max: None,
            },
            ..Default::default()
        };
        let r = dominant_eigenvalue(&hazard, &opts)?;
        println!("constant hazard, {size_nodes} size nodes: lambda0 = {:.6}, residual {:.1e}", r.lambda0, r.residual);
    }
    Ok(())
}
