//! Newborn flux by successive approximation, for deterministic doubling
//! (atoms) and for a constant division hazard (lattice).
//!
//! ```bash
//! cargo run --release --example renewal_series
//! ```

use std::f64::consts::LN_2;

use multipop::cohort::{GaussianBump, InitialCohort};
use multipop::renewal::{series_bound_report, solve_series, BirthFunction, GridSpec, SeriesOptions};
use multipop::{validate_model, DivisionRule, HazardSpec, ModelSpec, StateVector};

fn main() -> multipop::Result<()> {
    let doubling = validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.1))?;
    let phi = InitialCohort::atom(0.0, StateVector::new(1.0, vec![0.0, 0.0]), 1.0);
    let sol = solve_series(&phi, &SeriesOptions::atomic(4.5), &doubling)?;
    if let BirthFunction::Atomic { atoms, .. } = &sol.birth {
        for a in atoms {
            println!("births at t = {:.3}: weight {:.6} at size {:.3}", a.birth_time, a.weight, a.birth_state.size);
        }
    }

    let hazard = validate_model(
        ModelSpec::doubling(1, 0.5, 2.0, 0.7, 0.05).with_division(DivisionRule::Hazard, HazardSpec::Constant { b0: 2.0 }),
    )?;
    let smooth = InitialCohort::Gaussian(GaussianBump { mass: 1.0, mean: vec![0.3, 0.9, 0.3], sd: vec![0.1, 0.08, 0.1] });
    let grid = GridSpec { dt: 0.02, size_nodes: 25, aux_nodes: 9, aux_max: 2.0 };
    let sol = solve_series(&smooth, &SeriesOptions::grid(3.0, grid), &hazard)?;
    println!(
        "lattice series: {} terms, converged {}, fixed-point residual {:.1e}",
        sol.report.term_norms.len(),
        sol.report.converged,
        sol.report.fixed_point_residual
    );
    for (n, norm) in sol.report.term_norms.iter().enumerate() {
        println!("  N = {n}: sup_t |K^N phi| = {norm:.3e}");
    }
    // the geometric bound is only claimed on a short window
    let bound = series_bound_report(&sol.report, &smooth, &hazard)?;
    println!("bound window [0, {:.3}]:", bound.window);
    for row in bound.rows.iter().filter(|r| r.norm > 0.0) {
        println!("  N = {}: {:.3e} <= {:.3e} ({})", row.n, row.norm, row.bound, if row.violated { "violated" } else { "ok" });
    }
    Ok(())
}
