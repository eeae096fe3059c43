//! Transport a smooth initial cohort: density values, total mass and the
//! semigroup identity.
//!
//! ```bash
//! cargo run --example cohort_density
//! ```

use std::f64::consts::LN_2;

use multipop::cohort::{evaluate_density, total_population, verify_semigroup, GaussianBump, InitialCohort, QuadSpec};
use multipop::numerics::{Axis, Lattice};
use multipop::renewal::BirthFunction;
use multipop::{validate_model, DivisionRule, HazardSpec, ModelSpec, StateVector};

fn main() -> multipop::Result<()> {
    let model = validate_model(ModelSpec::doubling(1, 0.5, 2.0, LN_2, 0.2).with_division(DivisionRule::None, HazardSpec::None))?;
    let phi = InitialCohort::Gaussian(GaussianBump { mass: 1.0, mean: vec![0.5, 0.75, 0.5], sd: vec![0.1, 0.03, 0.1] });
    let birth = BirthFunction::zero_grid(&model, 1.0);

    for t in [0.0, 0.5, 1.0] {
        let mass = total_population(t, &phi, &birth, &model, &QuadSpec::default())?;
        // the bump's centre moves along its characteristic
        let centre = StateVector::new(0.75 * (LN_2 * t).exp(), vec![0.5 + t]);
        let peak = evaluate_density(t, 0.5 + t, &centre, &phi, &birth, &model)?;
        println!("t = {t:.1}: mass {mass:.6} (exp(-0.2 t) = {:.6}), density at centre {peak:.4}", (-0.2 * t).exp());
    }

    let (lo, hi) = phi.support_box(&model);
    let sample = Lattice::new(lo.iter().zip(&hi).map(|(&l, &h)| Axis::new(l, h + 0.5, 12)).collect());
    let r = verify_semigroup(&phi, 0.3, 0.2, &sample, &model)?;
    println!("S(0.2)S(0.3) vs S(0.5): max deviation {:.1e} over {} points", r.max_abs_deviation, r.points);
    for c in &r.continuity {
        println!("  |S(h)phi - phi|_1 at h = {}: {:.3e}", c.h, c.l1);
    }
    Ok(())
}
