//! Plug in a velocity field of your own. Without a closed form the flow,
//! Jacobian and division ages all come from the ODE integrator.
//!
//! ```bash
//! cargo run --example custom_velocity
//! ```

use std::sync::Arc;

use multipop::characteristics::{division_age_for, flow};
use multipop::kinetics::{jacobian, jacobian_fd};
use multipop::model::ValidatedModel;
use multipop::velocity::VelocityField;
use multipop::{ModelSpec, StateVector};

/// Growth slows as the cell ages; one auxiliary clock relaxes towards size.
#[derive(Debug)]
struct Slowing;

impl VelocityField for Slowing {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, age: f64, x: &[f64], out: &mut [f64]) {
        out[0] = 0.8 * x[0] / (1.0 + 0.5 * age);
        out[1] = x[0] - 0.5 * x[1];
    }
}

fn main() -> multipop::Result<()> {
    let model = ValidatedModel::with_velocity(ModelSpec::doubling(1, 0.5, 2.0, 0.8, 0.0), Arc::new(Slowing))?;
    let newborn = StateVector::new(0.8, vec![0.0]);
    let a_star = division_age_for(&model, &newborn.coords())?;
    let p = flow(a_star, 0.0, &newborn, &model)?;
    println!("divides at age {a_star:.6} with size {:.6} after {} steps", p.state.size, p.steps);

    let x = flow(0.5, 0.0, &newborn, &model)?.state;
    let j = jacobian(0.5, 0.5, &x, &model)?;
    let fd = jacobian_fd(0.5, 0.5, &x, &model, 1e-4)?;
    println!("J over the first half unit of age: {j:.10} (finite differences {fd:.10})");
    Ok(())
}
