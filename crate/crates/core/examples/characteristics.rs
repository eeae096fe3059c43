//! Follow a cell along its characteristic and read off the kinetic factors.
//!
//! ```bash
//! cargo run --example characteristics
//! ```

use std::f64::consts::LN_2;

use multipop::characteristics::flow;
use multipop::kinetics::{jacobian_fd, kinetic_factors};
use multipop::verify::coupled_model;
use multipop::{validate_model, ModelSpec, StateVector};

fn main() -> multipop::Result<()> {
    let model = validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.1))?;
    let newborn = StateVector::new(1.0, vec![0.0, 0.0]);

    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "theta", "size", "aux_1", "survival", "jacobian");
    for k in 0..=4 {
        let theta = 0.25 * k as f64;
        let p = flow(theta, 0.0, &newborn, &model)?;
        let f = kinetic_factors(theta, p.age, &p.state, &model)?;
        println!("{theta:>6.2} {:>10.6} {:>10.6} {:>10.6} {:>10.6}", p.state.size, p.state.aux[0], f.survival, f.jacobian);
    }

    // no closed form here: the flow is integrated and J carried along
    let coupled = coupled_model();
    let x = StateVector::new(1.2, vec![0.8, 1.1]);
    let j = kinetic_factors(0.6, 1.0, &x, &coupled)?.jacobian;
    let fd = jacobian_fd(0.6, 1.0, &x, &coupled, 1e-4)?;
    println!("coupled model: J = {j:.10}, finite differences {fd:.10}, relative gap {:.1e}", ((j - fd) / j).abs());
    Ok(())
}
