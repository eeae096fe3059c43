//! Survival `Π` and volume factor `J` along characteristics, plus a
//! finite-difference flow-map determinant used as an independent check on `J`.

use crate::characteristics::{self, advance, division_age_for, ode_error, TAU_FLOW};
use crate::error::{Error, Result};
use crate::model::{HazardSpec, StateVector, ValidatedModel};
use crate::numerics::ode::{self, OdeOptions, OdeStop};
use crate::numerics::root::determinant;
use crate::velocity;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticFactors {
    pub survival: f64,
    pub jacobian: f64,
    pub quad_error: f64,
}

/// `Σ ∂v_i/∂x_i` at `(age, x)`.
pub fn divergence(age: f64, x: &[f64], model: &ValidatedModel) -> f64 {
    match model.closed_flow() {
        Some(cf) => cf.divergence(),
        None => velocity::divergence(model.velocity(), age, x),
    }
}

/// Probability of neither dying nor dividing over the `θ` preceding `(a, x̄)`.
pub fn survival(theta: f64, age: f64, x: &StateVector, model: &ValidatedModel) -> Result<f64> {
    Ok(kinetic_factors(theta, age, x, model)?.survival)
}

/// Volume factor `exp[−∫ div v]` over the `θ` preceding `(a, x̄)`.
pub fn jacobian(theta: f64, age: f64, x: &StateVector, model: &ValidatedModel) -> Result<f64> {
    Ok(kinetic_factors(theta, age, x, model)?.jacobian)
}

pub fn kinetic_factors(theta: f64, age: f64, x: &StateVector, model: &ValidatedModel) -> Result<KineticFactors> {
    if !(theta >= 0.0) {
        return Err(Error::OutOfRange { what: "theta", value: theta });
    }
    model.check_state(x)?;
    let coords = x.coords();
    let (log_j, err) = log_jacobian(theta, age, &coords, model)?;
    let survival = survival_coords(theta, age, &coords, model)?;
    Ok(KineticFactors { survival, jacobian: log_j.exp(), quad_error: err })
}

/// Returns `−∫ div v` over the backward path and the integrator error.
pub(crate) fn log_jacobian(theta: f64, age: f64, x: &[f64], model: &ValidatedModel) -> Result<(f64, f64)> {
    if theta == 0.0 {
        return Ok((0.0, 0.0));
    }
    if let Some(cf) = model.closed_flow() {
        advance(model, -theta, age, x, &OdeOptions::with_rtol(TAU_FLOW), true)?;
        return Ok((-cf.divergence() * theta, 0.0));
    }
    let n = x.len();
    let mut y0 = x.to_vec();
    y0.push(0.0);
    let field = model.velocity();
    let opts = OdeOptions::with_rtol(TAU_FLOW);
    let lo = model.x_min() * (1.0 - 1e-12);
    let outcome = ode::integrate(
        |s, y, dy| {
            field.eval(age + s, &y[..n], &mut dy[..n]);
            dy[n] = velocity::divergence(field, age + s, &y[..n]);
        },
        0.0,
        &y0,
        -theta,
        &opts,
        |_, y| {
            if y[0] < lo {
                Some(0)
            } else {
                (1..n).find(|&i| y[i] < -1e-12)
            }
        },
    )
    .map_err(ode_error)?;
    if let OdeStop::Event { code, t } = outcome.stop {
        return Err(Error::LeftDomain { component: code, theta: t });
    }
    // y[n] = ∫_0^{−θ} div ds = −∫_{−θ}^0 div ds
    Ok((outcome.y[n], outcome.err_estimate))
}

fn survival_coords(theta: f64, age: f64, x: &[f64], model: &ValidatedModel) -> Result<f64> {
    let death = (-model.mu_d() * theta).exp();
    match model.hazard() {
        HazardSpec::None => Ok(death),
        HazardSpec::Dirac { .. } => {
            let a_star = match model.division_age() {
                Some(a) => a,
                None => {
                    let birth = advance(model, -age, age, x, &OdeOptions::with_rtol(TAU_FLOW), false)?;
                    division_age_for(model, &birth.coords)?
                }
            };
            // the division event removes the cell when it falls inside (a − θ, a]
            Ok(if age - theta < a_star && a_star <= age { 0.0 } else { death })
        }
        HazardSpec::Constant { .. } | HazardSpec::Table { .. } => {
            let tau = time_in_reproductive(theta, age, x, model)?;
            let h = model.hazard_integral(age - tau, age)?;
            Ok(death * (-h).exp())
        }
    }
}

/// Length of the final stretch of the backward path (capped at `θ`) spent in
/// the reproductive region.
fn time_in_reproductive(theta: f64, age: f64, x: &[f64], model: &ValidatedModel) -> Result<f64> {
    let half = 0.5 * model.x_max();
    if x[0] <= half || theta == 0.0 {
        return Ok(0.0);
    }
    if let Some(cf) = model.closed_flow() {
        return Ok(cf.time_between_sizes(half, x[0]).min(theta));
    }
    let field = model.velocity();
    let outcome = ode::integrate(
        |s, y, dy| field.eval(age + s, y, dy),
        0.0,
        x,
        -theta,
        &OdeOptions::with_rtol(TAU_FLOW),
        |_, y| (y[0] <= half).then_some(0),
    )
    .map_err(ode_error)?;
    Ok(match outcome.stop {
        OdeStop::Event { t, .. } => -t,
        OdeStop::Completed => theta,
    })
}

/// Determinant of the backward flow map `x̄ ↦ X̄(−θ, x̄)` by central differences.
///
/// The map is evaluated as an ODE solution on all of `ℝ^{1+m}`; only the size
/// perturbation has to stay inside `[x_m, x_M]`.
pub fn jacobian_fd(theta: f64, age: f64, x: &StateVector, model: &ValidatedModel, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::OutOfRange { what: "h", value: h });
    }
    if x.size - h < model.x_min() || x.size + h > model.x_max() {
        return Err(Error::PerturbationLeavesDomain);
    }
    if theta == 0.0 {
        return Ok(1.0);
    }
    let n = x.dim();
    let opts = OdeOptions { rtol: 1e-13, atol: 1e-15, ..OdeOptions::default() };
    let base = x.coords();
    let mut m = vec![0.0; n * n];
    let mut p = base.clone();
    for j in 0..n {
        p[j] = base[j] + h;
        let plus = backward_map(model, theta, age, &p, &opts)?;
        p[j] = base[j] - h;
        let minus = backward_map(model, theta, age, &p, &opts)?;
        p[j] = base[j];
        for i in 0..n {
            m[i * n + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(determinant(m, n))
}

fn backward_map(model: &ValidatedModel, theta: f64, age: f64, x: &[f64], opts: &OdeOptions) -> Result<Vec<f64>> {
    if let Some(cf) = model.closed_flow() {
        let mut out = vec![0.0; x.len()];
        cf.advance(-theta, x, &mut out);
        return Ok(out);
    }
    let field = model.velocity();
    let outcome = ode::integrate(|s, y, dy| field.eval(age + s, y, dy), 0.0, x, -theta, opts, |_, _| None)
        .map_err(ode_error)?;
    Ok(outcome.y)
}

/// Convenience: `(Π, J)` evaluated at the state reached by flowing `θ` back.
pub fn factors_and_origin(
    theta: f64,
    age: f64,
    x: &StateVector,
    model: &ValidatedModel,
) -> Result<(KineticFactors, StateVector)> {
    let f = kinetic_factors(theta, age, x, model)?;
    let origin = characteristics::flow(-theta, age, x, model)?;
    Ok((f, origin.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::tests::{coupled, reference, reference_numeric};
    use crate::model::{validate_model, DivisionRule, ModelSpec};
    use crate::numerics::quad;
    use crate::velocity::AuxVelocity;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn s(size: f64, a: f64, b: f64) -> StateVector {
        StateVector::new(size, vec![a, b])
    }

    fn with_hazard(division: DivisionRule, hazard: HazardSpec, mu_d: f64) -> ValidatedModel {
        validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, mu_d).with_division(division, hazard)).unwrap()
    }

    #[test]
    fn factors_are_one_at_zero() {
        for m in [reference(), reference_numeric(), coupled()] {
            let f = kinetic_factors(0.0, 0.7, &s(1.2, 0.7, 0.7), &m).unwrap();
            assert_eq!((f.survival, f.jacobian), (1.0, 1.0));
        }
    }

    #[test]
    fn survival_without_loss_is_one() {
        let m = with_hazard(DivisionRule::None, HazardSpec::None, 0.0);
        assert_eq!(survival(1.3, 1.5, &s(1.5, 1.5, 1.5), &m).unwrap(), 1.0);
    }

    #[test]
    fn dirac_survival_steps_at_division_age() {
        let m = reference();
        assert_eq!(survival(0.9, 0.9, &s(1.8, 0.9, 0.9), &m).unwrap(), 1.0);
        assert_eq!(survival(1.0, 1.0, &s(2.0, 1.0, 1.0), &m).unwrap(), 0.0);
    }

    #[test]
    fn constant_death_survival_matches_quadrature() {
        let m = with_hazard(DivisionRule::None, HazardSpec::None, 0.1);
        let oracle = (-quad::integrate(|_| 0.1, 0.0, 1.0, 0.0, 1e-12).value).exp();
        let got = survival(1.0, 1.0, &s(1.0, 1.0, 1.0), &m).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.904837418).abs() < 1e-9);
    }

    #[test]
    fn smooth_hazard_acts_only_in_reproductive_region() {
        let m = with_hazard(DivisionRule::Hazard, HazardSpec::Constant { b0: 2.0 }, 0.0);
        // size 2 reached from size 1 in one time unit; half that time above x_M/2 = 1
        let x = s(2.0, 1.5, 1.5);
        let got = survival(1.5, 1.5, &x, &m).unwrap();
        assert!((got - (-2.0f64).exp()).abs() < 1e-12);
        let numeric = {
            let spec = m.spec().clone();
            let field = crate::velocity::DescribedVelocity {
                alpha: LN_2,
                size: crate::velocity::SizeVelocity::Exponential,
                aux: vec![AuxVelocity::Unit; 2],
            };
            ValidatedModel::with_velocity(spec, std::sync::Arc::new(crate::characteristics::tests::Opaque(field)))
                .unwrap()
        };
        let got_numeric = survival(1.5, 1.5, &x, &numeric).unwrap();
        assert!((got - got_numeric).abs() < 1e-9);
    }

    #[test]
    fn jacobian_closed_form_values() {
        let m = reference();
        let x = s(2.0, 2.0, 2.0);
        assert_eq!(jacobian(0.0, 2.0, &x, &m).unwrap(), 1.0);
        assert!((jacobian(1.0, 2.0, &x, &m).unwrap() - 0.5).abs() < 1e-15);
        assert!((jacobian(2.0, 2.0, &x, &m).unwrap() - 0.25).abs() < 1e-15);
        let oracle = (-quad::integrate(|_| LN_2, 0.0, 2.0, 0.0, 1e-13).value).exp();
        assert!((jacobian(2.0, 2.0, &x, &reference_numeric()).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_determinant_examples() {
        let m = reference();
        let fd = jacobian_fd(1.0, 0.0, &s(1.0, 0.0, 0.0), &m, 1e-4).unwrap();
        assert!((fd - 0.5).abs() < 1e-6);
        assert_eq!(jacobian_fd(0.0, 0.0, &s(1.0, 0.0, 0.0), &m, 1e-4).unwrap(), 1.0);
        assert_eq!(
            jacobian_fd(1.0, 0.0, &s(0.50001, 0.0, 0.0), &m, 1e-4),
            Err(Error::PerturbationLeavesDomain)
        );
    }

    #[test]
    fn divergence_free_field_preserves_volume() {
        let spec = ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0)
            .with_size_velocity(crate::velocity::SizeVelocity::Linear { rate: 0.3 })
            .with_aux_velocities(vec![AuxVelocity::Constant { rate: 2.0 }, AuxVelocity::Unit])
            .with_division(DivisionRule::None, HazardSpec::None);
        let m = validate_model(spec).unwrap();
        for theta in [0.3, 1.0, 2.0] {
            let x = s(1.5, 5.0, 5.0);
            assert!((jacobian_fd(theta, 3.0, &x, &m, 1e-4).unwrap() - 1.0).abs() < 1e-9);
            assert_eq!(jacobian(theta, 3.0, &x, &m).unwrap(), 1.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn liouville_on_coupled_field(size in 1.0f64..1.9, a in 1.0f64..3.0, b in 1.0f64..3.0, theta in 0.0f64..0.8) {
            let m = coupled();
            let x = s(size, a, b);
            let j = jacobian(theta, 2.0, &x, &m).unwrap();
            let fd = jacobian_fd(theta, 2.0, &x, &m, 1e-4).unwrap();
            prop_assert!(((j - fd) / j).abs() < 1e-6, "j = {j}, fd = {fd}");
        }

        #[test]
        fn factors_are_multiplicative(size in 1.2f64..1.9, t in 0.0f64..0.4, u in 0.0f64..0.4) {
            let m = coupled();
            let x = s(size, 2.0, 2.0);
            let whole = jacobian(t + u, 2.0, &x, &m).unwrap();
            let recent = jacobian(u, 2.0, &x, &m).unwrap();
            let mid = characteristics::flow(-u, 2.0, &x, &m).unwrap();
            let earlier = jacobian(t, mid.age, &mid.state, &m).unwrap();
            prop_assert!((whole - recent * earlier).abs() < 1e-9);

            let h = with_hazard(DivisionRule::Hazard, HazardSpec::Constant { b0: 1.3 }, 0.2);
            let p_whole = survival(t + u, 2.0, &x, &h).unwrap();
            let mid = characteristics::flow(-u, 2.0, &x, &h).unwrap();
            let p_split = survival(u, 2.0, &x, &h).unwrap() * survival(t, mid.age, &mid.state, &h).unwrap();
            prop_assert!((p_whole - p_split).abs() < 1e-9);
        }
    }
}
