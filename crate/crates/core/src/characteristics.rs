//! Characteristic curves: forward/backward state propagation, growth time
//! `G`, auxiliary times `F_i` and their inverses.

use crate::error::{Error, Result};
use crate::model::{StateVector, ValidatedModel};
use crate::numerics::ode::{self, OdeError, OdeOptions, OdeStop};
use crate::numerics::{quad, root};

pub const TAU_FLOW: f64 = 1e-10;
pub const TAU_QUAD: f64 = 1e-10;

/// Relative slack on the domain bounds before a trajectory counts as exited.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub age: f64,
    pub state: StateVector,
    pub steps: usize,
    pub est_error: f64,
}

/// `(a + θ, X̄(θ, x̄))`.
pub fn flow(theta: f64, age: f64, x: &StateVector, model: &ValidatedModel) -> Result<FlowResult> {
    flow_with(theta, age, x, model, &OdeOptions::with_rtol(TAU_FLOW))
}

pub fn flow_with(
    theta: f64,
    age: f64,
    x: &StateVector,
    model: &ValidatedModel,
    opts: &OdeOptions,
) -> Result<FlowResult> {
    model.check_state(x)?;
    let path = advance(model, theta, age, &x.coords(), opts, true)?;
    Ok(FlowResult {
        age: age + theta,
        state: StateVector::from_coords(&path.coords),
        steps: path.steps,
        est_error: path.err,
    })
}

pub(crate) struct Path {
    pub coords: Vec<f64>,
    pub steps: usize,
    pub err: f64,
}

/// Component that has left `[x_m, x_M] × [0, ∞)^m`, if any.
fn outside(model: &ValidatedModel, y: &[f64]) -> Option<usize> {
    let lo = model.x_min() * (1.0 - DOMAIN_SLACK);
    let hi = model.x_max() * (1.0 + DOMAIN_SLACK);
    if y[0] < lo || y[0] > hi {
        return Some(0);
    }
    (1..y.len()).find(|&i| y[i] < -DOMAIN_SLACK)
}

fn snap_into_domain(model: &ValidatedModel, y: &mut [f64]) {
    y[0] = y[0].clamp(model.x_min(), model.x_max());
    for v in &mut y[1..] {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Propagates raw coordinates; `checked` enforces the domain.
pub(crate) fn advance(
    model: &ValidatedModel,
    theta: f64,
    age: f64,
    x: &[f64],
    opts: &OdeOptions,
    checked: bool,
) -> Result<Path> {
    if theta == 0.0 {
        return Ok(Path { coords: x.to_vec(), steps: 0, err: 0.0 });
    }
    if let Some(cf) = model.closed_flow() {
        let mut out = vec![0.0; x.len()];
        cf.advance(theta, x, &mut out);
        if checked {
            if let Some(component) = outside(model, &out) {
                let theta_exit = if component == 0 {
                    let bound = if theta < 0.0 { model.x_min() } else { model.x_max() };
                    cf.time_between_sizes(x[0], bound)
                } else {
                    -x[component] / cf.aux_rates[component - 1]
                };
                return Err(Error::LeftDomain { component, theta: theta_exit });
            }
            snap_into_domain(model, &mut out);
        }
        return Ok(Path { coords: out, steps: 0, err: 0.0 });
    }
    let field = model.velocity();
    let rhs = |s: f64, y: &[f64], dy: &mut [f64]| field.eval(age + s, y, dy);
    let outcome = if checked {
        ode::integrate(rhs, 0.0, x, theta, opts, |_, y| outside(model, y))
    } else {
        ode::integrate(rhs, 0.0, x, theta, opts, |_, _| None)
    }
    .map_err(ode_error)?;
    if let OdeStop::Event { code, t } = outcome.stop {
        return Err(Error::LeftDomain { component: code, theta: t });
    }
    let mut coords = outcome.y;
    if checked {
        snap_into_domain(model, &mut coords);
    }
    Ok(Path { coords, steps: outcome.steps, err: outcome.err_estimate })
}

pub(crate) fn ode_error(_: OdeError) -> Error {
    Error::ToleranceNotMet
}

/// Time for a trajectory starting at `(0, x)` to reach size `target`.
pub fn time_to_size(model: &ValidatedModel, x: &[f64], target: f64) -> Result<f64> {
    time_to_size_from(model, 0.0, x, target)
}

/// Time for a trajectory starting at `(age, x)` to reach size `target`.
pub fn time_to_size_from(model: &ValidatedModel, age: f64, x: &[f64], target: f64) -> Result<f64> {
    if target <= x[0] {
        return Ok(0.0);
    }
    if let Some(cf) = model.closed_flow() {
        return Ok(cf.time_between_sizes(x[0], target));
    }
    let field = model.velocity();
    let horizon = 1e6;
    let outcome = ode::integrate(
        |s, y, dy| field.eval(age + s, y, dy),
        0.0,
        x,
        horizon,
        &OdeOptions::with_rtol(TAU_FLOW),
        |_, y| (y[0] >= target).then_some(0),
    )
    .map_err(ode_error)?;
    match outcome.stop {
        OdeStop::Event { t, .. } => Ok(t),
        OdeStop::Completed => Err(Error::ExceedsMaxSize),
    }
}

/// Division age of a cell whose state at birth was `birth`.
pub fn division_age_for(model: &ValidatedModel, birth: &[f64]) -> Result<f64> {
    if let Some(a) = model.division_age() {
        return Ok(a);
    }
    let target = model
        .division_size(birth[0])
        .ok_or_else(|| Error::Unsupported("division age is defined only for size-triggered rules".into()))?;
    time_to_size(model, birth, target)
}

/// Frozen `(age, aux)` context for `G` and `F_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowContext {
    pub age: f64,
    pub state: StateVector,
}

impl FlowContext {
    pub fn new(age: f64, state: StateVector) -> Self {
        Self { age, state }
    }
}

fn component_velocity(model: &ValidatedModel, i: usize, value: f64, ctx: &FlowContext) -> f64 {
    let mut probe = ctx.state.coords();
    probe[i] = value;
    let mut v = vec![0.0; probe.len()];
    model.velocity().eval(ctx.age, &probe, &mut v);
    v[i]
}

/// `G(x) = ∫_{x_m}^{x} dξ / v₁(a, ξ, 𝐱)`.
pub fn growth_time(x: f64, age: f64, aux: &[f64], model: &ValidatedModel) -> Result<f64> {
    if !(x >= model.x_min() && x <= model.x_max()) {
        return Err(Error::OutOfRange { what: "size", value: x });
    }
    if let Some(cf) = model.closed_flow() {
        return Ok(cf.time_between_sizes(model.x_min(), x));
    }
    let ctx = FlowContext::new(age, StateVector::new(x, aux.to_vec()));
    time_integral(model, 0, model.x_min(), x, &ctx)
}

fn time_integral(model: &ValidatedModel, i: usize, lo: f64, hi: f64, ctx: &FlowContext) -> Result<f64> {
    let q = quad::integrate(|s| 1.0 / component_velocity(model, i, s, ctx), lo, hi, 0.0, TAU_QUAD);
    if q.error > 10.0 * TAU_QUAD * q.value.abs().max(1.0) {
        return Err(Error::ToleranceNotMet);
    }
    Ok(q.value)
}

/// `G⁻¹(θ + G(x₁))`.
pub fn growth_curve(theta: f64, x1: f64, age: f64, aux: &[f64], model: &ValidatedModel) -> Result<f64> {
    let g_max = growth_time(model.x_max(), age, aux, model)?;
    let target = theta + growth_time(x1, age, aux, model)?;
    if target > g_max * (1.0 + 1e-14) {
        return Err(Error::ExceedsMaxSize);
    }
    if target < 0.0 {
        return Err(Error::OutOfRange { what: "growth time", value: target });
    }
    if theta == 0.0 {
        return Ok(x1);
    }
    if let Some(cf) = model.closed_flow() {
        let mut out = vec![0.0; model.dim()];
        let mut x = vec![0.0; model.dim()];
        x[0] = x1;
        cf.advance(theta, &x, &mut out);
        return Ok(out[0].min(model.x_max()));
    }
    let ctx = FlowContext::new(age, StateVector::new(x1, aux.to_vec()));
    let mut err = None;
    let found = root::newton_bisect(
        |x| match growth_time(x, age, aux, model) {
            Ok(g) => (g - target, 1.0 / component_velocity(model, 0, x, &ctx)),
            Err(e) => {
                err = Some(e);
                (0.0, 1.0)
            }
        },
        model.x_min(),
        model.x_max(),
        TAU_QUAD,
        200,
    );
    if let Some(e) = err {
        return Err(e);
    }
    found.ok_or(Error::ToleranceNotMet)
}

fn check_aux_index(i: usize, model: &ValidatedModel) -> Result<()> {
    if i == 0 || i > model.m() {
        return Err(Error::OutOfRange { what: "aux index", value: i as f64 });
    }
    Ok(())
}

/// `F_i(x) = ∫_0^x dξ / v_i` with the other coordinates frozen at `ctx`;
/// `i` is 1-based.
pub fn aux_time(i: usize, x: f64, ctx: &FlowContext, model: &ValidatedModel) -> Result<f64> {
    check_aux_index(i, model)?;
    if !(x >= 0.0) {
        return Err(Error::OutOfRange { what: "auxiliary age", value: x });
    }
    if let Some(cf) = model.closed_flow() {
        return Ok(x / cf.aux_rates[i - 1]);
    }
    time_integral(model, i, 0.0, x, ctx)
}

/// `F_i⁻¹(θ + F_i(x_i))`.
pub fn aux_curve(i: usize, theta: f64, x_i: f64, ctx: &FlowContext, model: &ValidatedModel) -> Result<f64> {
    let target = theta + aux_time(i, x_i, ctx, model)?;
    if target < 0.0 {
        return Err(Error::OutOfRange { what: "auxiliary time", value: target });
    }
    if let Some(cf) = model.closed_flow() {
        return Ok((x_i + cf.aux_rates[i - 1] * theta).max(0.0));
    }
    if theta == 0.0 {
        return Ok(x_i);
    }
    let mut hi = x_i.max(1.0);
    while aux_time(i, hi, ctx, model)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::ToleranceNotMet);
        }
    }
    let mut err = None;
    let found = root::newton_bisect(
        |x| match aux_time(i, x, ctx, model) {
            Ok(f) => (f - target, 1.0 / component_velocity(model, i, x, ctx)),
            Err(e) => {
                err = Some(e);
                (0.0, 1.0)
            }
        },
        0.0,
        hi,
        TAU_QUAD,
        200,
    );
    if let Some(e) = err {
        return Err(e);
    }
    found.ok_or(Error::ToleranceNotMet)
}
