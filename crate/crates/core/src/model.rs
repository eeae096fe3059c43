//! Model specification, validation and pointwise rates.

use std::f64::consts::LN_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation, Violations};
use crate::velocity::{AuxVelocity, ClosedFlow, DescribedVelocity, SizeLaw, SizeVelocity, VelocityField};

/// A point of state space: size plus `m` auxiliary ages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub size: f64,
    pub aux: Vec<f64>,
}

impl StateVector {
    pub fn new(size: f64, aux: Vec<f64>) -> Self {
        Self { size, aux }
    }

    pub fn dim(&self) -> usize {
        1 + self.aux.len()
    }

    pub fn coords(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.size);
        v.extend_from_slice(&self.aux);
        v
    }

    pub fn from_coords(c: &[f64]) -> Self {
        Self { size: c[0], aux: c[1..].to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivisionRule {
    /// Sterile population.
    None,
    /// Divide on reaching twice the birth size.
    Doubling,
    /// Divide after adding `delta_l` to the birth size.
    Adder { delta_l: f64 },
    /// Divide at rate `β₁(age)` while in the reproductive region.
    Hazard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HazardSpec {
    None,
    /// Division concentrated at a single age; `a_star` may be omitted when the
    /// division rule determines it.
    Dirac {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a_star: Option<f64>,
    },
    Constant { b0: f64 },
    /// Piecewise-linear `β₁` through `(ages[i], values[i])`, zero outside.
    Table { ages: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Inheritance {
    /// Daughters receive half of every component.
    #[default]
    HalveAll,
    /// Daughters receive half the size and keep the mother's auxiliary ages.
    PreserveAux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m: usize,
    #[serde(rename = "x_m")]
    pub x_min: f64,
    #[serde(rename = "x_M")]
    pub x_max: f64,
    pub alpha: f64,
    #[serde(default)]
    pub mu_d: f64,
    #[serde(default)]
    pub size_velocity: SizeVelocity,
    /// Empty means every auxiliary age advances at unit rate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux_velocities: Vec<AuxVelocity>,
    pub division: DivisionRule,
    pub hazard: HazardSpec,
    #[serde(default)]
    pub inheritance: Inheritance,
}

impl ModelSpec {
    /// Exponential growth at rate `alpha`, doubling at `ln2/alpha`, unit aux clocks.
    pub fn doubling(m: usize, x_min: f64, x_max: f64, alpha: f64, mu_d: f64) -> Self {
        Self {
            m,
            x_min,
            x_max,
            alpha,
            mu_d,
            size_velocity: SizeVelocity::Exponential,
            aux_velocities: Vec::new(),
            division: DivisionRule::Doubling,
            hazard: HazardSpec::Dirac { a_star: None },
            inheritance: Inheritance::HalveAll,
        }
    }

    pub fn with_division(mut self, division: DivisionRule, hazard: HazardSpec) -> Self {
        self.division = division;
        self.hazard = hazard;
        self
    }

    pub fn with_aux_velocities(mut self, aux: Vec<AuxVelocity>) -> Self {
        self.aux_velocities = aux;
        self
    }

    pub fn with_size_velocity(mut self, size: SizeVelocity) -> Self {
        self.size_velocity = size;
        self
    }

    fn described_velocity(&self) -> DescribedVelocity {
        let aux = if self.aux_velocities.is_empty() {
            vec![AuxVelocity::Unit; self.m]
        } else {
            self.aux_velocities.clone()
        };
        DescribedVelocity { alpha: self.alpha, size: self.size_velocity, aux }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Reproductive,
    Birth,
    Neither,
}

/// Immutable, validated model handle.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    spec: ModelSpec,
    velocity: Arc<dyn VelocityField>,
    closed: Option<ClosedFlow>,
    division_age: Option<f64>,
}

impl PartialEq for ValidatedModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.closed == other.closed
            && self.division_age == other.division_age
            && Arc::ptr_eq(&self.velocity, &other.velocity)
    }
}

pub fn validate_model(spec: ModelSpec) -> Result<ValidatedModel> {
    let velocity: Arc<dyn VelocityField> = Arc::new(spec.described_velocity());
    build(spec, velocity)
}

impl ValidatedModel {
    /// Validate `spec` but move individuals with a caller-supplied field. The
    /// descriptors in `spec` are still checked; the field must have dimension
    /// `1 + m`.
    pub fn with_velocity(spec: ModelSpec, velocity: Arc<dyn VelocityField>) -> Result<Self> {
        build(spec, velocity)
    }

    /// Re-validate; returns an equal handle.
    pub fn revalidate(&self) -> Result<Self> {
        build(self.spec.clone(), Arc::clone(&self.velocity))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn dim(&self) -> usize {
        1 + self.spec.m
    }

    pub fn x_min(&self) -> f64 {
        self.spec.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.spec.x_max
    }

    pub fn alpha(&self) -> f64 {
        self.spec.alpha
    }

    pub fn mu_d(&self) -> f64 {
        self.spec.mu_d
    }

    pub fn velocity(&self) -> &dyn VelocityField {
        self.velocity.as_ref()
    }

    pub fn closed_flow(&self) -> Option<&ClosedFlow> {
        self.closed.as_ref()
    }

    /// Division age when it is the same for every birth state.
    pub fn division_age(&self) -> Option<f64> {
        self.division_age
    }

    pub fn division(&self) -> DivisionRule {
        self.spec.division
    }

    pub fn hazard(&self) -> &HazardSpec {
        &self.spec.hazard
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self.spec.hazard, HazardSpec::Dirac { .. })
    }

    pub fn is_sterile(&self) -> bool {
        matches!(self.spec.division, DivisionRule::None)
    }

    pub fn region_of(&self, x: &StateVector) -> Region {
        self.region_of_size(x.size)
    }

    pub fn region_of_size(&self, size: f64) -> Region {
        let half = 0.5 * self.spec.x_max;
        if size > half && size <= self.spec.x_max {
            Region::Reproductive
        } else if size > self.spec.x_min && size <= half {
            Region::Birth
        } else {
            Region::Neither
        }
    }

    /// Reject states outside `[x_m, x_M] × [0, ∞)^m`.
    pub fn check_state(&self, x: &StateVector) -> Result<()> {
        if x.aux.len() != self.spec.m {
            return Err(Error::OutOfRange { what: "state dimension", value: x.dim() as f64 });
        }
        if !(x.size >= self.spec.x_min && x.size <= self.spec.x_max) {
            return Err(Error::OutOfRange { what: "size", value: x.size });
        }
        if let Some(&bad) = x.aux.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::OutOfRange { what: "auxiliary age", value: bad });
        }
        Ok(())
    }

    /// Pointwise division rate `β₁(a)`.
    pub fn hazard_rate(&self, age: f64) -> Result<f64> {
        match &self.spec.hazard {
            HazardSpec::None => Ok(0.0),
            HazardSpec::Dirac { .. } => Err(Error::DiracHazardNotPointwise),
            HazardSpec::Constant { b0 } => Ok(*b0),
            HazardSpec::Table { ages, values } => Ok(table_value(ages, values, age)),
        }
    }

    /// `∫_{a0}^{a1} β₁(a) da`, exact for the supported smooth hazards.
    pub fn hazard_integral(&self, a0: f64, a1: f64) -> Result<f64> {
        match &self.spec.hazard {
            HazardSpec::None => Ok(0.0),
            HazardSpec::Dirac { .. } => Err(Error::DiracHazardNotPointwise),
            HazardSpec::Constant { b0 } => Ok(b0 * (a1 - a0)),
            HazardSpec::Table { ages, values } => Ok(table_integral(ages, values, a1) - table_integral(ages, values, a0)),
        }
    }

    /// `sup β₁`.
    pub fn hazard_bound(&self) -> Result<f64> {
        match &self.spec.hazard {
            HazardSpec::None => Ok(0.0),
            HazardSpec::Dirac { .. } => Err(Error::DiracHazardNotPointwise),
            HazardSpec::Constant { b0 } => Ok(*b0),
            HazardSpec::Table { values, .. } => Ok(values.iter().cloned().fold(0.0, f64::max)),
        }
    }

    /// `μ(a, x̄) = μ_d + β₁(a)·χ(x̄ ∈ Ω_r)`.
    pub fn loss_rate(&self, age: f64, x: &StateVector) -> Result<f64> {
        let beta = self.hazard_rate(age)?;
        let on = self.region_of(x) == Region::Reproductive;
        Ok(self.spec.mu_d + if on { beta } else { 0.0 })
    }

    /// Asymptotic loss rate `μ_∞` bounding the half-plane where transforms converge.
    pub fn mu_infinity(&self) -> f64 {
        match &self.spec.hazard {
            HazardSpec::Constant { b0 } => self.spec.mu_d + b0,
            _ => self.spec.mu_d,
        }
    }

    pub fn daughter_state(&self, mother: &StateVector) -> Result<StateVector> {
        if self.region_of(mother) != Region::Reproductive {
            return Err(Error::NotReproductive);
        }
        Ok(self.daughter_unchecked(mother))
    }

    pub(crate) fn daughter_unchecked(&self, mother: &StateVector) -> StateVector {
        let aux = match self.spec.inheritance {
            Inheritance::HalveAll => mother.aux.iter().map(|v| 0.5 * v).collect(),
            Inheritance::PreserveAux => mother.aux.clone(),
        };
        StateVector { size: 0.5 * mother.size, aux }
    }

    /// Size at which a cell born at `birth_size` divides, for size-triggered rules.
    pub fn division_size(&self, birth_size: f64) -> Option<f64> {
        match self.spec.division {
            DivisionRule::Doubling => Some(2.0 * birth_size),
            DivisionRule::Adder { delta_l } => Some(birth_size + delta_l),
            _ => None,
        }
    }
}

fn table_value(ages: &[f64], values: &[f64], a: f64) -> f64 {
    if a < ages[0] || a > ages[ages.len() - 1] {
        return 0.0;
    }
    let k = ages.partition_point(|&x| x <= a).clamp(1, ages.len() - 1);
    let (a0, a1) = (ages[k - 1], ages[k]);
    let f = if a1 > a0 { (a - a0) / (a1 - a0) } else { 0.0 };
    values[k - 1] + f * (values[k] - values[k - 1])
}

/// `∫_{-∞}^{a} β₁`.
fn table_integral(ages: &[f64], values: &[f64], a: f64) -> f64 {
    let mut total = 0.0;
    for k in 1..ages.len() {
        let (a0, a1) = (ages[k - 1], ages[k]);
        if a <= a0 {
            break;
        }
        let top = a.min(a1);
        let v_top = table_value(ages, values, top);
        total += 0.5 * (values[k - 1] + v_top) * (top - a0);
    }
    total
}

fn build(spec: ModelSpec, velocity: Arc<dyn VelocityField>) -> Result<ValidatedModel> {
    let mut v = Vec::new();
    let mut fail = |field: &'static str, message: String| v.push(Violation { field, message });

    if !(spec.x_min > 0.0 && spec.x_min.is_finite()) {
        fail("x_m", "x_m must be positive and finite".into());
    }
    if !(spec.x_max > 2.0 * spec.x_min && spec.x_max.is_finite()) {
        fail("x_M", "x_M ≤ 2·x_m: the birth region is empty".into());
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        fail("alpha", "alpha must be positive".into());
    }
    if !(spec.mu_d >= 0.0 && spec.mu_d.is_finite()) {
        fail("mu_d", "mu_d must be non-negative".into());
    }
    if !spec.aux_velocities.is_empty() && spec.aux_velocities.len() != spec.m {
        fail("aux_velocities", format!("expected {} descriptors, got {}", spec.m, spec.aux_velocities.len()));
    }
    for a in &spec.aux_velocities {
        if let Err(msg) = a.check() {
            fail("aux_velocities", msg);
        }
    }
    match spec.size_velocity {
        SizeVelocity::Exponential => {}
        SizeVelocity::Linear { rate } => {
            if !(rate > 0.0) {
                fail("size_velocity", "linear growth rate must be positive".into());
            }
        }
        SizeVelocity::AuxModulated { gamma, index } => {
            if !(gamma >= 0.0) {
                fail("size_velocity", "modulation gamma must be non-negative".into());
            }
            if index >= spec.m {
                fail("size_velocity", format!("aux index {index} out of range for m = {}", spec.m));
            }
        }
    }
    if velocity.dim() != 1 + spec.m {
        fail("velocity", format!("field dimension {} does not match 1 + m = {}", velocity.dim(), 1 + spec.m));
    }

    let closed = velocity.closed_form();
    let mut division_age = None;
    match (&spec.division, &spec.hazard) {
        (DivisionRule::None, HazardSpec::None) => {}
        (DivisionRule::Doubling, HazardSpec::Dirac { a_star }) => {
            if spec.x_max > 4.0 * spec.x_min {
                fail("division", "doubling needs x_M ≤ 4·x_m so every mother divides in the reproductive region".into());
            }
            let derived = match closed.as_ref().map(|c| c.size) {
                Some(SizeLaw::Exponential(alpha)) => Some(LN_2 / alpha),
                _ => None,
            };
            match (a_star, derived) {
                (Some(given), Some(d)) => {
                    if !(*given > 0.0) {
                        fail("hazard", "a_star must be positive".into());
                    } else if (given - d).abs() > 1e-9 * d {
                        fail("hazard", format!("a_star = {given} disagrees with ln2/alpha = {d}"));
                    }
                    division_age = Some(d);
                }
                (Some(_), None) => fail("hazard", "a_star depends on birth size for this growth law; omit it".into()),
                (None, d) => division_age = d,
            }
        }
        (DivisionRule::Adder { delta_l }, HazardSpec::Dirac { a_star }) => {
            if !(*delta_l > 0.0) {
                fail("division", "adder increment delta_l must be positive".into());
            } else {
                if spec.x_min + delta_l < 0.5 * spec.x_max {
                    fail("division", "x_m + delta_l < x_M/2: some mothers would divide outside the reproductive region".into());
                }
                if *delta_l > 0.5 * spec.x_max {
                    fail("division", "delta_l > x_M/2: birth size + delta_l can exceed x_M".into());
                }
            }
            if a_star.is_some() {
                fail("hazard", "a_star depends on birth size under the adder rule; omit it".into());
            }
        }
        (DivisionRule::Hazard, HazardSpec::Constant { b0 }) => {
            if !(*b0 > 0.0 && b0.is_finite()) {
                fail("hazard", "b0 must be positive".into());
            }
        }
        (DivisionRule::Hazard, HazardSpec::Table { ages, values }) => {
            if ages.len() < 2 || ages.len() != values.len() {
                fail("hazard", "table needs at least two (age, value) pairs of equal length".into());
            } else {
                if ages.windows(2).any(|w| !(w[1] > w[0])) || !(ages[0] >= 0.0) {
                    fail("hazard", "table ages must be non-negative and strictly increasing".into());
                }
                if values.iter().any(|&b| !(b >= 0.0 && b.is_finite())) {
                    fail("hazard", "table values must be non-negative".into());
                }
                if values.iter().all(|&b| b == 0.0) {
                    fail("hazard", "table hazard is identically zero; use kind none".into());
                }
            }
        }
        (d, h) => fail("division", format!("division rule {d:?} is incompatible with hazard {h:?}")),
    }

    if !v.is_empty() {
        return Err(Error::Invalid(Violations(v)));
    }
    Ok(ValidatedModel { spec, velocity, closed, division_age })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn reference() -> ValidatedModel {
        validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0)).unwrap()
    }

    fn violations(spec: ModelSpec) -> Violations {
        match validate_model(spec) {
            Err(Error::Invalid(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn reference_model_derives_unit_division_age() {
        let spec = ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0)
            .with_division(DivisionRule::Doubling, HazardSpec::Dirac { a_star: Some(1.0) });
        let model = validate_model(spec).unwrap();
        assert!((model.division_age().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn narrow_size_range_is_rejected() {
        let v = violations(ModelSpec::doubling(2, 1.0, 1.5, LN_2, 0.0));
        assert!(v.mentions("x_M ≤ 2·x_m"), "{v}");
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let v = violations(ModelSpec::doubling(2, 0.5, 2.0, -1.0, 0.0));
        assert!(v.mentions("alpha must be positive"));
    }

    #[test]
    fn mismatched_rule_and_hazard_is_rejected() {
        let spec = ModelSpec::doubling(1, 0.5, 2.0, 1.0, 0.0)
            .with_division(DivisionRule::Hazard, HazardSpec::Dirac { a_star: None });
        assert!(violations(spec).mentions("incompatible"));
    }

    #[test]
    fn regions_are_half_open() {
        let m = reference();
        let s = |size| StateVector::new(size, vec![0.0, 0.0]);
        assert_eq!(m.region_of(&s(1.5)), Region::Reproductive);
        assert_eq!(m.region_of(&s(0.8)), Region::Birth);
        assert_eq!(m.region_of(&s(1.0)), Region::Birth);
        assert_eq!(m.region_of(&s(2.0)), Region::Reproductive);
        assert_eq!(m.region_of(&s(0.5)), Region::Neither);
    }

    #[test]
    fn loss_rate_switches_on_in_reproductive_region() {
        let spec = ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.1)
            .with_division(DivisionRule::Hazard, HazardSpec::Constant { b0: 2.0 });
        let m = validate_model(spec).unwrap();
        let s = |size| StateVector::new(size, vec![0.0, 0.0]);
        assert!((m.loss_rate(0.3, &s(1.5)).unwrap() - 2.1).abs() < 1e-15);
        assert!((m.loss_rate(0.3, &s(0.8)).unwrap() - 0.1).abs() < 1e-15);
        let sterile = validate_model(
            ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0).with_division(DivisionRule::None, HazardSpec::None),
        )
        .unwrap();
        assert_eq!(sterile.loss_rate(1.0, &s(1.5)).unwrap(), 0.0);
        assert_eq!(reference().loss_rate(1.0, &s(1.5)), Err(Error::DiracHazardNotPointwise));
    }

    #[test]
    fn daughters_halve_every_component() {
        let m = reference();
        let d = m.daughter_state(&StateVector::new(2.0, vec![1.0, 1.0])).unwrap();
        assert_eq!(d, StateVector::new(1.0, vec![0.5, 0.5]));
        let d = m.daughter_state(&StateVector::new(2.0, vec![0.0, 0.0])).unwrap();
        assert_eq!(d, StateVector::new(1.0, vec![0.0, 0.0]));
        assert_eq!(
            m.daughter_state(&StateVector::new(0.8, vec![0.0, 0.0])),
            Err(Error::NotReproductive)
        );
    }

    #[test]
    fn preserve_aux_keeps_ages() {
        let mut spec = ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0);
        spec.inheritance = Inheritance::PreserveAux;
        let m = validate_model(spec).unwrap();
        let d = m.daughter_state(&StateVector::new(1.6, vec![1.0, 3.0])).unwrap();
        assert_eq!(d, StateVector::new(0.8, vec![1.0, 3.0]));
    }

    #[test]
    fn table_hazard_integrates_piecewise_linear() {
        let spec = ModelSpec::doubling(0, 0.5, 2.0, 1.0, 0.0).with_division(
            DivisionRule::Hazard,
            HazardSpec::Table { ages: vec![0.0, 1.0, 2.0], values: vec![0.0, 2.0, 0.0] },
        );
        let m = validate_model(spec).unwrap();
        assert!((m.hazard_rate(0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((m.hazard_integral(0.0, 2.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((m.hazard_integral(0.5, 1.5).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(m.hazard_rate(3.0).unwrap(), 0.0);
    }

    #[test]
    fn revalidation_is_idempotent() {
        let m = reference();
        assert_eq!(m.revalidate().unwrap(), m);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = reference().spec().clone();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"x_M\""));
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    proptest! {
        #[test]
        fn daughters_land_in_birth_region(size in 1.0f64..=2.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            prop_assume!(size > 1.0);
            let m = reference();
            let d = m.daughter_state(&StateVector::new(size, vec![a, b])).unwrap();
            prop_assert_eq!(m.region_of(&d), Region::Birth);
        }

        #[test]
        fn derived_division_age_doubles_every_size(alpha in 0.1f64..5.0, x in 0.5f64..1.0) {
            let m = validate_model(ModelSpec::doubling(1, 0.5, 2.0, alpha, 0.0)).unwrap();
            let a = m.division_age().unwrap();
            prop_assert!((x * (alpha * a).exp() / (2.0 * x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn loss_rate_never_below_death_rate(size in 0.5f64..=2.0, age in 0.0f64..4.0) {
            let spec = ModelSpec::doubling(1, 0.5, 2.0, 1.0, 0.3)
                .with_division(DivisionRule::Hazard, HazardSpec::Constant { b0: 1.5 });
            let m = validate_model(spec).unwrap();
            let s = StateVector::new(size, vec![0.0]);
            let mu = m.loss_rate(age, &s).unwrap();
            prop_assert!(mu >= 0.3);
            if m.region_of(&s) != Region::Reproductive {
                prop_assert_eq!(mu, 0.3);
            }
        }
    }
}
