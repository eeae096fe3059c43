//! Initial cohorts, the two-branch density along characteristics, population
//! totals, and numerical semigroup/generator checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{advance, division_age_for, TAU_FLOW};
use crate::error::{Error, Result};
use crate::kinetics::{self, divergence};
use crate::model::{HazardSpec, StateVector, ValidatedModel};
use crate::numerics::ode::OdeOptions;
use crate::numerics::{quad, Axis, Lattice};
use crate::renewal::BirthFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialAtom {
    pub age: f64,
    pub state: StateVector,
    pub weight: f64,
}

/// Nodal values on an `(age, size, aux…)` lattice, or one value filling it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValues {
    Uniform(f64),
    Nodes(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDescriptor {
    axes: Vec<Axis>,
    values: GridValues,
}

/// Multilinear density on an `(age, size, aux…)` lattice, zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridDescriptor", into = "GridDescriptor")]
pub struct GridDensity {
    lattice: Lattice,
    values: Vec<f64>,
}

impl TryFrom<GridDescriptor> for GridDensity {
    type Error = String;

    fn try_from(d: GridDescriptor) -> std::result::Result<Self, String> {
        if d.axes.iter().any(|a| a.count < 2 || !(a.hi > a.lo)) {
            return Err("grid axes need at least two nodes and positive width".into());
        }
        let lattice = Lattice::new(d.axes);
        let values = match d.values {
            GridValues::Uniform(v) => vec![v; lattice.len()],
            GridValues::Nodes(v) if v.len() == lattice.len() => v,
            GridValues::Nodes(v) => {
                return Err(format!("grid has {} nodes but {} values", lattice.len(), v.len()))
            }
        };
        Ok(Self { lattice, values })
    }
}

impl From<GridDensity> for GridDescriptor {
    fn from(g: GridDensity) -> Self {
        Self { axes: g.lattice.axes, values: GridValues::Nodes(g.values) }
    }
}

impl GridDensity {
    pub fn new(axes: Vec<Axis>, values: GridValues) -> Result<Self> {
        GridDescriptor { axes, values }.try_into().map_err(Error::InvalidCohort)
    }

    pub fn from_fn(axes: Vec<Axis>, f: impl Fn(&[f64]) -> f64) -> Self {
        let lattice = Lattice::new(axes);
        let values = lattice.points().map(|p| f(&p)).collect();
        Self { lattice, values }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Product of independent normals over `(age, size, aux…)`, scaled to total
/// `mass` before truncation to the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBump {
    pub mass: f64,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl GaussianBump {
    fn value(&self, z: &[f64]) -> f64 {
        let mut log = 0.0;
        let mut norm = self.mass;
        for ((&x, &m), &s) in z.iter().zip(&self.mean).zip(&self.sd) {
            let u = (x - m) / s;
            log -= 0.5 * u * u;
            norm /= s * (2.0 * std::f64::consts::PI).sqrt();
        }
        norm * log.exp()
    }
}

/// Initial condition `φ(a, x̄)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCohort {
    Atoms { atoms: Vec<InitialAtom> },
    Grid(GridDensity),
    Gaussian(GaussianBump),
}

impl InitialCohort {
    pub fn atom(age: f64, state: StateVector, weight: f64) -> Self {
        InitialCohort::Atoms { atoms: vec![InitialAtom { age, state, weight }] }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self, InitialCohort::Atoms { .. })
    }

    pub fn validate(&self, model: &ValidatedModel) -> Result<()> {
        let dim = 1 + model.dim();
        match self {
            InitialCohort::Atoms { atoms } => {
                for a in atoms {
                    if !(a.weight >= 0.0 && a.weight.is_finite()) {
                        return Err(Error::InvalidCohort(format!("negative or non-finite weight {}", a.weight)));
                    }
                    if !(a.age >= 0.0) {
                        return Err(Error::InvalidCohort(format!("negative age {}", a.age)));
                    }
                    model
                        .check_state(&a.state)
                        .map_err(|e| Error::InvalidCohort(format!("atom state: {e}")))?;
                }
            }
            InitialCohort::Grid(g) => {
                if g.lattice.dim() != dim {
                    return Err(Error::InvalidCohort(format!("grid has {} axes, expected {dim}", g.lattice.dim())));
                }
                if g.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::InvalidCohort("grid values must be non-negative".into()));
                }
                if g.lattice.axes[0].lo < 0.0 {
                    return Err(Error::InvalidCohort("grid ages must be non-negative".into()));
                }
            }
            InitialCohort::Gaussian(b) => {
                if b.mean.len() != dim || b.sd.len() != dim {
                    return Err(Error::InvalidCohort(format!("gaussian needs {dim} means and deviations")));
                }
                if b.sd.iter().any(|s| !(*s > 0.0)) || !(b.mass >= 0.0) {
                    return Err(Error::InvalidCohort("gaussian deviations must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Pointwise density; atomic cohorts have none and evaluate to zero.
    pub fn density(&self, model: &ValidatedModel, age: f64, x: &[f64]) -> f64 {
        match self {
            InitialCohort::Atoms { .. } => 0.0,
            InitialCohort::Grid(g) => {
                let mut z = Vec::with_capacity(1 + x.len());
                z.push(age);
                z.extend_from_slice(x);
                g.lattice.interpolate(&g.values, &z).max(0.0)
            }
            InitialCohort::Gaussian(b) => {
                if !in_domain(model, age, x) {
                    return 0.0;
                }
                let mut z = Vec::with_capacity(1 + x.len());
                z.push(age);
                z.extend_from_slice(x);
                b.value(&z)
            }
        }
    }

    /// `(∂φ/∂a, ∇ₓφ)` for cohorts with analytic derivatives.
    pub fn gradient(&self, age: f64, x: &[f64]) -> Option<Vec<f64>> {
        let InitialCohort::Gaussian(b) = self else { return None };
        let mut z = vec![age];
        z.extend_from_slice(x);
        let v = b.value(&z);
        Some(
            z.iter()
                .zip(&b.mean)
                .zip(&b.sd)
                .map(|((&zi, &m), &s)| -(zi - m) / (s * s) * v)
                .collect(),
        )
    }

    /// Total mass inside the domain.
    pub fn mass(&self, model: &ValidatedModel) -> f64 {
        match self {
            InitialCohort::Atoms { atoms } => atoms.iter().map(|a| a.weight).sum(),
            InitialCohort::Grid(g) => g.lattice.integrate(&g.values),
            InitialCohort::Gaussian(b) => {
                let mut total = b.mass;
                for (k, (&m, &s)) in b.mean.iter().zip(&b.sd).enumerate() {
                    let (lo, hi) = domain_bounds(model, k);
                    let (lo, hi) = (lo.max(m - 12.0 * s), hi.min(m + 12.0 * s));
                    if hi <= lo {
                        return 0.0;
                    }
                    let pdf = |u: f64| (-0.5 * ((u - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                    total *= quad::integrate(pdf, lo, hi, 1e-15, 1e-13).value;
                }
                total
            }
        }
    }

    /// Bounding box `(lo, hi)` of the support over `(age, size, aux…)`.
    pub fn support_box(&self, model: &ValidatedModel) -> (Vec<f64>, Vec<f64>) {
        let dim = 1 + model.dim();
        match self {
            InitialCohort::Atoms { atoms } => {
                let mut lo = vec![f64::INFINITY; dim];
                let mut hi = vec![f64::NEG_INFINITY; dim];
                for a in atoms.iter().filter(|a| a.weight > 0.0) {
                    let mut z = vec![a.age];
                    z.extend(a.state.coords());
                    for k in 0..dim {
                        lo[k] = lo[k].min(z[k]);
                        hi[k] = hi[k].max(z[k]);
                    }
                }
                (lo, hi)
            }
            InitialCohort::Grid(g) => (
                g.lattice.axes.iter().map(|a| a.lo).collect(),
                g.lattice.axes.iter().map(|a| a.hi).collect(),
            ),
            InitialCohort::Gaussian(b) => {
                let mut lo = Vec::with_capacity(dim);
                let mut hi = Vec::with_capacity(dim);
                for (k, (&m, &s)) in b.mean.iter().zip(&b.sd).enumerate() {
                    let (dl, dh) = domain_bounds(model, k);
                    lo.push((m - 8.0 * s).max(dl));
                    hi.push((m + 8.0 * s).min(dh));
                }
                (lo, hi)
            }
        }
    }
}

/// Domain bounds of coordinate `k` of `(age, size, aux…)`.
fn domain_bounds(model: &ValidatedModel, k: usize) -> (f64, f64) {
    match k {
        0 => (0.0, f64::INFINITY),
        1 => (model.x_min(), model.x_max()),
        _ => (0.0, f64::INFINITY),
    }
}

fn in_domain(model: &ValidatedModel, age: f64, x: &[f64]) -> bool {
    age >= 0.0 && x[0] >= model.x_min() && x[0] <= model.x_max() && x[1..].iter().all(|&v| v >= 0.0)
}

/// Backward origin of `(a, x̄)` after `θ`, or `None` when the path leaves Ω.
fn origin(model: &ValidatedModel, theta: f64, age: f64, x: &[f64]) -> Result<Option<Vec<f64>>> {
    match advance(model, -theta, age, x, &OdeOptions::with_rtol(TAU_FLOW), true) {
        Ok(p) => Ok(Some(p.coords)),
        Err(Error::LeftDomain { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `Π·J` over the `θ` preceding `(a, x̄)`, zero when the path leaves Ω.
pub(crate) fn transport_factor(model: &ValidatedModel, theta: f64, age: f64, x: &[f64]) -> Result<f64> {
    match kinetics::kinetic_factors(theta, age, &StateVector::from_coords(x), model) {
        Ok(f) => Ok(f.survival * f.jacobian),
        Err(Error::LeftDomain { .. }) | Err(Error::OutOfRange { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// First branch: `φ(a − t, X̄(−t, x̄))·Π(t)·J(t)` for `t < a`.
pub fn propagate_initial(
    t: f64,
    age: f64,
    x: &StateVector,
    phi: &InitialCohort,
    model: &ValidatedModel,
) -> Result<f64> {
    if t >= age {
        return Err(Error::WrongBranch { t, a: age });
    }
    if phi.is_atomic() {
        return Err(Error::Unsupported("atomic cohorts have no pointwise density; use propagate_atoms".into()));
    }
    propagate_coords(t, age, &x.coords(), phi, model)
}

fn propagate_coords(t: f64, age: f64, x: &[f64], phi: &InitialCohort, model: &ValidatedModel) -> Result<f64> {
    let Some(o) = origin(model, t, age, x)? else { return Ok(0.0) };
    let value = phi.density(model, age - t, &o);
    if value == 0.0 {
        return Ok(0.0);
    }
    Ok(value * transport_factor(model, t, age, x)?)
}

/// Two-branch density `n(t, a, x̄)`; the line `t = a` uses the birth branch.
///
/// An atomic birth function is a measure, so the birth branch returns the atom
/// weight carried by the characteristic through `(a, x̄)` and zero elsewhere.
pub fn evaluate_density(
    t: f64,
    age: f64,
    x: &StateVector,
    phi: &InitialCohort,
    birth: &BirthFunction,
    model: &ValidatedModel,
) -> Result<f64> {
    if t < age {
        return propagate_initial(t, age, x, phi, model);
    }
    let s = t - age;
    if s > birth.horizon() * (1.0 + 1e-12) {
        return Err(Error::BirthFunctionUndefined { t: s, horizon: birth.horizon() });
    }
    let coords = x.coords();
    let Some(o) = origin(model, age, age, &coords)? else { return Ok(0.0) };
    let b = birth.value(s, &o);
    if b == 0.0 {
        return Ok(0.0);
    }
    // atoms carry mass, not density: no volume factor along the path
    let factor = match birth {
        BirthFunction::Atomic { .. } => crate::kinetics::survival(age, age, x, model)?,
        BirthFunction::Grid(_) => transport_factor(model, age, age, &coords)?,
    };
    Ok(b * factor)
}

/// Surviving initial atoms at time `t` (cells born after 0 are excluded).
pub fn propagate_atoms(t: f64, atoms: &[InitialAtom], model: &ValidatedModel) -> Result<Vec<InitialAtom>> {
    let mut out = Vec::with_capacity(atoms.len());
    for a in atoms {
        if let Some((state, w)) = carry(model, t, a.age, &a.state.coords(), a.weight)? {
            out.push(InitialAtom { age: a.age + t, state: StateVector::from_coords(&state), weight: w });
        }
    }
    Ok(out)
}

/// Moves a point mass forward by `t`; `None` once it has divided or left Ω.
pub(crate) fn carry(
    model: &ValidatedModel,
    t: f64,
    age: f64,
    x: &[f64],
    weight: f64,
) -> Result<Option<(Vec<f64>, f64)>> {
    let opts = OdeOptions::with_rtol(TAU_FLOW);
    if let HazardSpec::Dirac { .. } = model.hazard() {
        let a_star = match model.division_age() {
            Some(a) => a,
            None => division_age_for(model, &advance(model, -age, age, x, &opts, false)?.coords)?,
        };
        if age + t >= a_star {
            return Ok(None);
        }
    }
    let end = match advance(model, t, age, x, &opts, true) {
        Ok(p) => p.coords,
        Err(Error::LeftDomain { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let survival = if model.is_dirac() {
        (-model.mu_d() * t).exp()
    } else {
        kinetics::survival(t, age + t, &StateVector::from_coords(&end), model)?
    };
    Ok(Some((end, weight * survival)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuadSpec {
    /// Follow each quadrature node of the data along its characteristic; the
    /// Jacobian cancels against the change of variables. Smooth cohorts
    /// without their own lattice use `resolution` nodes per axis.
    Lagrangian { resolution: usize },
    /// Trapezoid rule for `n(t, ·, ·)` on a fixed `(age, state)` lattice.
    Eulerian(Lattice),
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec::Lagrangian { resolution: 21 }
    }
}

/// `∫∫ n(t, a, x̄) dx̄ da`.
pub fn total_population(
    t: f64,
    phi: &InitialCohort,
    birth: &BirthFunction,
    model: &ValidatedModel,
    spec: &QuadSpec,
) -> Result<f64> {
    if t > birth.horizon() * (1.0 + 1e-12) {
        return Err(Error::BirthFunctionUndefined { t, horizon: birth.horizon() });
    }
    match spec {
        QuadSpec::Eulerian(lattice) => {
            if phi.is_atomic() || matches!(birth, BirthFunction::Atomic { .. }) {
                return Err(Error::Unsupported("eulerian quadrature needs densities, not atoms".into()));
            }
            let values = lattice
                .points()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|p| evaluate_density(t, p[0], &StateVector::from_coords(&p[1..]), phi, birth, model))
                .collect::<Result<Vec<f64>>>()?;
            Ok(lattice.integrate(&values))
        }
        QuadSpec::Lagrangian { resolution } => {
            Ok(initial_mass_at(t, phi, model, *resolution)? + birth.surviving_mass(t, model)?)
        }
    }
}

fn initial_mass_at(t: f64, phi: &InitialCohort, model: &ValidatedModel, resolution: usize) -> Result<f64> {
    if let InitialCohort::Atoms { atoms } = phi {
        return Ok(propagate_atoms(t, atoms, model)?.iter().map(|a| a.weight).sum());
    }
    let parts = mass_nodes(phi, model, resolution)
        .par_iter()
        .map(|(p, w)| Ok(carry(model, t, p[0], &p[1..], *w)?.map_or(0.0, |(_, w)| w)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

/// The cohort as weighted points `([age, x̄…], mass)`: atoms as they are,
/// densities by the product trapezoid rule on their own lattice or on
/// `resolution` nodes per axis of the support box.
pub(crate) fn mass_nodes(phi: &InitialCohort, model: &ValidatedModel, resolution: usize) -> Vec<(Vec<f64>, f64)> {
    let lattice;
    let (lat, values): (&Lattice, Vec<f64>) = match phi {
        InitialCohort::Atoms { atoms } => {
            return atoms
                .iter()
                .filter(|a| a.weight != 0.0)
                .map(|a| {
                    let mut p = vec![a.age];
                    p.extend(a.state.coords());
                    (p, a.weight)
                })
                .collect();
        }
        InitialCohort::Grid(g) => (&g.lattice, g.values.clone()),
        InitialCohort::Gaussian(_) => {
            let (lo, hi) = phi.support_box(model);
            lattice = Lattice::new(lo.iter().zip(&hi).map(|(&l, &h)| Axis::new(l, h, resolution.max(2))).collect());
            let values = lattice.points().map(|p| phi.density(model, p[0], &p[1..])).collect();
            (&lattice, values)
        }
    };
    (0..lat.len())
        .filter(|&i| values[i] != 0.0)
        .map(|i| (lat.point(i), values[i] * lat.trapezoid_weight(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityRow {
    pub h: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemigroupReport {
    pub max_abs_deviation: f64,
    pub l1_deviation: f64,
    pub identity_deviation: f64,
    pub points: usize,
    pub continuity: Vec<ContinuityRow>,
}

impl SemigroupReport {
    pub fn continuity_decreasing(&self) -> bool {
        self.continuity.windows(2).all(|w| w[1].l1 < w[0].l1)
    }
}

pub const CONTINUITY_STEPS: [f64; 3] = [0.1, 0.01, 0.001];

/// `[S(t)φ](a, x̄)` for the homogeneous-boundary semigroup.
fn semigroup(t: f64, age: f64, x: &[f64], phi: &InitialCohort, model: &ValidatedModel) -> Result<f64> {
    if t == 0.0 {
        return Ok(phi.density(model, age, x));
    }
    if age <= t {
        return Ok(0.0);
    }
    propagate_coords(t, age, x, phi, model)
}

/// Compares `S(s)S(t)φ` with `S(t+s)φ` on the sample lattice over
/// `(age, size, aux…)` and measures `‖S(h)φ − φ‖₁` for shrinking `h`.
pub fn verify_semigroup(
    phi: &InitialCohort,
    t: f64,
    s: f64,
    sample: &Lattice,
    model: &ValidatedModel,
) -> Result<SemigroupReport> {
    if !(t >= 0.0 && s >= 0.0) {
        return Err(Error::OutOfRange { what: "semigroup time", value: t.min(s) });
    }
    if phi.is_atomic() {
        return Err(Error::Unsupported("semigroup checks need a density cohort".into()));
    }
    let points: Vec<Vec<f64>> = sample.points().collect();
    let rows = points
        .par_iter()
        .map(|p| {
            let (age, x) = (p[0], &p[1..]);
            let direct = semigroup(t + s, age, x, phi, model)?;
            let composed = if s == 0.0 {
                semigroup(t, age, x, phi, model)?
            } else if age <= s {
                0.0
            } else {
                match origin(model, s, age, x)? {
                    None => 0.0,
                    Some(o) => {
                        let inner = semigroup(t, age - s, &o, phi, model)?;
                        if inner == 0.0 {
                            0.0
                        } else {
                            inner * transport_factor(model, s, age, x)?
                        }
                    }
                }
            };
            let identity = (semigroup(0.0, age, x, phi, model)? - phi.density(model, age, x)).abs();
            let continuity = CONTINUITY_STEPS
                .iter()
                .map(|&h| Ok((semigroup(h, age, x, phi, model)? - phi.density(model, age, x)).abs()))
                .collect::<Result<Vec<f64>>>()?;
            Ok(((direct - composed).abs(), identity, continuity))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = SemigroupReport {
        max_abs_deviation: 0.0,
        l1_deviation: 0.0,
        identity_deviation: 0.0,
        points: points.len(),
        continuity: CONTINUITY_STEPS.iter().map(|&h| ContinuityRow { h, l1: 0.0 }).collect(),
    };
    for (i, (dev, id, cont)) in rows.into_iter().enumerate() {
        let w = sample.trapezoid_weight(i);
        report.max_abs_deviation = report.max_abs_deviation.max(dev);
        report.l1_deviation += w * dev;
        report.identity_deviation = report.identity_deviation.max(id);
        for (row, c) in report.continuity.iter_mut().zip(cont) {
            row.l1 += w * c;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorRow {
    pub h: f64,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorReport {
    pub rows: Vec<GeneratorRow>,
    /// `max |𝒜φ|` over the sample points.
    pub generator_norm: f64,
    /// Successive deviation ratios; first-order convergence gives ≈ ½ when `h` halves.
    pub ratios: Vec<f64>,
    pub points: usize,
}

/// `𝒜φ = −[∂φ/∂a + Σ vᵢ ∂φ/∂xᵢ + φ Σ ∂vᵢ/∂xᵢ + μφ]`.
pub fn generator(phi: &InitialCohort, age: f64, x: &StateVector, model: &ValidatedModel) -> Result<f64> {
    let coords = x.coords();
    let grad = phi
        .gradient(age, &coords)
        .ok_or_else(|| Error::Unsupported("generator needs a cohort with analytic derivatives".into()))?;
    let value = phi.density(model, age, &coords);
    let mut v = vec![0.0; coords.len()];
    model.velocity().eval(age, &coords, &mut v);
    let transport: f64 = v.iter().zip(&grad[1..]).map(|(vi, gi)| vi * gi).sum();
    let mu = model.loss_rate(age, x)?;
    Ok(-(grad[0] + transport + value * divergence(age, &coords, model) + mu * value))
}

/// Difference quotients `(S(h)φ − φ)/h` against `𝒜φ` on sample points with
/// age above every `h`.
pub fn verify_generator(
    phi: &InitialCohort,
    sample: &Lattice,
    model: &ValidatedModel,
    hs: &[f64],
) -> Result<GeneratorReport> {
    if model.is_dirac() {
        return Err(Error::RequiresSmoothHazard);
    }
    let h_max = hs.iter().cloned().fold(0.0, f64::max);
    let points: Vec<Vec<f64>> = sample.points().filter(|p| p[0] > h_max).collect();
    let per_point = points
        .par_iter()
        .map(|p| {
            let (age, x) = (p[0], &p[1..]);
            let a_phi = generator(phi, age, &StateVector::from_coords(x), model)?;
            let base = phi.density(model, age, x);
            let devs = hs
                .iter()
                .map(|&h| Ok(((semigroup(h, age, x, phi, model)? - base) / h - a_phi).abs()))
                .collect::<Result<Vec<f64>>>()?;
            Ok((a_phi.abs(), devs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<GeneratorRow> = hs.iter().map(|&h| GeneratorRow { h, max_deviation: 0.0 }).collect();
    let mut norm = 0.0f64;
    for (a, devs) in per_point {
        norm = norm.max(a);
        for (row, d) in rows.iter_mut().zip(devs) {
            row.max_deviation = row.max_deviation.max(d);
        }
    }
    let ratios = rows.windows(2).map(|w| w[1].max_deviation / w[0].max_deviation).collect();
    Ok(GeneratorReport { rows, generator_norm: norm, ratios, points: points.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, DivisionRule, ModelSpec};
    use crate::renewal::{BirthFunction, CohortAtom};
    use crate::velocity::{AuxVelocity, SizeVelocity};
    use std::f64::consts::LN_2;

    fn reference() -> ValidatedModel {
        validate_model(ModelSpec::doubling(2, 0.5, 2.0, LN_2, 0.0)).unwrap()
    }

    fn sterile(alpha: f64, mu_d: f64, m: usize) -> ValidatedModel {
        validate_model(
            ModelSpec::doubling(m, 0.5, 2.0, alpha, mu_d).with_division(DivisionRule::None, HazardSpec::None),
        )
        .unwrap()
    }

    fn box_cohort() -> InitialCohort {
        InitialCohort::Grid(
            GridDensity::new(
                vec![Axis::new(1.0, 2.0, 5), Axis::new(0.6, 0.9, 4), Axis::new(0.0, 1.0, 3), Axis::new(0.0, 1.0, 3)],
                GridValues::Uniform(3.0),
            )
            .unwrap(),
        )
    }

    fn empty_birth(horizon: f64) -> BirthFunction {
        BirthFunction::Atomic { atoms: vec![], horizon }
    }

    #[test]
    fn zero_time_returns_phi() {
        let phi = box_cohort();
        let m = reference();
        let x = StateVector::new(0.7, vec![0.5, 0.5]);
        assert_eq!(propagate_initial(0.0, 1.5, &x, &phi, &m).unwrap(), 3.0);
        assert!(matches!(propagate_initial(2.0, 1.5, &x, &phi, &m), Err(Error::WrongBranch { .. })));
    }

    #[test]
    fn uniform_box_halves_density_and_conserves_mass() {
        let phi = box_cohort();
        let m = sterile(LN_2, 0.0, 2);
        // inside the image of the box after one unit: density φ₀·J = 1.5
        let x = StateVector::new(1.5, vec![1.5, 1.5]);
        assert!((propagate_initial(1.0, 2.5, &x, &phi, &m).unwrap() - 1.5).abs() < 1e-12);
        let mass0 = phi.mass(&m);
        let lattice = Lattice::new(vec![
            Axis::new(2.0, 3.0, 11),
            Axis::new(1.2, 1.8, 13),
            Axis::new(1.0, 2.0, 5),
            Axis::new(1.0, 2.0, 5),
        ]);
        let mass1 = total_population(0.99, &phi, &empty_birth(1.0), &m, &QuadSpec::Lagrangian { resolution: 2 }).unwrap();
        assert!((mass1 / mass0 - 1.0).abs() < 1e-12);
        let eul = total_population(1.0, &phi, &BirthFunction::zero_grid(&m, 1.0), &m, &QuadSpec::Eulerian(lattice));
        assert!(matches!(eul, Ok(v) if (v / mass0 - 1.0).abs() < 1e-9), "{eul:?}");
    }

    #[test]
    fn translation_when_divergence_free_and_lossless() {
        let spec = ModelSpec::doubling(1, 0.5, 2.0, 1.0, 0.0)
            .with_size_velocity(SizeVelocity::Linear { rate: 0.2 })
            .with_aux_velocities(vec![AuxVelocity::Unit])
            .with_division(DivisionRule::None, HazardSpec::None);
        let m = validate_model(spec).unwrap();
        let phi = InitialCohort::Gaussian(GaussianBump { mass: 1.0, mean: vec![1.0, 1.0, 1.0], sd: vec![0.3, 0.1, 0.2] });
        let x = StateVector::new(1.1, vec![1.4]);
        let got = propagate_initial(0.5, 1.6, &x, &phi, &m).unwrap();
        assert!((got - phi.density(&m, 1.1, &[1.0, 0.9])).abs() < 1e-14);
    }

    #[test]
    fn birth_branch_at_age_zero_is_birth_function() {
        let m = reference();
        let atom = CohortAtom { birth_time: 1.0, birth_state: StateVector::new(1.0, vec![0.5, 0.5]), weight: 2.0 };
        let b = BirthFunction::Atomic { atoms: vec![atom], horizon: 3.0 };
        let phi = InitialCohort::Atoms { atoms: vec![] };
        assert_eq!(evaluate_density(1.0, 0.0, &StateVector::new(1.0, vec![0.5, 0.5]), &phi, &b, &m).unwrap(), 2.0);
        // on the atom's forward characteristic
        let on = StateVector::new(2f64.powf(0.5), vec![1.0, 1.0]);
        assert!((evaluate_density(1.5, 0.5, &on, &phi, &b, &m).unwrap() - 2.0).abs() < 1e-12);
        let off = StateVector::new(1.3, vec![1.0, 1.0]);
        assert_eq!(evaluate_density(1.5, 0.5, &off, &phi, &b, &m).unwrap(), 0.0);
        assert!(matches!(
            evaluate_density(4.0, 0.5, &on, &phi, &b, &m),
            Err(Error::BirthFunctionUndefined { .. })
        ));
    }

    #[test]
    fn death_only_mass_decays_exponentially() {
        let m = sterile(0.2, 0.3, 1);
        let phi = InitialCohort::Atoms {
            atoms: vec![
                InitialAtom { age: 0.0, state: StateVector::new(0.6, vec![0.0]), weight: 2.0 },
                InitialAtom { age: 0.3, state: StateVector::new(0.8, vec![0.2]), weight: 1.0 },
            ],
        };
        for t in [0.0, 0.5, 1.7] {
            let mass = total_population(t, &phi, &empty_birth(2.0), &m, &QuadSpec::default()).unwrap();
            assert!((mass - 3.0 * (-0.3 * t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn semigroup_composes_exactly_for_closed_forms() {
        let m = sterile(LN_2, 0.0, 2);
        let phi = box_cohort();
        let sample = Lattice::new(vec![
            Axis::new(0.0, 3.0, 7),
            Axis::new(0.5, 2.0, 6),
            Axis::new(0.0, 2.0, 4),
            Axis::new(0.0, 2.0, 4),
        ]);
        let r = verify_semigroup(&phi, 0.3, 0.3, &sample, &m).unwrap();
        assert!(r.max_abs_deviation < 1e-8);
        let r0 = verify_semigroup(&phi, 0.3, 0.0, &sample, &m).unwrap();
        assert_eq!(r0.max_abs_deviation, 0.0);
        assert!(r.continuity_decreasing());
    }

    #[test]
    fn generator_of_pure_death_is_scalar() {
        let spec = ModelSpec::doubling(0, 0.5, 2.0, 1.0, 0.4)
            .with_size_velocity(SizeVelocity::Linear { rate: 1e-9 })
            .with_division(DivisionRule::None, HazardSpec::None);
        let m = validate_model(spec).unwrap();
        let phi = InitialCohort::Gaussian(GaussianBump { mass: 1.0, mean: vec![1e6, 1.2], sd: vec![1e9, 0.2] });
        let x = StateVector::new(1.1, vec![]);
        let a = generator(&phi, 2.0, &x, &m).unwrap();
        let v = phi.density(&m, 2.0, &[1.1]);
        assert!((a + 0.4 * v).abs() < 1e-6 * v);
    }

    #[test]
    fn generator_needs_smooth_hazard() {
        let phi = InitialCohort::Gaussian(GaussianBump { mass: 1.0, mean: vec![1.0; 4], sd: vec![0.2; 4] });
        let sample = Lattice::new(vec![Axis::new(0.5, 1.0, 2); 4]);
        assert_eq!(verify_generator(&phi, &sample, &reference(), &[0.01]).unwrap_err(), Error::RequiresSmoothHazard);
    }

    #[test]
    fn cohort_json_round_trip() {
        let phi = box_cohort();
        let text = serde_json::to_string(&phi).unwrap();
        let back: InitialCohort = serde_json::from_str(&text).unwrap();
        assert_eq!(back, phi);
        let uniform: InitialCohort = serde_json::from_str(
            r#"{"kind":"grid","axes":[{"lo":0,"hi":1,"count":2},{"lo":0.6,"hi":0.9,"count":2}],"values":2.0}"#,
        )
        .unwrap();
        assert!((uniform.mass(&sterile(1.0, 0.0, 0)) - 0.6).abs() < 1e-15);
    }
}
