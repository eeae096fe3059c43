//! Cross-module property suite behind the `verify` subcommand.
//!
//! Checks that need a smooth hazard or no reproduction at all run on
//! companions of the configured model: same growth law and death rate, with
//! the division rule swapped out.

use rand::Rng;
use serde::Serialize;

use crate::characteristics::{flow, TAU_FLOW};
use crate::cohort::{
    total_population, verify_generator, verify_semigroup, GaussianBump, GridDensity, GridValues, InitialCohort,
    QuadSpec,
};
use crate::error::{Error, Result};
use crate::kinetics::{jacobian, jacobian_fd};
use crate::mc::{estimate_growth_rate, simulate_with, stable_cohort, McOptions};
use crate::model::{validate_model, DivisionRule, HazardSpec, ModelSpec, StateVector, ValidatedModel};
use crate::numerics::{Axis, Lattice};
use crate::renewal::{series_bound_report, solve_series, bound_horizon, BirthFunction, GridSpec, SeriesOptions};
use crate::rng::agent_rng;
use crate::spectral::{asymptotic_profile, dominant_eigenvalue, EigenOptions, Method};
use crate::velocity::{AuxVelocity, SizeVelocity};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiouvilleRow {
    pub model: &'static str,
    pub theta: f64,
    pub age: f64,
    pub state: Vec<f64>,
    pub jacobian: f64,
    pub jacobian_fd: f64,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub lambda0: Option<f64>,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub liouville: Vec<LiouvilleRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub liouville_points: usize,
    /// Replicates and founders for the simulator cross-check; zero skips it.
    pub mc_replicates: usize,
    pub mc_agents: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 1, liouville_points: 100, mc_replicates: 8, mc_agents: 2000 }
    }
}

fn check(name: &'static str, value: f64, threshold: f64, passed: bool, detail: String) -> Check {
    Check { name, passed: passed && value.is_finite(), value, threshold, detail }
}

fn failed(name: &'static str, threshold: f64, e: Error) -> Check {
    Check { name, passed: false, value: f64::NAN, threshold, detail: e.to_string() }
}

fn companion(spec: &ModelSpec, division: DivisionRule, hazard: HazardSpec, mu_d: f64) -> Result<ValidatedModel> {
    let mut s = spec.clone();
    s.division = division;
    s.hazard = hazard;
    s.mu_d = mu_d;
    validate_model(s)
}

/// Three state variables with every velocity coupled; no closed form.
pub fn coupled_model() -> ValidatedModel {
    validate_model(
        ModelSpec::doubling(2, 0.5, 2.0, 0.7, 0.0)
            .with_size_velocity(SizeVelocity::AuxModulated { gamma: 0.2, index: 0 })
            .with_aux_velocities(vec![
                AuxVelocity::Saturating { rate: 0.8, k: 0.5 },
                AuxVelocity::SizeCoupled { base: 0.3, gain: 0.6 },
            ])
            .with_division(DivisionRule::None, HazardSpec::None),
    )
    .expect("companion model is valid")
}

pub fn liouville_rows(
    model: &ValidatedModel,
    label: &'static str,
    n: usize,
    seed: u64,
) -> Result<Vec<LiouvilleRow>> {
    let mut rng = agent_rng(seed, 0x11, 0);
    let h = 1e-4;
    let (lo, hi) = (model.x_min(), model.x_max());
    let mut rows = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        attempts += 1;
        if attempts > 100 * n {
            return Err(Error::InsufficientData);
        }
        let theta = rng.gen_range(0.05..1.0);
        let age0 = rng.gen_range(0.0..1.0);
        let y = StateVector::new(
            rng.gen_range(lo + 2.0 * h..lo + 0.5 * (hi - lo)),
            (0..model.m()).map(|_| rng.gen_range(0.0..2.0)).collect(),
        );
        let Ok(end) = flow(theta, age0, &y, model) else { continue };
        let x = end.state;
        if x.size + 2.0 * h > hi || x.size - h < lo {
            continue;
        }
        let j = jacobian(theta, end.age, &x, model)?;
        let fd = jacobian_fd(theta, end.age, &x, model, h)?;
        rows.push(LiouvilleRow {
            model: label,
            theta,
            age: end.age,
            state: x.coords(),
            jacobian: j,
            jacobian_fd: fd,
            relative_residual: ((j - fd) / j).abs(),
        });
    }
    Ok(rows)
}

/// Gaussian cohort in the interior of the birth region.
fn interior_gaussian(model: &ValidatedModel) -> InitialCohort {
    let size = 0.5 * (model.x_min() + 0.5 * model.x_max());
    let spread = 0.1 * (0.5 * model.x_max() - model.x_min());
    let mut mean = vec![0.6, size];
    let mut sd = vec![0.1, spread];
    mean.extend(std::iter::repeat(1.0).take(model.m()));
    sd.extend(std::iter::repeat(0.2).take(model.m()));
    InitialCohort::Gaussian(GaussianBump { mass: 1.0, mean, sd })
}

/// Uniform box straddling `x_M/2` with unit state volume when `m ≥ 1`, so
/// `Ω₁ ≥ 1`.
fn unit_box(model: &ValidatedModel) -> InitialCohort {
    let half = 0.5 * model.x_max();
    let w = 0.25f64.min(half - model.x_min());
    let mut axes = vec![Axis::new(0.0, 0.5, 3), Axis::new(half - 0.5 * w, half + 0.5 * w, 3)];
    axes.extend((0..model.m()).map(|k| Axis::new(0.0, if k == 0 { 1.0 / w } else { 1.0 }, 3)));
    InitialCohort::Grid(GridDensity::new(axes, GridValues::Uniform(1.0)).expect("box cohort"))
}

pub fn run_verify(spec: &ModelSpec, opts: &VerifyOptions) -> Result<VerifyReport> {
    let model = validate_model(spec.clone())?;
    let mut checks = Vec::new();
    let mut lambda0 = None;

    // growth rate: closed form against the generic root finder
    if model.is_sterile() {
        checks.push(failed("lambda_cross_check", 1e-8, Error::NoBracket));
    } else {
        let eig = EigenOptions {
            tol: 1e-9,
            discretization: crate::spectral::Discretization {
                grid: GridSpec { dt: 0.02, size_nodes: 21, aux_nodes: 7, aux_max: 3.0 },
                age_max: None,
            },
            ..EigenOptions::default()
        };
        match (dominant_eigenvalue(&model, &eig), dominant_eigenvalue(&model, &EigenOptions { force_generic: true, ..eig.clone() })) {
            (Ok(a), Ok(b)) => {
                lambda0 = Some(a.lambda0);
                let diff = (a.lambda0 - b.lambda0).abs();
                checks.push(check(
                    "lambda_cross_check",
                    diff,
                    1e-8,
                    diff < 1e-8,
                    format!("lambda0 = {} ({}), generic = {}", a.lambda0, a.method.as_str(), b.lambda0),
                ));
                let tol = if a.method == Method::PowerIteration { 1e-6 } else { 1e-10 };
                checks.push(check("eigen_residual", a.residual, tol, a.residual < tol, format!("{:?}", a.method)));
                if let Some(p) = a.undamped_lambda {
                    checks.push(check(
                        "closed_form_rate",
                        (a.lambda0 - (p - model.mu_d())).abs(),
                        1e-10,
                        (a.lambda0 - (p - model.mu_d())).abs() < 1e-10,
                        format!("ln2/a* = {p}, discrepancy flagged: {}", a.discrepancy_flag),
                    ));
                }
                if model.is_dirac() {
                    checks.push(profile_check(&model, &a)?);
                    if opts.mc_replicates > 0 {
                        checks.push(mc_check(&model, a.lambda0, opts));
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => checks.push(failed("lambda_cross_check", 1e-8, e)),
        }
    }

    // Liouville: analytic/ODE Jacobian against finite differences
    let mut liouville = liouville_rows(&model, "configured", opts.liouville_points, opts.seed)?;
    liouville.extend(liouville_rows(&coupled_model(), "coupled", opts.liouville_points, opts.seed)?);
    let worst = liouville.iter().map(|r| r.relative_residual).fold(0.0, f64::max);
    checks.push(check("liouville", worst, 1e-6, worst < 1e-6, format!("{} points", liouville.len())));

    let sterile = companion(spec, DivisionRule::None, HazardSpec::None, spec.mu_d)?;
    let gauss = interior_gaussian(&sterile);

    // semigroup and strong continuity
    let (lo, hi) = gauss.support_box(&sterile);
    let sample = Lattice::new(
        lo.iter()
            .zip(&hi)
            .enumerate()
            .map(|(k, (&l, &h))| if k == 0 { Axis::new(l + 0.6, h + 0.6, 10) } else { Axis::new(l, h, 10) })
            .collect(),
    );
    match verify_semigroup(&gauss, 0.3, 0.2, &sample, &sterile) {
        Ok(r) => {
            checks.push(check(
                "semigroup",
                r.max_abs_deviation,
                1e-8,
                r.max_abs_deviation < 1e-8,
                format!("{} points", r.points),
            ));
            let l1: Vec<f64> = r.continuity.iter().map(|c| c.l1).collect();
            checks.push(check(
                "strong_continuity",
                l1[l1.len() - 1],
                l1[0],
                r.continuity_decreasing(),
                format!("L1 at h = 0.1, 0.01, 0.001: {l1:?}"),
            ));
        }
        Err(e) => checks.push(failed("semigroup", 1e-8, e)),
    }

    // generator: first-order difference quotients
    let gsample = Lattice::new(
        lo.iter().zip(&hi).map(|(&l, &h)| Axis::new(0.5 * (l + h) - 0.1 * (h - l), 0.5 * (l + h) + 0.1 * (h - l), 3)).collect(),
    );
    match verify_generator(&gauss, &gsample, &sterile, &[1e-2, 5e-3, 2.5e-3]) {
        Ok(r) => {
            let ok = r.ratios.iter().all(|q| (0.4..=0.6).contains(q));
            let worst = r.ratios.iter().map(|q| (q - 0.5).abs()).fold(0.0, f64::max);
            checks.push(check("generator", worst, 0.1, ok, format!("ratios {:?}", r.ratios)));
        }
        Err(e) => checks.push(failed("generator", 0.1, e)),
    }

    // series bound on a constant-hazard companion
    let b0 = match spec.hazard {
        HazardSpec::Constant { b0 } => b0,
        _ => 1.0,
    };
    let hazard = companion(spec, DivisionRule::Hazard, HazardSpec::Constant { b0 }, spec.mu_d)?;
    let phi = unit_box(&hazard);
    let bound = bound_horizon(&phi, &hazard).and_then(|t| {
        let grid = GridSpec { dt: t / 20.0, size_nodes: 11, aux_nodes: 5, aux_max: 4.0 };
        let sol = solve_series(&phi, &SeriesOptions::grid(t, grid), &hazard)?;
        Ok((series_bound_report(&sol.report, &phi, &hazard)?, sol.report))
    });
    match bound {
        Ok((b, report)) => {
            let worst = b.rows.iter().map(|r| r.norm / r.bound).fold(0.0, f64::max);
            checks.push(check(
                "series_bound",
                worst,
                1.0,
                b.all_within() && report.converged,
                format!("T = {}, {} terms", b.window, b.rows.len()),
            ));
            checks.push(check(
                "grid_fixed_point",
                report.fixed_point_residual,
                1e-8,
                report.fixed_point_residual < 1e-8,
                String::new(),
            ));
        }
        Err(e) => checks.push(failed("series_bound", 1.0, e)),
    }

    // conservation with μ ≡ 0, over a window in which nobody reaches x_M
    let closed = companion(spec, DivisionRule::None, HazardSpec::None, 0.0)?;
    let gauss0 = interior_gaussian(&closed);
    let (_, top) = gauss0.support_box(&closed);
    let window = 2f64.min(0.9 * crate::characteristics::time_to_size(&closed, &top[1..], closed.x_max())?);
    let atoms = InitialCohort::atom(0.0, StateVector::new(top[1], top[2..].to_vec()), 1.0);
    let mut drift = 0.0f64;
    for (phi, birth) in [
        (&atoms, BirthFunction::Atomic { atoms: vec![], horizon: window }),
        (&gauss0, BirthFunction::zero_grid(&closed, window)),
    ] {
        let m0 = total_population(0.0, phi, &birth, &closed, &QuadSpec::default())?;
        for k in 1..=8 {
            let m = total_population(window * k as f64 / 8.0, phi, &birth, &closed, &QuadSpec::default())?;
            drift = drift.max((m / m0 - 1.0).abs());
        }
    }
    checks.push(check("conservation", drift, 1e-6, drift < 1e-6, format!("t in [0, {window}]")));

    Ok(VerifyReport { lambda0, checks, liouville })
}

fn profile_check(model: &ValidatedModel, spectral: &crate::spectral::SpectralResult) -> Result<Check> {
    let birth = match &spectral.psi {
        crate::spectral::Psi::Atoms(a) => a[0].state.clone(),
        _ => return Err(Error::Unsupported("profile check needs atoms".into())),
    };
    let phi = InitialCohort::atom(0.0, birth, 1.0);
    let a_star = crate::characteristics::division_age_for(model, &spectral_state(spectral))?;
    let sol = solve_series(&phi, &SeriesOptions::atomic(5.5 * a_star), model)?;
    let BirthFunction::Atomic { atoms, .. } = &sol.birth else { unreachable!() };
    let worst = atoms
        .iter()
        .map(|a| (asymptotic_profile(spectral, a.birth_time).mass() / a.weight - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(check("asymptotic_profile", worst, 1e-9, worst < 1e-9 && sol.report.fixed_point_residual < 1e-12, format!("{} generations", atoms.len())))
}

fn spectral_state(s: &crate::spectral::SpectralResult) -> Vec<f64> {
    match &s.psi {
        crate::spectral::Psi::Atoms(a) => a[0].state.coords(),
        _ => Vec::new(),
    }
}

fn mc_check(model: &ValidatedModel, lambda0: f64, opts: &VerifyOptions) -> Check {
    let run = || -> Result<(f64, f64)> {
        let start = StateVector::new(0.5 * (model.x_min() + 0.5 * model.x_max()), vec![0.0; model.m()]);
        let a_star = crate::characteristics::division_age_for(model, &start.coords())?;
        let t_end = 8.0 * a_star;
        let trs = simulate_with(
            model,
            |r| stable_cohort(model, &start, opts.mc_agents, opts.seed, r),
            &McOptions::uniform(t_end, a_star / 4.0, opts.seed, opts.mc_replicates),
        )?;
        let g = estimate_growth_rate(&trs, (3.0 * a_star, t_end))?;
        Ok((g.lambda_hat, g.stderr))
    };
    match run() {
        Ok((l, se)) => check(
            "mc_growth_rate",
            (l - lambda0).abs() / se.max(1e-300),
            3.0,
            (l - lambda0).abs() < 3.0 * se.max(TAU_FLOW),
            format!("lambda_hat = {l} ± {se}"),
        ),
        Err(e) => failed("mc_growth_rate", 3.0, e),
    }
}
