use multipop::cohort::{GridDensity, GridValues, InitialCohort};
use multipop::mc::{agents_from_cohort, simulate, McOptions};
use multipop::numerics::Axis;
use multipop::renewal::{solve_series, BirthFunction, BirthGrid, GridSpec, SeriesOptions};
use multipop::{validate_model, DivisionRule, HazardSpec, ModelSpec, ValidatedModel};

const ALPHA: f64 = 0.5;
const MU_D: f64 = 0.05;
const B0: f64 = 1.0;

fn model() -> ValidatedModel {
    validate_model(
        ModelSpec::doubling(1, 0.5, 2.0, ALPHA, MU_D).with_division(DivisionRule::Hazard, HazardSpec::Constant { b0: B0 }),
    )
    .unwrap()
}

/// Uniform on age [0, 0.5], size [0.8, 1.0], aux [0, 0.5].
fn slab() -> InitialCohort {
    InitialCohort::Grid(
        GridDensity::new(
            vec![Axis::new(0.0, 0.5, 6), Axis::new(0.8, 1.0, 21), Axis::new(0.0, 0.5, 6)],
            GridValues::Uniform(1.0),
        )
        .unwrap(),
    )
}

fn grid_of(b: &BirthFunction) -> &BirthGrid {
    match b {
        BirthFunction::Grid(g) => g,
        _ => panic!("expected a lattice birth function"),
    }
}

/// Births in `(lo, hi]` from the lattice: trapezoid in time over the nodes.
fn births_between(g: &BirthGrid, lo: f64, hi: f64) -> f64 {
    let profile = g.profile();
    let dt = g.times.step();
    (0..g.times.count)
        .map(|i| {
            let t = g.times.node(i);
            let w = if (t - lo).abs() < 1e-9 || (t - hi).abs() < 1e-9 { 0.5 * dt } else { dt };
            if t >= lo - 1e-9 && t <= hi + 1e-9 { profile[i] * w } else { 0.0 }
        })
        .sum()
}

/// Newborns from the founders alone in `(0, t]`, by direct integration over
/// the initial size. With a constant hazard only the size matters.
fn first_generation_births(t: f64) -> f64 {
    let volume = 0.5 * 0.5;
    let n = 4000;
    let h = 0.2 / n as f64;
    let mut total = 0.0;
    for k in 0..n {
        let x0 = 0.8 + (k as f64 + 0.5) * h;
        let t_in = (1.0 / x0).ln() / ALPHA;
        let t_out = (2.0 / x0).ln() / ALPHA;
        let end = t.min(t_out);
        if end <= t_in {
            continue;
        }
        // ∫ b0 e^{−μ_d s − b0 (s − t_in)} ds over [t_in, end]
        let rate = B0 + MU_D;
        let divided = B0 * (-MU_D * t_in).exp() * (1.0 - (-rate * (end - t_in)).exp()) / rate;
        total += 2.0 * divided * h;
    }
    total * volume
}

#[test]
fn first_generation_matches_size_integral() {
    let m = model();
    let grid = GridSpec { dt: 0.01, size_nodes: 31, aux_nodes: 21, aux_max: 3.0 };
    let sol = solve_series(&slab(), &SeriesOptions::grid(2.5, grid), &m).unwrap();
    let phi = grid_of(&sol.phi);
    for t in [0.5, 1.0, 1.5, 2.0] {
        let got = births_between(phi, 0.0, t);
        let want = first_generation_births(t);
        assert!((got - want).abs() < 5e-3 * want.max(1e-3), "t = {t}: {got} vs {want}");
    }
}

#[test]
fn lattice_births_match_simulation() {
    let m = model();
    let grid = GridSpec { dt: 0.01, size_nodes: 61, aux_nodes: 5, aux_max: 3.0 };
    let horizon = 3.0;
    let sol = solve_series(&slab(), &SeriesOptions::grid(horizon, grid), &m).unwrap();
    let birth = grid_of(&sol.birth);

    let census = vec![0.0, 0.75, 1.5, 2.25, 3.0];
    let scale = 200_000.0;
    let founders = agents_from_cohort(&slab(), &m, scale, 11).unwrap();
    let runs = simulate(&m, &founders, &McOptions::at(census.clone(), 11, 16)).unwrap();
    let per_run = founders.len() as f64 / (slab().mass(&m));
    for k in 1..census.len() {
        let samples: Vec<f64> = runs.iter().map(|r| r.births[k] as f64 / per_run).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let stderr = (var / samples.len() as f64).sqrt();
        let grid_births = births_between(birth, census[k - 1], census[k]);
        let gap = (grid_births - mean).abs();
        assert!(gap < 4.0 * stderr + 0.005 * mean, "interval {k}: lattice {grid_births}, simulation {mean} +/- {stderr}");
    }
}
