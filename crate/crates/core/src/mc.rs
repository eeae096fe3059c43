//! Individual-based stochastic simulation of the same population, event by
//! event: deterministic growth along characteristics, exponential deaths,
//! division by rule (exact times) or by thinning against the hazard.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::InitialCohort;
use crate::characteristics::{advance, division_age_for, time_to_size, TAU_FLOW};
use crate::error::{Error, Result};
use crate::model::{DivisionRule, StateVector, ValidatedModel};
use crate::numerics::ode::OdeOptions;
use crate::rng::{agent_rng, daughter, founder};
use crate::spectral::atomic_orbit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub age: f64,
    pub state: StateVector,
    /// Size at birth, which fixes the division size under doubling and adder.
    pub birth_size: f64,
}

impl Agent {
    pub fn newborn(state: StateVector) -> Self {
        Self { age: 0.0, birth_size: state.size, state }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins.max(1)] }
    }

    /// Values outside `[lo, hi]` land in the edge bins.
    pub fn add(&mut self, v: f64) {
        let n = self.counts.len();
        let k = ((v - self.lo) / (self.hi - self.lo) * n as f64).floor();
        let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(n - 1) };
        self.counts[k] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `Σ |p_k − q_k|` between the normalized histograms.
    pub fn shape_distance(&self, other: &Histogram) -> f64 {
        let (s, t) = (self.total() as f64, other.total() as f64);
        if s == 0.0 || t == 0.0 {
            return if s == t { 0.0 } else { 2.0 };
        }
        self.counts.iter().zip(&other.counts).map(|(&a, &b)| (a as f64 / s - b as f64 / t).abs()).sum()
    }
}

/// Population snapshot at one census time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub t: f64,
    pub count: u64,
    pub age: Histogram,
    /// Size first, then each auxiliary coordinate.
    pub coords: Vec<Histogram>,
}

impl Census {
    pub fn merge(&mut self, other: &Census) {
        self.count += other.count;
        self.age.merge(&other.age);
        for (a, b) in self.coords.iter_mut().zip(&other.coords) {
            a.merge(b);
        }
    }

    /// Largest `L¹` distance over the age and coordinate histograms.
    pub fn shape_distance(&self, other: &Census) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a.shape_distance(b))
            .fold(self.age.shape_distance(&other.age), f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Division,
    Death,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub lineage: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub replicate: u64,
    pub census: Vec<Census>,
    /// Newborns in `(t_{k−1}, t_k]`; entry 0 is always zero.
    pub births: Vec<u64>,
    pub deaths: Vec<u64>,
    /// Cells that reached `x_M` without dividing.
    pub exits: Vec<u64>,
    /// Time-ordered, when requested.
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.census.iter().map(|c| c.t).collect()
    }

    pub fn counts(&self) -> Vec<u64> {
        self.census.iter().map(|c| c.count).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McOptions {
    /// Increasing; the last one ends the run.
    pub census_times: Vec<f64>,
    pub seed: u64,
    pub replicates: usize,
    #[serde(default = "default_cap")]
    pub agent_cap: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Histogram ranges; defaults follow the model.
    #[serde(default)]
    pub age_max: Option<f64>,
    #[serde(default)]
    pub aux_max: Option<f64>,
    #[serde(default)]
    pub record_events: bool,
}

fn default_cap() -> u64 {
    10_000_000
}

fn default_bins() -> usize {
    20
}

impl McOptions {
    /// Census every `dt` on `[0, t_end]`.
    pub fn uniform(t_end: f64, dt: f64, seed: u64, replicates: usize) -> Self {
        let n = (t_end / dt).round().max(1.0) as usize;
        let times = (0..=n).map(|k| (k as f64 * dt).min(t_end)).collect();
        Self::at(times, seed, replicates)
    }

    pub fn at(census_times: Vec<f64>, seed: u64, replicates: usize) -> Self {
        Self {
            census_times,
            seed,
            replicates,
            agent_cap: default_cap(),
            bins: default_bins(),
            age_max: None,
            aux_max: None,
            record_events: false,
        }
    }

    fn check(&self) -> Result<()> {
        let t = &self.census_times;
        if t.is_empty() || !(t[t.len() - 1] > 0.0) || t[0] < 0.0 || t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("census times must be non-negative, increasing and end after 0".into()));
        }
        if self.replicates == 0 || self.bins == 0 {
            return Err(Error::Config("replicates and bins must be positive".into()));
        }
        Ok(())
    }
}

struct Live {
    t0: f64,
    agent: Agent,
    lineage: u64,
}

struct Runner<'a> {
    model: &'a ValidatedModel,
    opts: &'a McOptions,
    replicate: u64,
    age_max: f64,
    aux_max: f64,
    ode: OdeOptions,
}

fn default_age_max(model: &ValidatedModel) -> f64 {
    if let Some(a) = model.division_age() {
        return a;
    }
    match model.closed_flow() {
        Some(cf) => cf.time_between_sizes(model.x_min(), model.x_max()),
        None => 10.0,
    }
}

impl Runner<'_> {
    fn empty_census(&self, t: f64) -> Census {
        let bins = self.opts.bins;
        let mut coords = vec![Histogram::new(self.model.x_min(), self.model.x_max(), bins)];
        coords.extend((0..self.model.m()).map(|_| Histogram::new(0.0, self.aux_max, bins)));
        Census { t, count: 0, age: Histogram::new(0.0, self.age_max, bins), coords }
    }

    fn state_after(&self, agent: &Agent, theta: f64) -> Result<Vec<f64>> {
        if theta == 0.0 {
            return Ok(agent.state.coords());
        }
        Ok(advance(self.model, theta, agent.age, &agent.state.coords(), &self.ode, false)?.coords)
    }

    fn time_to(&self, x: &[f64], target: f64) -> Result<f64> {
        match time_to_size(self.model, x, target) {
            Err(Error::ExceedsMaxSize) => Ok(f64::INFINITY),
            r => r,
        }
    }

    /// Time until the agent's own division, `None` if it never divides.
    fn division_time(&self, agent: &Agent, rng: &mut ChaCha8Rng, limit: f64) -> Result<Option<f64>> {
        let x = agent.state.coords();
        if let Some(target) = self.model.division_size(agent.birth_size) {
            if !self.model.is_dirac() {
                return Ok(None);
            }
            if x[0] >= target {
                return Err(Error::InvalidCohort(format!(
                    "agent of size {} is at or past its division size {target}",
                    x[0]
                )));
            }
            return Ok(Some(self.time_to(&x, target)?));
        }
        if self.model.division() != DivisionRule::Hazard {
            return Ok(None);
        }
        let bound = self.model.hazard_bound()?;
        if bound <= 0.0 {
            return Ok(None);
        }
        // the hazard only acts in Ω_r; a Poisson clock is memoryless, so start there
        let mut tau = self.time_to(&x, 0.5 * self.model.x_max())?;
        let clock = Exp::new(bound).map_err(|e| Error::Config(e.to_string()))?;
        loop {
            tau += clock.sample(rng);
            if tau >= limit {
                return Ok(None);
            }
            let beta = self.model.hazard_rate(agent.age + tau)?;
            if rng.gen::<f64>() * bound < beta {
                return Ok(Some(tau));
            }
        }
    }

    fn run(&self, initial: &[Agent]) -> Result<Trajectory> {
        let times = &self.opts.census_times;
        let t_end = times[times.len() - 1];
        let n = times.len();
        let mut census: Vec<Census> = times.iter().map(|&t| self.empty_census(t)).collect();
        let (mut births, mut deaths, mut exits) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
        let mut events = Vec::new();
        let slot = |t: f64| times.partition_point(|&c| c < t).min(n - 1);

        let mut stack: Vec<Live> = initial
            .iter()
            .enumerate()
            .map(|(k, a)| Live { t0: times[0], agent: a.clone(), lineage: founder(k as u64) })
            .collect();
        stack.reverse();
        let mut created = stack.len() as u64;
        while let Some(Live { t0, agent, lineage }) = stack.pop() {
            let mut rng = agent_rng(self.opts.seed, self.replicate, lineage);
            let death = if self.model.mu_d() > 0.0 {
                Exp::new(self.model.mu_d()).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng)
            } else {
                f64::INFINITY
            };
            let exit = self.time_to(&agent.state.coords(), self.model.x_max())?;
            let limit = death.min(exit).min(t_end - t0);
            let division = self.division_time(&agent, &mut rng, limit)?;
            let (life, kind) = match division {
                Some(d) if d <= death && d <= exit => (d, EventKind::Division),
                _ if death <= exit => (death, EventKind::Death),
                _ => (exit, EventKind::Exit),
            };
            let end = t0 + life;
            for k in slot(t0)..n {
                let t = times[k];
                if t >= end || t > t_end {
                    break;
                }
                let x = self.state_after(&agent, t - t0)?;
                let c = &mut census[k];
                c.count += 1;
                c.age.add(agent.age + t - t0);
                for (h, v) in c.coords.iter_mut().zip(&x) {
                    h.add(*v);
                }
            }
            if end > t_end {
                continue;
            }
            if self.opts.record_events {
                events.push(Event { t: end, kind, lineage });
            }
            let k = slot(end);
            match kind {
                EventKind::Death => deaths[k] += 1,
                EventKind::Exit => exits[k] += 1,
                EventKind::Division => {
                    births[k] += 2;
                    let mut mother = self.state_after(&agent, life)?;
                    if let Some(size) = self.model.division_size(agent.birth_size) {
                        mother[0] = size;
                    }
                    let mother = StateVector::from_coords(&mother);
                    let child = self.model.daughter_state(&mother)?;
                    created += 2;
                    if created > self.opts.agent_cap {
                        return Err(Error::PopulationExplosion { cap: self.opts.agent_cap as usize });
                    }
                    for d in [1, 0] {
                        stack.push(Live { t0: end, agent: Agent::newborn(child.clone()), lineage: daughter(lineage, d) });
                    }
                }
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.lineage.cmp(&b.lineage)));
        Ok(Trajectory { seed: self.opts.seed, replicate: self.replicate, census, births, deaths, exits, events })
    }
}

/// Independent replicates started from the same initial agents.
pub fn simulate(model: &ValidatedModel, initial: &[Agent], opts: &McOptions) -> Result<Vec<Trajectory>> {
    simulate_with(model, |_| Ok(initial.to_vec()), opts)
}

/// Replicates whose founders are drawn per replicate by `founders(replicate)`.
pub fn simulate_with<F>(model: &ValidatedModel, founders: F, opts: &McOptions) -> Result<Vec<Trajectory>>
where
    F: Fn(u64) -> Result<Vec<Agent>> + Sync,
{
    opts.check()?;
    let age_max = opts.age_max.unwrap_or_else(|| default_age_max(model));
    let aux_max = opts.aux_max.unwrap_or(2.0 * age_max);
    (0..opts.replicates as u64)
        .into_par_iter()
        .map(|replicate| {
            let initial = founders(replicate)?;
            for a in &initial {
                model.check_state(&a.state)?;
                if !(a.age >= 0.0) {
                    return Err(Error::InvalidCohort(format!("agent age {} is negative", a.age)));
                }
            }
            Runner { model, opts, replicate, age_max, aux_max, ode: OdeOptions::with_rtol(TAU_FLOW) }.run(&initial)
        })
        .collect()
}

pub fn census_distribution(trajectory: &Trajectory, t: f64) -> Result<&Census> {
    trajectory
        .census
        .iter()
        .find(|c| (c.t - t).abs() <= 1e-12 * t.abs().max(1.0))
        .ok_or(Error::TimeNotSampled { t })
}

/// Census at `t` summed over replicates.
pub fn pooled_census(trajectories: &[Trajectory], t: f64) -> Result<Census> {
    let mut it = trajectories.iter();
    let first = it.next().ok_or(Error::InsufficientData)?;
    let mut pooled = census_distribution(first, t)?.clone();
    for tr in it {
        pooled.merge(census_distribution(tr, t)?);
    }
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthEstimate {
    pub lambda_hat: f64,
    pub stderr: f64,
    pub slopes: Vec<f64>,
}

/// Least-squares slope of `ln(count)` on `window`, per replicate. With one
/// replicate the error is the regression standard error.
pub fn estimate_growth_rate(trajectories: &[Trajectory], window: (f64, f64)) -> Result<GrowthEstimate> {
    let mut slopes = Vec::with_capacity(trajectories.len());
    let mut single_se = f64::NAN;
    for tr in trajectories {
        let pts: Vec<(f64, f64)> = tr
            .census
            .iter()
            .filter(|c| c.t >= window.0 - 1e-12 && c.t <= window.1 + 1e-12)
            .map(|c| (c.t, c.count as f64))
            .collect();
        if pts.len() < 3 || pts.iter().any(|p| p.1 <= 0.0) {
            return Err(Error::InsufficientData);
        }
        let n = pts.len() as f64;
        let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let ym = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1.ln() - ym)).sum();
        let slope = sxy / sxx;
        let rss: f64 = pts.iter().map(|p| (p.1.ln() - ym - slope * (p.0 - tm)).powi(2)).sum();
        single_se = (rss / (n - 2.0) / sxx).sqrt();
        slopes.push(slope);
    }
    let r = slopes.len();
    if r == 0 {
        return Err(Error::InsufficientData);
    }
    let mean = slopes.iter().sum::<f64>() / r as f64;
    let stderr = if r == 1 {
        single_se
    } else {
        let var = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
        (var / r as f64).sqrt()
    };
    Ok(GrowthEstimate { lambda_hat: mean, stderr, slopes })
}

/// `n` agents drawn from the stable age distribution of a single-age
/// division model: density `∝ 2^{−a/a*}` on `[0, a*)`, states on the
/// characteristic of the orbit's fixed birth state.
pub fn stable_cohort(
    model: &ValidatedModel,
    birth: &StateVector,
    n: usize,
    seed: u64,
    replicate: u64,
) -> Result<Vec<Agent>> {
    let orbit = atomic_orbit(model, birth, 10_000)?;
    let b = orbit.state.coords();
    let a_star = division_age_for(model, &b)?;
    let opts = OdeOptions::with_rtol(TAU_FLOW);
    let mut rng = agent_rng(seed, replicate, u64::MAX);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let age = -a_star * (1.0 - 0.5 * u).log2();
            let x = advance(model, age, 0.0, &b, &opts, true)?.coords;
            Ok(Agent { age, state: StateVector::from_coords(&x), birth_size: b[0] })
        })
        .collect()
}

/// Founders for a cohort: `round(weight · scale)` copies of each atom, or
/// `round(mass · scale)` draws from a density.
pub fn agents_from_cohort(phi: &InitialCohort, model: &ValidatedModel, scale: f64, seed: u64) -> Result<Vec<Agent>> {
    phi.validate(model)?;
    let opts = OdeOptions::with_rtol(TAU_FLOW);
    let birth_size = |age: f64, x: &[f64]| -> Result<f64> {
        if age == 0.0 || !model.is_dirac() {
            return Ok(x[0]);
        }
        Ok(advance(model, -age, age, x, &opts, false)?.coords[0])
    };
    let mut rng = agent_rng(seed, u64::MAX - 1, 0);
    let mut out = Vec::new();
    let mut budget = 0usize;
    let mut spend = |n: usize| -> Result<()> {
        budget += 1;
        if budget > 1000 * n + 100_000 {
            return Err(Error::InvalidCohort("cohort has too little mass inside the domain to sample".into()));
        }
        Ok(())
    };
    match phi {
        InitialCohort::Atoms { atoms } => {
            for a in atoms {
                let b = birth_size(a.age, &a.state.coords())?;
                let n = (a.weight * scale).round() as usize;
                out.extend((0..n).map(|_| Agent { age: a.age, state: a.state.clone(), birth_size: b }));
            }
        }
        InitialCohort::Gaussian(g) => {
            let n = (phi.mass(model) * scale).round() as usize;
            let normals = g
                .mean
                .iter()
                .zip(&g.sd)
                .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::InvalidCohort(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            while out.len() < n {
                spend(n)?;
                let z: Vec<f64> = normals.iter().map(|d| d.sample(&mut rng)).collect();
                if phi.density(model, z[0], &z[1..]) > 0.0 {
                    out.push(Agent { age: z[0], state: StateVector::from_coords(&z[1..]), birth_size: birth_size(z[0], &z[1..])? });
                }
            }
        }
        InitialCohort::Grid(g) => {
            let n = (phi.mass(model) * scale).round() as usize;
            let peak = g.values().iter().cloned().fold(0.0, f64::max);
            let axes = &g.lattice().axes;
            while out.len() < n && peak > 0.0 {
                spend(n)?;
                let z: Vec<f64> = axes.iter().map(|a| rng.gen_range(a.lo..=a.hi)).collect();
                let v = phi.density(model, z[0], &z[1..]);
                if v > 0.0 && rng.gen::<f64>() * peak < v && model.check_state(&StateVector::from_coords(&z[1..])).is_ok() {
                    out.push(Agent { age: z[0], state: StateVector::from_coords(&z[1..]), birth_size: birth_size(z[0], &z[1..])? });
                }
            }
        }
    }
    Ok(out)
}

/// `n` newborns at `state`.
pub fn synchronized_cohort(state: &StateVector, n: usize) -> Vec<Agent> {
    vec![Agent::newborn(state.clone()); n]
}
