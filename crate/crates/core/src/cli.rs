//! Command-line front end: `validate`, `flow`, `simulate`, `renewal`,
//! `eigen`, `mc` and `verify`, each driven by a JSON run configuration.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 numerical
//! failure (including a failed `verify`), 3 I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::characteristics::flow_with;
use crate::cohort::{carry, evaluate_density, propagate_atoms, total_population, InitialCohort, QuadSpec};
use crate::config::{BackendKind, Format, McStart, Probe, RunConfig};
use crate::error::{Error, Result};
use crate::kinetics::kinetic_factors;
use crate::mc::{agents_from_cohort, estimate_growth_rate, simulate_with, stable_cohort, McOptions};
use crate::model::{validate_model, StateVector, ValidatedModel};
use crate::numerics::ode::OdeOptions;
use crate::numerics::{Axis, Lattice};
use crate::renewal::{series_bound_report, solve_series, Backend, BirthFunction, SeriesOptions};
use crate::spectral::{asymptotic_profile, dominant_eigenvalue, Discretization, EigenOptions, Psi};
use crate::verify::{run_verify, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "multipop", version, about = "Structured cell population dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["atomic", "grid"])]
    backend: Option<String>,
    /// End time for `simulate`, `renewal` and `mc`.
    #[arg(long = "t-end", global = true)]
    t_end: Option<f64>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Check the model and cohort.
    Validate,
    /// Evaluate characteristics at the configured probes.
    Flow,
    /// Density samples and total mass over time.
    Simulate,
    /// Solve the renewal equation by successive approximation.
    Renewal,
    /// Malthusian parameter and eigenfunction.
    Eigen,
    /// Individual-based simulation.
    Mc,
    /// Cross-module property suite.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Flow => "flow",
            Command::Simulate => "simulate",
            Command::Renewal => "renewal",
            Command::Eigen => "eigen",
            Command::Mc => "mc",
            Command::Verify => "verify",
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let quiet = cli.quiet;
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
        },
        None => execute(&cli),
    };
    match result {
        Ok(Outcome { summary, passed }) => {
            if !quiet {
                println!("{summary}");
            }
            if passed {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("multipop {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

struct Outcome {
    summary: String,
    passed: bool,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, passed: true }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: RunConfig,
    config_text: String,
    config_path: PathBuf,
    model: ValidatedModel,
    out: PathBuf,
    written: Vec<String>,
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let path = cli.config.clone().ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(b) = &cli.backend {
        cfg.numerics.backend = Some(b.parse()?);
    }
    if let Some(t) = cli.t_end {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("--t-end must be positive, got {t}")));
        }
        cfg.numerics.horizon = t;
        cfg.mc.t_end = t;
    }
    let model = validate_model(cfg.model.clone())?;
    cfg.initial_cohort.validate(&model)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let mut ctx = Ctx { cli, cfg, config_text: text, config_path: path, model, out, written: Vec::new() };
    let outcome = match cli.command {
        Command::Validate => cmd_validate(&mut ctx),
        Command::Flow => cmd_flow(&mut ctx),
        Command::Simulate => cmd_simulate(&mut ctx),
        Command::Renewal => cmd_renewal(&mut ctx),
        Command::Eigen => cmd_eigen(&mut ctx),
        Command::Mc => cmd_mc(&mut ctx),
        Command::Verify => cmd_verify(&mut ctx),
    }?;
    ctx.write_manifest()?;
    Ok(outcome)
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Ctx<'_> {
    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io(format!("{}: {e}", self.out.display())))
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        self.ensure_dir()?;
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        if !self.cfg.wants(Format::Csv) {
            return Ok(());
        }
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|&v| fmt_f64(v)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        self.write(name, &s)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.cfg.wants(Format::Json) {
            return Ok(());
        }
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    fn state_header(&self) -> Vec<String> {
        let mut h = vec!["size".to_string()];
        h.extend((1..=self.model.m()).map(|i| format!("aux_{i}")));
        h
    }

    fn backend(&self) -> Backend {
        let kind = self.cfg.numerics.backend.unwrap_or(if self.model.is_dirac() || self.model.is_sterile() {
            BackendKind::Atomic
        } else {
            BackendKind::Grid
        });
        match kind {
            BackendKind::Atomic => Backend::Atomic,
            BackendKind::Grid => Backend::Grid(self.cfg.numerics.grid()),
        }
    }

    fn series_options(&self) -> SeriesOptions {
        SeriesOptions {
            horizon: self.cfg.numerics.horizon,
            n_max: self.cfg.numerics.n_max,
            tol: self.cfg.numerics.tol,
            backend: self.backend(),
        }
    }

    fn write_manifest(&mut self) -> Result<()> {
        let hash = hex::encode(Sha256::digest(self.config_text.as_bytes()));
        let manifest = json!({
            "tool": "multipop",
            "version": env!("CARGO_PKG_VERSION"),
            "schema": self.cfg.schema,
            "subcommand": self.cli.command.name(),
            "config_path": self.config_path.display().to_string(),
            "config_sha256": hash,
            "seed": self.cfg.mc.seed,
            "threads": self.cli.threads.unwrap_or_else(rayon::current_num_threads),
            "backend": self.cfg.numerics.backend,
            "horizon": self.cfg.numerics.horizon,
            "mc_t_end": self.cfg.mc.t_end,
            "outputs": self.written,
        });
        self.ensure_dir()?;
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

fn cmd_validate(ctx: &mut Ctx) -> Result<Outcome> {
    let m = &ctx.model;
    let summary = format!(
        "valid: m = {}, birth region ({}, {}], reproductive region ({}, {}], division age {}, cohort mass {}",
        m.m(),
        m.x_min(),
        0.5 * m.x_max(),
        0.5 * m.x_max(),
        m.x_max(),
        m.division_age().map_or("state-dependent or none".to_string(), |a| a.to_string()),
        ctx.cfg.initial_cohort.mass(m),
    );
    let report = json!({
        "valid": true,
        "model": ctx.cfg.model,
        "division_age": m.division_age(),
        "mu_infinity": m.mu_infinity(),
        "cohort_mass": ctx.cfg.initial_cohort.mass(m),
    });
    ctx.json("validate.json", &report)?;
    Ok(Outcome::ok(summary))
}

fn default_probes(phi: &InitialCohort, model: &ValidatedModel) -> Vec<Probe> {
    let (age, state) = match phi {
        InitialCohort::Atoms { atoms } if !atoms.is_empty() => (atoms[0].age, atoms[0].state.clone()),
        InitialCohort::Gaussian(g) => (g.mean[0], StateVector::from_coords(&g.mean[1..])),
        _ => {
            let (lo, hi) = phi.support_box(model);
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
            if mid.iter().all(|v| v.is_finite()) {
                (mid[0], StateVector::from_coords(&mid[1..]))
            } else {
                (0.0, StateVector::new(0.5 * (model.x_min() + 0.5 * model.x_max()), vec![0.0; model.m()]))
            }
        }
    };
    [0.25, 0.5, 0.75].iter().map(|&theta| Probe { theta, age, state: state.clone() }).collect()
}

fn cmd_flow(ctx: &mut Ctx) -> Result<Outcome> {
    let probes = if ctx.cfg.probes.is_empty() {
        default_probes(&ctx.cfg.initial_cohort, &ctx.model)
    } else {
        ctx.cfg.probes.clone()
    };
    let opts = OdeOptions::with_rtol(ctx.cfg.numerics.tau_flow);
    let mut rows = Vec::new();
    for p in &probes {
        let r = flow_with(p.theta, p.age, &p.state, &ctx.model, &opts)?;
        let k = kinetic_factors(p.theta, r.age, &r.state, &ctx.model)?;
        let mut row = vec![p.theta, p.age];
        row.extend(p.state.coords());
        row.push(r.age);
        row.extend(r.state.coords());
        row.extend([k.survival, k.jacobian, r.steps as f64]);
        rows.push(row);
    }
    let sh = ctx.state_header();
    let mut header = vec!["theta".to_string(), "age".to_string()];
    header.extend(sh.iter().cloned());
    header.push("age_out".into());
    header.extend(sh.iter().map(|c| format!("{c}_out")));
    header.extend(["survival", "jacobian", "steps"].map(String::from));
    ctx.csv("flow.csv", &header, &rows)?;
    let last = rows.last().map(|r| r[2 + sh.len() + 1]).unwrap_or(f64::NAN);
    Ok(Outcome::ok(format!("flow: {} probes, last size {}", rows.len(), last)))
}

fn sample_times(horizon: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| horizon * k as f64 / (n - 1) as f64).collect()
}

fn cmd_simulate(ctx: &mut Ctx) -> Result<Outcome> {
    let phi = ctx.cfg.initial_cohort.clone();
    let model = ctx.model.clone();
    let horizon = ctx.cfg.numerics.horizon;
    let sol = solve_series(&phi, &ctx.series_options(), &model)?;
    let times = sample_times(horizon, ctx.cfg.numerics.sample_times);
    let mut mass_rows = Vec::new();
    for &t in &times {
        mass_rows.push(vec![t, total_population(t, &phi, &sol.birth, &model, &QuadSpec::default())?]);
    }
    let sh = ctx.state_header();
    let mut header = vec!["t".to_string(), "age".to_string()];
    header.extend(sh.iter().cloned());
    let mut rows = Vec::new();
    match (&phi, &sol.birth) {
        (InitialCohort::Atoms { atoms }, BirthFunction::Atomic { atoms: born, .. }) => {
            header.push("weight".into());
            for &t in &times {
                for a in propagate_atoms(t, atoms, &model)? {
                    let mut r = vec![t, a.age];
                    r.extend(a.state.coords());
                    r.push(a.weight);
                    rows.push(r);
                }
                for b in born.iter().filter(|b| b.birth_time <= t) {
                    if let Some((x, w)) = carry(&model, t - b.birth_time, 0.0, &b.birth_state.coords(), b.weight)? {
                        let mut r = vec![t, t - b.birth_time];
                        r.extend(x);
                        r.push(w);
                        rows.push(r);
                    }
                }
            }
        }
        _ => {
            header.push("density".into());
            let n = ctx.cfg.numerics.sample_nodes;
            let (_, hi) = phi.support_box(&model);
            let age_hi = (hi[0].max(0.0) + horizon).max(1e-9);
            let mut axes = vec![Axis::new(0.0, age_hi, n), Axis::new(model.x_min(), model.x_max(), n)];
            axes.extend((0..model.m()).map(|_| Axis::new(0.0, ctx.cfg.numerics.aux_max, n)));
            let lattice = Lattice::new(axes);
            for &t in &times {
                for p in lattice.points() {
                    if p[0] == t && t > 0.0 {
                        continue;
                    }
                    let d = evaluate_density(t, p[0], &StateVector::from_coords(&p[1..]), &phi, &sol.birth, &model)?;
                    let mut r = vec![t];
                    r.extend(p);
                    r.push(d);
                    rows.push(r);
                }
            }
        }
    }
    ctx.csv("density.csv", &header, &rows)?;
    ctx.csv("mass.csv", &["t".to_string(), "mass".to_string()], &mass_rows)?;
    let m0 = mass_rows[0][1];
    let m1 = mass_rows[mass_rows.len() - 1][1];
    Ok(Outcome::ok(format!("simulate: mass {m0} at t = 0, {m1} at t = {horizon}, {} density rows", rows.len())))
}

fn cmd_renewal(ctx: &mut Ctx) -> Result<Outcome> {
    let phi = ctx.cfg.initial_cohort.clone();
    let model = ctx.model.clone();
    let sol = solve_series(&phi, &ctx.series_options(), &model)?;
    let sh = ctx.state_header();
    let summary;
    match &sol.birth {
        BirthFunction::Atomic { atoms, .. } => {
            let mut header = vec!["birth_time".to_string()];
            header.extend(sh.iter().cloned());
            header.push("weight".into());
            let rows: Vec<Vec<f64>> = atoms
                .iter()
                .map(|a| {
                    let mut r = vec![a.birth_time];
                    r.extend(a.birth_state.coords());
                    r.push(a.weight);
                    r
                })
                .collect();
            ctx.csv("atoms.csv", &header, &rows)?;
            ctx.json("report.json", &sol.report)?;
            summary = format!(
                "renewal (atomic): {} atoms, total weight {}, residual {}",
                atoms.len(),
                atoms.iter().map(|a| a.weight).sum::<f64>(),
                sol.report.fixed_point_residual
            );
        }
        BirthFunction::Grid(g) => {
            let mut header = vec!["t".to_string()];
            header.extend(sh.iter().cloned());
            header.push("value".into());
            let mut rows = Vec::with_capacity(g.values.len());
            for i in 0..g.times.count {
                for j in 0..g.states.len() {
                    let mut r = vec![g.times.node(i)];
                    r.extend(g.states.point(j));
                    r.push(g.slice(i)[j]);
                    rows.push(r);
                }
            }
            ctx.csv("birth.csv", &header, &rows)?;
            let bound = series_bound_report(&sol.report, &phi, &model).ok();
            ctx.json("report.json", &json!({ "series": sol.report, "bound": bound }))?;
            summary = format!(
                "renewal (grid): {} terms, converged {}, residual {}{}",
                sol.report.term_norms.len(),
                sol.report.converged,
                sol.report.fixed_point_residual,
                bound.map_or(String::new(), |b| format!(", bound holds: {}", b.all_within())),
            );
        }
    }
    Ok(Outcome::ok(summary))
}

fn cmd_eigen(ctx: &mut Ctx) -> Result<Outcome> {
    let start = match &ctx.cfg.initial_cohort {
        InitialCohort::Atoms { atoms } if !atoms.is_empty() && atoms[0].age == 0.0 => Some(atoms[0].state.clone()),
        _ => None,
    };
    let opts = EigenOptions {
        tol: ctx.cfg.numerics.tol.max(1e-12),
        max_iters: ctx.cfg.numerics.n_max.max(1000),
        force_generic: false,
        discretization: Discretization { grid: ctx.cfg.numerics.grid(), age_max: ctx.cfg.numerics.age_max },
        start,
    };
    let r = dominant_eigenvalue(&ctx.model, &opts)?;
    let profile_mass = asymptotic_profile(&r, ctx.cfg.numerics.horizon).mass();
    ctx.json(
        "eigen.json",
        &json!({
            "lambda0": r.lambda0,
            "method": r.method,
            "residual": r.residual,
            "undamped_lambda": r.undamped_lambda,
            "discrepancy_flag": r.discrepancy_flag,
            "orbit_settled": r.orbit_settled,
            "profile_time": ctx.cfg.numerics.horizon,
            "profile_mass": profile_mass,
        }),
    )?;
    let sh = ctx.state_header();
    let mut header = sh.clone();
    let rows: Vec<Vec<f64>> = match &r.psi {
        Psi::Atoms(atoms) => {
            header.push("weight".into());
            atoms
                .iter()
                .map(|a| {
                    let mut row = a.state.coords();
                    row.push(a.weight);
                    row
                })
                .collect()
        }
        Psi::Grid { lattice, values } => {
            header.push("value".into());
            (0..lattice.len())
                .map(|j| {
                    let mut row = lattice.point(j);
                    row.push(values[j]);
                    row
                })
                .collect()
        }
    };
    ctx.csv("psi.csv", &header, &rows)?;
    let mut summary = format!("lambda0 = {} ({}), residual {:e}", r.lambda0, r.method.as_str(), r.residual);
    if r.discrepancy_flag {
        let _ = write!(summary, "; differs from ln2/a* = {} by the death rate", r.undamped_lambda.unwrap_or(f64::NAN));
    }
    Ok(Outcome::ok(summary))
}

fn cmd_mc(ctx: &mut Ctx) -> Result<Outcome> {
    let model = ctx.model.clone();
    let mc = ctx.cfg.mc.clone();
    let mut opts = McOptions::uniform(mc.t_end, mc.census_dt, mc.seed, mc.replicates);
    opts.agent_cap = mc.agent_cap;
    opts.bins = mc.bins;
    let phi = ctx.cfg.initial_cohort.clone();
    let trs = match mc.start {
        McStart::FromCohort { scale } => {
            let agents = agents_from_cohort(&phi, &model, scale, mc.seed)?;
            simulate_with(&model, |_| Ok(agents.clone()), &opts)?
        }
        McStart::Stable { agents } => {
            let birth = match &phi {
                InitialCohort::Atoms { atoms } if !atoms.is_empty() => atoms[0].state.clone(),
                _ => StateVector::new(0.5 * (model.x_min() + 0.5 * model.x_max()), vec![0.0; model.m()]),
            };
            simulate_with(&model, |r| stable_cohort(&model, &birth, agents, mc.seed, r), &opts)?
        }
    };
    let mut counts = Vec::new();
    let mut census = Vec::new();
    for tr in &trs {
        for (k, c) in tr.census.iter().enumerate() {
            counts.push(vec![
                tr.replicate as f64,
                c.t,
                c.count as f64,
                tr.births[k] as f64,
                tr.deaths[k] as f64,
                tr.exits[k] as f64,
            ]);
            let hists = std::iter::once(&c.age).chain(c.coords.iter());
            for (v, h) in hists.enumerate() {
                let width = (h.hi - h.lo) / h.counts.len() as f64;
                for (b, &n) in h.counts.iter().enumerate() {
                    let lo = h.lo + b as f64 * width;
                    census.push(vec![tr.replicate as f64, c.t, v as f64, lo, lo + width, n as f64]);
                }
            }
        }
    }
    let head = |cols: &[&str]| cols.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    ctx.csv("counts.csv", &head(&["replicate", "t", "count", "births", "deaths", "exits"]), &counts)?;
    // variable 0 is age, 1 is size, 2.. are the auxiliary coordinates
    ctx.csv("census.csv", &head(&["replicate", "t", "variable", "bin_lo", "bin_hi", "count"]), &census)?;
    let final_mean = trs.iter().map(|t| t.census.last().map_or(0, |c| c.count) as f64).sum::<f64>() / trs.len() as f64;
    let mut summary = format!("mc: {} replicates, mean final count {final_mean}", trs.len());
    if let Some(w) = mc.fit_window {
        let g = estimate_growth_rate(&trs, w)?;
        ctx.json("growth.json", &g)?;
        let _ = write!(summary, ", growth rate {} ± {}", g.lambda_hat, g.stderr);
    }
    Ok(Outcome::ok(summary))
}

fn cmd_verify(ctx: &mut Ctx) -> Result<Outcome> {
    let opts = VerifyOptions { seed: ctx.cfg.mc.seed, mc_replicates: ctx.cfg.mc.replicates, ..Default::default() };
    let report = run_verify(&ctx.cfg.model, &opts)?;
    ctx.json("verify.json", &report)?;
    let header: Vec<String> = ["model", "theta", "age"]
        .iter()
        .map(|s| s.to_string())
        .chain(ctx.state_header())
        .chain(["jacobian", "jacobian_fd", "relative_residual"].iter().map(|s| s.to_string()))
        .collect();
    let rows: Vec<Vec<f64>> = report
        .liouville
        .iter()
        .map(|r| {
            let mut row = vec![if r.model == "coupled" { 1.0 } else { 0.0 }, r.theta, r.age];
            row.extend(&r.state);
            row.extend([r.jacobian, r.jacobian_fd, r.relative_residual]);
            row
        })
        .collect();
    // the coupled companion always has two auxiliary coordinates
    if rows.iter().all(|r| r.len() == header.len()) {
        ctx.csv("liouville.csv", &header, &rows)?;
    } else {
        let configured: Vec<Vec<f64>> = rows.into_iter().filter(|r| r[0] == 0.0).collect();
        ctx.csv("liouville.csv", &header, &configured)?;
    }
    let mut lines = String::new();
    if !ctx.cli.quiet {
        for c in &report.checks {
            let _ = writeln!(
                lines,
                "{} {:<20} value {:<12.4e} threshold {:<10.3e} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold,
                c.detail
            );
        }
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    let _ = write!(
        lines,
        "verify: {} checks, {} failed, lambda0 = {}",
        report.checks.len(),
        failed,
        report.lambda0.map_or("n/a".to_string(), |l| l.to_string())
    );
    Ok(Outcome { summary: lines, passed: failed == 0 })
}

