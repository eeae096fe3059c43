//! JSON run configuration (`schema: 1`); unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::InitialCohort;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, StateVector};
use crate::renewal::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub model: ModelSpec,
    pub initial_cohort: InitialCohort,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Points for the `flow` subcommand; defaults to the cohort's first point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Atomic,
    Grid,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atomic" => Ok(BackendKind::Atomic),
            "grid" => Ok(BackendKind::Grid),
            other => Err(Error::Config(format!("unknown backend {other:?}; expected atomic or grid"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub tau_flow: f64,
    pub tau_quad: f64,
    /// Renewal and eigen lattice time step.
    pub dt: f64,
    pub size_nodes: usize,
    pub aux_nodes: usize,
    pub aux_max: f64,
    pub tol: f64,
    pub n_max: usize,
    /// Renewal horizon and end of the `simulate` window.
    pub horizon: f64,
    /// Defaults to atomic for single-age division, grid otherwise.
    pub backend: Option<BackendKind>,
    /// Sample nodes per axis for `simulate` density dumps.
    pub sample_nodes: usize,
    /// Number of output times in `simulate`.
    pub sample_times: usize,
    pub age_max: Option<f64>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            tau_flow: 1e-10,
            tau_quad: 1e-10,
            dt: 0.02,
            size_nodes: 41,
            aux_nodes: 11,
            aux_max: 4.0,
            tol: 1e-10,
            n_max: 10_000,
            horizon: 5.0,
            backend: None,
            sample_nodes: 6,
            sample_times: 11,
            age_max: None,
        }
    }
}

impl Numerics {
    pub fn grid(&self) -> GridSpec {
        GridSpec { dt: self.dt, size_nodes: self.size_nodes, aux_nodes: self.aux_nodes, aux_max: self.aux_max }
    }
}

/// How the simulator's founders are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum McStart {
    /// Each initial atom becomes `round(weight · scale)` agents.
    FromCohort { scale: f64 },
    /// Stable age distribution around the first atom's birth state.
    Stable { agents: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub replicates: usize,
    pub seed: u64,
    pub agent_cap: u64,
    pub census_dt: f64,
    pub t_end: f64,
    pub bins: usize,
    pub start: McStart,
    pub fit_window: Option<(f64, f64)>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            replicates: 8,
            seed: 1,
            agent_cap: 10_000_000,
            census_dt: 0.25,
            t_end: 5.0,
            bins: 20,
            start: McStart::FromCohort { scale: 1000.0 },
            fit_window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub theta: f64,
    #[serde(default)]
    pub age: f64,
    pub state: StateVector,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Config(format!("unsupported schema {}; expected 1", self.schema)));
        }
        let n = &self.numerics;
        let positive = [
            ("tau_flow", n.tau_flow),
            ("tau_quad", n.tau_quad),
            ("dt", n.dt),
            ("tol", n.tol),
            ("horizon", n.horizon),
            ("aux_max", n.aux_max),
            ("census_dt", self.mc.census_dt),
            ("t_end", self.mc.t_end),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let resolutions = [
            ("size_nodes", n.size_nodes),
            ("aux_nodes", n.aux_nodes),
            ("sample_nodes", n.sample_nodes),
            ("sample_times", n.sample_times),
            ("bins", self.mc.bins),
        ];
        for (name, v) in resolutions {
            if v < 2 {
                return Err(Error::Config(format!("{name} must be at least 2, got {v}")));
            }
        }
        if n.n_max == 0 || self.mc.replicates == 0 {
            return Err(Error::Config("n_max and replicates must be positive".into()));
        }
        if let Some((a, b)) = self.mc.fit_window {
            if !(b > a && a >= 0.0) {
                return Err(Error::Config(format!("fit_window ({a}, {b}) is empty")));
            }
        }
        Ok(())
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": 1,
        "model": {"m": 2, "x_m": 0.5, "x_M": 2.0, "alpha": 0.6931471805599453,
                  "division": {"kind": "doubling"}, "hazard": {"kind": "dirac"}},
        "initial_cohort": {"kind": "atoms", "atoms": [{"age": 0.0, "state": {"size": 1.0, "aux": [0.0, 0.0]}, "weight": 1.0}]}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.numerics, Numerics::default());
        assert_eq!(cfg.mc.replicates, 8);
        assert_eq!(cfg.output.formats, vec![Format::Csv, Format::Json]);
    }

    #[test]
    fn unknown_keys_and_bad_schema_rejected() {
        let extra = MINIMAL.replacen("\"schema\": 1,", "\"schema\": 1, \"colour\": 3,", 1);
        assert!(matches!(RunConfig::from_json(&extra), Err(Error::Config(m)) if m.contains("colour")));
        let v2 = MINIMAL.replacen("\"schema\": 1", "\"schema\": 2", 1);
        assert!(matches!(RunConfig::from_json(&v2), Err(Error::Config(m)) if m.contains("schema")));
        assert!(matches!(RunConfig::from_json("{\"schema\": 1,"), Err(Error::Config(m)) if m.contains("line 1")));
    }

    #[test]
    fn tolerances_and_resolutions_checked() {
        let mut cfg = RunConfig::from_json(MINIMAL).unwrap();
        cfg.numerics.tau_flow = 0.0;
        assert!(cfg.check().is_err());
        cfg.numerics.tau_flow = 1e-10;
        cfg.numerics.size_nodes = 1;
        assert!(cfg.check().is_err());
    }

    #[test]
    fn bundled_reference_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_cell.json");
        let cfg = RunConfig::load(&path).unwrap();
        crate::validate_model(cfg.model).unwrap();
    }
}
