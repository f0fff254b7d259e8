//! Experiment manifests: strict JSON with per-kind parameter blocks.
//!
//! ```json
//! {
//!   "name": "lattice",
//!   "kind": "cell",
//!   "seed": 7,
//!   "output_dir": "out/lattice",
//!   "emit": { "json": true, "svg": true },
//!   "params": { "kappas": [0.2, 0.1, 0.05, 0.02] }
//! }
//! ```
//!
//! Unknown keys are rejected at every level. Omitted parameters take the
//! defaults of the kind's parameter struct. `output_dir` is resolved
//! relative to the manifest file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Metrics,
    Pde,
    Control,
    Particles,
    Meanfield,
    Cell,
    Heps,
    Invariants,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Metrics => "metrics",
            Kind::Pde => "pde",
            Kind::Control => "control",
            Kind::Particles => "particles",
            Kind::Meanfield => "meanfield",
            Kind::Cell => "cell",
            Kind::Heps => "heps",
            Kind::Invariants => "invariants",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emit {
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub json: bool,
    #[serde(default)]
    pub svg: bool,
}

fn yes() -> bool {
    true
}

impl Default for Emit {
    fn default() -> Self {
        Self {
            csv: true,
            json: true,
            svg: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    name: String,
    kind: Kind,
    #[serde(default)]
    seed: u64,
    output_dir: PathBuf,
    #[serde(default)]
    emit: Emit,
    #[serde(default = "empty_object")]
    params: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub name: String,
    pub kind: Kind,
    pub seed: u64,
    /// As written in the file.
    pub output_dir: PathBuf,
    pub emit: Emit,
    pub params: Params,
    /// `output_dir` resolved against the manifest location.
    #[serde(skip)]
    pub resolved_output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Params {
    Metrics(MetricsParams),
    Pde(PdeParams),
    Control(ControlParams),
    Particles(ParticlesParams),
    Meanfield(MeanfieldParams),
    Cell(CellParams),
    Heps(HepsParams),
    Invariants(InvariantsParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsParams {
    pub m: usize,
    pub pairs: usize,
    pub modes: usize,
    pub amplitude: f64,
}

impl Default for MetricsParams {
    fn default() -> Self {
        Self {
            m: 256,
            pairs: 200,
            modes: 4,
            amplitude: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialProfile {
    /// `1 + amplitude cos(2 pi mode x)`.
    Cosine,
    /// Random smooth density with `mode` Fourier modes.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeParams {
    pub m: usize,
    pub eps_reg: f64,
    pub dt: f64,
    pub horizon: f64,
    pub record_every: usize,
    pub initial: InitialProfile,
    pub amplitude: f64,
    pub mode: usize,
    /// Amplitude of a random smooth control; 0 for the free flow.
    pub control_amplitude: f64,
    pub control_blocks: usize,
}

impl Default for PdeParams {
    fn default() -> Self {
        Self {
            m: 128,
            eps_reg: 0.05,
            dt: 1e-3,
            horizon: 0.1,
            record_every: 10,
            initial: InitialProfile::Cosine,
            amplitude: 0.3,
            mode: 1,
            control_amplitude: 0.0,
            control_blocks: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Terminal,
    Discounted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    /// `weight <rho, phi>` with a random smooth `phi`.
    Linear,
    /// `weight S(rho)`.
    Entropy,
    /// `weight ||rho - gamma||_{-1}^2` with a random smooth `gamma`.
    DistanceSq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlParams {
    pub m: usize,
    pub eps_reg: f64,
    pub dt: f64,
    pub horizon: f64,
    pub block_steps: usize,
    pub objective: ObjectiveKind,
    pub functional: FunctionalKind,
    pub weight: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub init_scale: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            m: 16,
            eps_reg: 0.05,
            dt: 0.01,
            horizon: 0.1,
            block_steps: 2,
            objective: ObjectiveKind::Terminal,
            functional: FunctionalKind::Linear,
            weight: 1.0,
            alpha: 0.01,
            max_iters: 40,
            restarts: 3,
            init_scale: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticlesParams {
    /// Sweep cells `[eps, N]`.
    pub sweep: Vec<(f64, i64)>,
    pub horizon: f64,
    /// Initial density `1 + amplitude cos(2 pi x)`.
    pub amplitude: f64,
    pub grid_m: usize,
    pub bandwidth_cells: f64,
    pub replicas: usize,
    pub dt_per_eps2: f64,
    pub reference_dt: f64,
    pub reference_eps_reg: f64,
    /// Write an ensemble checkpoint every this many outer steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ParticlesParams {
    fn default() -> Self {
        Self {
            sweep: vec![(0.1, 100_000), (0.05, 400_000)],
            horizon: 0.1,
            amplitude: 0.3,
            grid_m: 128,
            bandwidth_cells: 2.0,
            replicas: 8,
            dt_per_eps2: 0.25,
            reference_dt: 1e-4,
            reference_eps_reg: 1e-3,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanfieldParams {
    pub m: usize,
    pub eps: Vec<f64>,
    pub horizon: f64,
    pub amplitude: f64,
    pub reference_dt: f64,
    pub reference_eps_reg: f64,
    pub steps_per_eps2: f64,
}

impl Default for MeanfieldParams {
    fn default() -> Self {
        Self {
            m: 128,
            eps: vec![0.2, 0.1, 0.05],
            horizon: 0.1,
            amplitude: 0.3,
            reference_dt: 1e-4,
            reference_eps_reg: 0.05,
            steps_per_eps2: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellParams {
    /// Use the 27-point lattice; otherwise `specs`.
    pub lattice: bool,
    /// Cells `[alpha, beta, P]`.
    pub specs: Vec<(f64, f64, f64)>,
    pub kappas: Vec<f64>,
    pub variational_points: usize,
    pub variational_half_width: f64,
}

impl Default for CellParams {
    fn default() -> Self {
        Self {
            lattice: true,
            specs: Vec::new(),
            kappas: vec![0.2, 0.1, 0.05, 0.02],
            variational_points: 20_001,
            variational_half_width: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HepsParams {
    pub m: usize,
    pub pairs: usize,
    pub eps: Vec<f64>,
}

impl Default for HepsParams {
    fn default() -> Self {
        Self {
            m: 128,
            pairs: 10,
            eps: vec![0.2, 0.1, 0.05, 0.025],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantsParams {
    /// Run only checks whose name contains this substring.
    pub filter: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Rejected manifest with every error found.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub source: String,
    pub errors: Vec<FieldError>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid manifest {}", self.source)?;
        for e in &self.errors {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn config_error(source: &str, path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        source: source.into(),
        errors: vec![FieldError {
            path: path.into(),
            message: message.into(),
        }],
    }
}

pub fn parse_config(path: &Path) -> Result<Manifest, ConfigError> {
    let src = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| config_error(&src, "", format!("cannot read: {e}")))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_str(&text, &src, &base)
}

fn typed<T: serde::de::DeserializeOwned>(v: serde_json::Value, prefix: &str, src: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." { prefix.to_string() } else { format!("{prefix}.{inner}") };
        config_error(src, &path, e.into_inner().to_string())
    })
}

/// Parses and validates manifest text; `base` resolves a relative `output_dir`.
pub fn parse_str(text: &str, src: &str, base: &Path) -> Result<Manifest, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| config_error(src, "", format!("not valid JSON: {e}")))?;
    let raw: RawManifest = serde_path_to_error::deserialize(value).map_err(|e| {
        let p = e.path().to_string();
        config_error(src, if p == "." { "" } else { &p }, e.into_inner().to_string())
    })?;
    let pv = raw.params;
    let params = match raw.kind {
        Kind::Metrics => Params::Metrics(typed(pv, "params", src)?),
        Kind::Pde => Params::Pde(typed(pv, "params", src)?),
        Kind::Control => Params::Control(typed(pv, "params", src)?),
        Kind::Particles => Params::Particles(typed(pv, "params", src)?),
        Kind::Meanfield => Params::Meanfield(typed(pv, "params", src)?),
        Kind::Cell => Params::Cell(typed(pv, "params", src)?),
        Kind::Heps => Params::Heps(typed(pv, "params", src)?),
        Kind::Invariants => Params::Invariants(typed(pv, "params", src)?),
    };
    let manifest = Manifest {
        resolved_output_dir: if raw.output_dir.is_absolute() {
            raw.output_dir.clone()
        } else {
            base.join(&raw.output_dir)
        },
        name: raw.name,
        kind: raw.kind,
        seed: raw.seed,
        output_dir: raw.output_dir,
        emit: raw.emit,
        params,
    };
    let errors = validate(&manifest);
    if errors.is_empty() {
        Ok(manifest)
    } else {
        Err(ConfigError {
            source: src.into(),
            errors,
        })
    }
}

struct Checker {
    errors: Vec<FieldError>,
}

impl Checker {
    fn req(&mut self, ok: bool, path: &str, message: impl Into<String>) {
        if !ok {
            self.errors.push(FieldError {
                path: path.into(),
                message: message.into(),
            });
        }
    }

    fn positive(&mut self, v: f64, path: &str) {
        self.req(v > 0.0 && v.is_finite(), path, format!("must be positive and finite, got {v}"));
    }

    fn grid(&mut self, m: usize, path: &str) {
        self.req(m >= 8 && m % 2 == 0, path, format!("grid size must be even and at least 8, got {m}"));
    }

    fn at_least(&mut self, v: usize, min: usize, path: &str) {
        self.req(v >= min, path, format!("must be at least {min}, got {v}"));
    }

    fn eps_reg(&mut self, v: f64, path: &str) {
        self.req(v > 0.0 && v < 0.5, path, format!("must lie in (0, 0.5), got {v}"));
    }

    fn multiple(&mut self, horizon: f64, dt: f64, path: &str) {
        if horizon > 0.0 && dt > 0.0 {
            let n = (horizon / dt).round();
            self.req(
                n >= 1.0 && (n * dt - horizon).abs() <= 1e-9 * horizon.max(1.0),
                path,
                format!("horizon {horizon} must be a positive multiple of dt {dt}"),
            );
        }
    }

    fn decreasing(&mut self, v: &[f64], path: &str) {
        self.req(!v.is_empty(), path, "must not be empty");
        for (i, x) in v.iter().enumerate() {
            self.positive(*x, &format!("{path}[{i}]"));
        }
        self.req(v.windows(2).all(|w| w[1] < w[0]), path, "must be strictly decreasing");
    }
}

/// Module preconditions that can be checked before any compute.
pub fn validate(m: &Manifest) -> Vec<FieldError> {
    let mut c = Checker { errors: Vec::new() };
    c.req(!m.name.trim().is_empty(), "name", "must not be empty");
    c.req(m.emit.csv, "emit.csv", "CSV output is always written; omit the flag or set it to true");
    match &m.params {
        Params::Metrics(p) => {
            c.grid(p.m, "params.m");
            c.at_least(p.pairs, 1, "params.pairs");
            c.req(p.modes >= 1 && 2 * p.modes < p.m, "params.modes", format!("must lie in 1..{}", p.m / 2));
            c.req(p.amplitude >= 0.0 && p.amplitude.is_finite(), "params.amplitude", "must be nonnegative");
        }
        Params::Pde(p) => {
            c.grid(p.m, "params.m");
            c.eps_reg(p.eps_reg, "params.eps_reg");
            c.positive(p.dt, "params.dt");
            c.positive(p.horizon, "params.horizon");
            c.multiple(p.horizon, p.dt, "params.horizon");
            c.at_least(p.record_every, 1, "params.record_every");
            c.at_least(p.mode, 1, "params.mode");
            c.at_least(p.control_blocks, 1, "params.control_blocks");
            c.req(p.control_amplitude >= 0.0, "params.control_amplitude", "must be nonnegative");
            match p.initial {
                InitialProfile::Cosine => c.req(
                    (0.0..1.0).contains(&p.amplitude),
                    "params.amplitude",
                    format!("cosine amplitude must lie in [0, 1), got {}", p.amplitude),
                ),
                InitialProfile::Random => c.req(p.amplitude >= 0.0, "params.amplitude", "must be nonnegative"),
            }
        }
        Params::Control(p) => {
            c.grid(p.m, "params.m");
            c.eps_reg(p.eps_reg, "params.eps_reg");
            c.positive(p.dt, "params.dt");
            c.positive(p.horizon, "params.horizon");
            c.multiple(p.horizon, p.dt, "params.horizon");
            c.at_least(p.block_steps, 1, "params.block_steps");
            if p.dt > 0.0 && p.block_steps > 0 {
                let n = (p.horizon / p.dt).round() as usize;
                c.req(
                    n % p.block_steps == 0,
                    "params.block_steps",
                    format!("must divide the step count {n}"),
                );
            }
            c.at_least(p.max_iters, 1, "params.max_iters");
            c.at_least(p.restarts, 1, "params.restarts");
            c.req(p.init_scale >= 0.0, "params.init_scale", "must be nonnegative");
            c.req(p.weight.is_finite(), "params.weight", "must be finite");
            if p.objective == ObjectiveKind::Discounted {
                c.positive(p.alpha, "params.alpha");
            }
        }
        Params::Particles(p) => {
            c.req(!p.sweep.is_empty(), "params.sweep", "must not be empty");
            for (i, (eps, n)) in p.sweep.iter().enumerate() {
                c.req(
                    *eps > 0.0 && *eps <= 1.0,
                    &format!("params.sweep[{i}][0]"),
                    format!("eps must lie in (0, 1], got {eps}"),
                );
                c.req(
                    *n >= 2,
                    &format!("params.sweep[{i}][1]"),
                    format!("N must be an integer >= 2, got {n}"),
                );
            }
            c.positive(p.horizon, "params.horizon");
            c.req((0.0..1.0).contains(&p.amplitude), "params.amplitude", "must lie in [0, 1)");
            c.grid(p.grid_m, "params.grid_m");
            c.req(p.bandwidth_cells >= 2.0, "params.bandwidth_cells", "must be at least 2");
            c.at_least(p.replicas, 1, "params.replicas");
            c.positive(p.dt_per_eps2, "params.dt_per_eps2");
            c.positive(p.reference_dt, "params.reference_dt");
            c.multiple(p.horizon, p.reference_dt, "params.reference_dt");
            c.eps_reg(p.reference_eps_reg, "params.reference_eps_reg");
        }
        Params::Meanfield(p) => {
            c.grid(p.m, "params.m");
            c.decreasing(&p.eps, "params.eps");
            c.positive(p.horizon, "params.horizon");
            c.req((0.0..1.0).contains(&p.amplitude), "params.amplitude", "must lie in [0, 1)");
            c.positive(p.reference_dt, "params.reference_dt");
            c.multiple(p.horizon, p.reference_dt, "params.reference_dt");
            c.eps_reg(p.reference_eps_reg, "params.reference_eps_reg");
            c.positive(p.steps_per_eps2, "params.steps_per_eps2");
        }
        Params::Cell(p) => {
            c.req(
                p.lattice || !p.specs.is_empty(),
                "params.specs",
                "give at least one [alpha, beta, P] or set lattice",
            );
            for (i, (a, b, pp)) in p.specs.iter().enumerate() {
                c.req(
                    *a > 0.0 && a.is_finite() && b.is_finite() && pp.is_finite(),
                    &format!("params.specs[{i}]"),
                    "needs alpha > 0 and finite beta, P",
                );
            }
            c.decreasing(&p.kappas, "params.kappas");
            c.at_least(p.variational_points, 3, "params.variational_points");
            c.positive(p.variational_half_width, "params.variational_half_width");
        }
        Params::Heps(p) => {
            c.grid(p.m, "params.m");
            c.at_least(p.pairs, 1, "params.pairs");
            c.decreasing(&p.eps, "params.eps");
            c.req(p.eps.len() >= 2, "params.eps", "need at least two values for a slope");
        }
        Params::Invariants(_) => {}
    }
    c.errors
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest, ConfigError> {
        parse_str(text, "test", Path::new("/base"))
    }

    #[test]
    fn minimal_cell_manifest_gets_defaults() {
        let m = parse(r#"{"name": "c", "kind": "cell", "output_dir": "out"}"#).unwrap();
        assert_eq!(m.params, Params::Cell(CellParams::default()));
        assert_eq!(m.emit, Emit::default());
        assert_eq!(m.resolved_output_dir, Path::new("/base/out"));
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let e = parse(r#"{"name": "c", "kind": "cell", "output_dir": "o", "sed": 3}"#).unwrap_err();
        assert!(e.errors[0].message.contains("unknown field `sed`"), "{e}");
    }

    #[test]
    fn several_field_errors_are_collected() {
        let e = parse(
            r#"{"name": "p", "kind": "pde", "output_dir": "o",
                "params": {"m": 7, "eps_reg": 0.7, "dt": -1.0}}"#,
        )
        .unwrap_err();
        let paths: Vec<&str> = e.errors.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"params.m"));
        assert!(paths.contains(&"params.eps_reg"));
        assert!(paths.contains(&"params.dt"));
    }

    #[test]
    fn kind_is_checked() {
        let e = parse(r#"{"name": "c", "kind": "cells", "output_dir": "o"}"#).unwrap_err();
        assert_eq!(e.errors[0].path, "kind");
    }
}
