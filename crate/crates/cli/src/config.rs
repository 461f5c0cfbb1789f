//! Scenario configuration: a single JSON document with `"schema": 1`.
//!
//! Parsing collects every violation it can find (unknown keys, type
//! errors, physical-validity rules) instead of stopping at the first.

use std::fmt;

use contmon_core::ensemble::{
    Moment, Observable, PositivityPolicy, Scenario, Storage, Unravelling,
};
use contmon_core::gaussian::{
    lqg_gain, markovian_gain, opo_model, Controller, FeedbackSpec, GaussianModel, GaussianState,
};
use contmon_core::master::{
    coherent_drive_hamiltonian, BathSpec, Channel, OpenSystemModel, Stepper, TimeGrid,
};
use contmon_core::{
    build_standard_ops, c64, CMatrix, DensityMatrix, EnsembleSpec, GaussianScenario,
    HomodyneFeedback, JumpFeedback, LinearScheme, NoiseMode, OperatorSet, RMatrix, RVector,
    SystemKind, C64,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// One failed rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Dotted location in the document, empty for the root.
    pub path: String,
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.path.is_empty() {
            "<root>"
        } else {
            &self.path
        };
        write!(f, "{at}: {} [{}]", self.message, self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn single(path: &str, rule: &'static str, message: impl Into<String>) -> Self {
        Self {
            violations: vec![Violation {
                path: path.into(),
                rule,
                message: message.into(),
            }],
        }
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    Qubit,
    Boson { dim: usize },
    Gaussian { n_modes: usize },
}

/// `coeff * op`, where `op` is a product of named operators such as `"q*p"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub op: String,
    #[serde(default)]
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl Term {
    pub fn real(op: &str, re: f64) -> Self {
        Self {
            op: op.into(),
            re,
            im: 0.0,
        }
    }

    pub fn complex(op: &str, re: f64, im: f64) -> Self {
        Self {
            op: op.into(),
            re,
            im,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub op: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathConfig {
    #[serde(default)]
    pub n_thermal: f64,
    /// Squeezing correlation `[Re M, Im M]`.
    #[serde(default)]
    pub m: [f64; 2],
}

impl Default for BathConfig {
    fn default() -> Self {
        Self {
            n_thermal: 0.0,
            m: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConfig {
    /// Basis state `index` (`0` is `|e>` for a qubit and `|0>` for a mode).
    Basis {
        index: usize,
    },
    Diagonal {
        populations: Vec<f64>,
    },
    MaximallyMixed,
    /// Gaussian moments; defaults to the vacuum.
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpoConfig {
    pub chi: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GaussianModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opo: Option<OpoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub hamiltonian: Vec<Term>,
    /// The first channel is the monitored one.
    #[serde(default)]
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub bath: BathConfig,
    #[serde(default = "one")]
    pub efficiency: f64,
    #[serde(default)]
    pub phase: f64,
    /// Coherent amplitude `[Re beta, Im beta]` driving the monitored channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drive: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<GaussianModelConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnravellingKind {
    #[default]
    None,
    Jump,
    Homodyne,
    Heterodyne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    Euler,
    Kraus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnravellingConfig {
    #[serde(default)]
    pub kind: UnravellingKind,
    /// Defaults to `kraus` where available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeConfig>,
    #[serde(default)]
    pub linear: bool,
    /// Ostensible current mean of linear homodyne trajectories.
    #[serde(default)]
    pub mu: f64,
    /// Ostensible click rate factor of linear jump trajectories.
    #[serde(default = "one")]
    pub beta: f64,
    /// Propagate state vectors instead of density matrices (jump only).
    #[serde(default)]
    pub state_vector: bool,
}

impl Default for UnravellingConfig {
    fn default() -> Self {
        Self {
            kind: UnravellingKind::None,
            scheme: None,
            linear: false,
            mu: 0.0,
            beta: 1.0,
            state_vector: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackConfig {
    #[default]
    None,
    /// Unitary `exp(-i F)` after every click.
    Photodetection { f: Vec<Term> },
    /// `H_fb = I(t) F` driven by the homodyne current.
    Homodyne { f: Vec<Term> },
    /// Gaussian current feedback `F M dy`; `M` defaults to the
    /// noise-cancelling gain.
    Markovian {
        f: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m: Option<Vec<Vec<f64>>>,
    },
    /// Gaussian state feedback with the optimal LQG gain.
    Lqg {
        f: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConfig {
    #[default]
    Gaussian,
    TwoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositivityConfig {
    Off,
    #[default]
    Count,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepperConfig {
    #[default]
    Rk4,
    Expm,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "one_usize")]
    pub n_traj: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub positivity: PositivityConfig,
    #[serde(default = "one_usize")]
    pub sample_every: usize,
    /// Master-equation integrator when no unravelling is selected.
    #[serde(default)]
    pub stepper: StepperConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    /// Operator products (`"proj_e"`, `"q*q"`) or Gaussian moments
    /// (`"r_0"`, `"sigma_0_0"`, `"excess_0_0"`, `"total_0_0"`).
    #[serde(default)]
    pub observables: Vec<String>,
    #[serde(default)]
    pub store_trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub system: SystemConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub unravelling: UnravellingConfig,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

const ROOT_KEYS: &[&str] = &[
    "schema",
    "name",
    "system",
    "model",
    "unravelling",
    "feedback",
    "run",
    "output",
];
const MODEL_KEYS: &[&str] = &[
    "hamiltonian",
    "channels",
    "bath",
    "efficiency",
    "phase",
    "drive",
    "initial",
    "gaussian",
];
const TERM_KEYS: &[&str] = &["op", "re", "im"];
const UNRAVELLING_KEYS: &[&str] = &["kind", "scheme", "linear", "mu", "beta", "state_vector"];
const RUN_KEYS: &[&str] = &[
    "dt",
    "t_final",
    "n_traj",
    "seed",
    "noise",
    "positivity",
    "sample_every",
    "stepper",
];

fn allowed_keys(
    path: &str,
    obj: &serde_json::Map<String, Value>,
) -> Option<&'static [&'static str]> {
    let kind = obj.get("kind").and_then(Value::as_str).unwrap_or("");
    let generic = strip_indices(path);
    Some(match generic.as_str() {
        "" => ROOT_KEYS,
        "system" => match kind {
            "boson" => &["kind", "dim"],
            "gaussian" => &["kind", "n_modes"],
            _ => &["kind"],
        },
        "model" => MODEL_KEYS,
        "model.hamiltonian[]" | "feedback.f[]" => TERM_KEYS,
        "model.channels[]" => &["op", "rate"],
        "model.bath" => &["n_thermal", "m"],
        "model.initial" => match kind {
            "basis" => &["kind", "index"],
            "diagonal" => &["kind", "populations"],
            "gaussian" => &["kind", "r", "sigma"],
            _ => &["kind"],
        },
        "model.gaussian" => &["opo", "a", "d", "b", "e"],
        "model.gaussian.opo" => &["chi", "kappa"],
        "unravelling" => UNRAVELLING_KEYS,
        "feedback" => match kind {
            "photodetection" | "homodyne" => &["kind", "f"],
            "markovian" => &["kind", "f", "m"],
            "lqg" => &["kind", "f", "p", "q"],
            _ => &["kind"],
        },
        "run" => RUN_KEYS,
        "output" => &["observables", "store_trajectories"],
        _ => return None,
    })
}

fn strip_indices(path: &str) -> String {
    let mut out = String::with_capacity(path.len());
    let mut skipping = false;
    for ch in path.chars() {
        match ch {
            '[' => {
                skipping = true;
                out.push('[');
            }
            ']' => {
                skipping = false;
                out.push(']');
            }
            _ if skipping => {}
            _ => out.push(ch),
        }
    }
    out
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn walk_keys(value: &Value, path: &str, out: &mut Vec<Violation>) {
    match value {
        Value::Object(obj) => {
            if let Some(allowed) = allowed_keys(path, obj) {
                for key in obj.keys() {
                    if !allowed.contains(&key.as_str()) {
                        out.push(Violation {
                            path: join(path, key),
                            rule: "unknown_key",
                            message: format!(
                                "unknown key {key:?} (allowed: {})",
                                allowed.join(", ")
                            ),
                        });
                    }
                }
            }
            for (key, v) in obj {
                walk_keys(v, &join(path, key), out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                walk_keys(v, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| ConfigError::single("", "json_syntax", format!("invalid JSON: {e}")))?;
    config_from_value(value)
}

pub fn config_from_value(value: Value) -> Result<ScenarioConfig, ConfigError> {
    let mut violations = Vec::new();
    if !value.is_object() {
        return Err(ConfigError::single(
            "",
            "schema",
            "the document must be a JSON object",
        ));
    }
    match value.get("schema") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(other) => violations.push(Violation {
            path: "schema".into(),
            rule: "schema_version",
            message: format!("unsupported schema {other}, expected {SCHEMA_VERSION}"),
        }),
        None => violations.push(Violation {
            path: "schema".into(),
            rule: "schema_version",
            message: format!("missing schema field, expected {SCHEMA_VERSION}"),
        }),
    }
    walk_keys(&value, "", &mut violations);
    let config: ScenarioConfig = match serde_json::from_value(value) {
        Ok(c) => c,
        Err(e) => {
            violations.push(Violation {
                path: String::new(),
                rule: "schema",
                message: e.to_string(),
            });
            return Err(ConfigError { violations });
        }
    };
    violations.extend(config.check());
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError { violations })
    }
}

pub fn to_json(config: &ScenarioConfig) -> String {
    serde_json::to_string_pretty(config).expect("configuration serializes")
}

/// Parsed observable selector.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservableSpec {
    Operator(String),
    Moment(Moment),
}

pub fn parse_moment(name: &str) -> Option<Moment> {
    let parts: Vec<&str> = name.split('_').collect();
    let idx = |s: &str| s.parse::<usize>().ok();
    match parts.as_slice() {
        ["r", i] => Some(Moment::Mean(idx(i)?)),
        ["sigma", i, j] => Some(Moment::Covariance(idx(i)?, idx(j)?)),
        ["excess", i, j] => Some(Moment::Excess(idx(i)?, idx(j)?)),
        ["total", i, j] => Some(Moment::Total(idx(i)?, idx(j)?)),
        _ => None,
    }
}

/// Executable form of a configuration.
#[derive(Debug, Clone)]
pub enum Plan {
    /// Deterministic master-equation integration.
    MasterEquation {
        model: OpenSystemModel,
        rho0: DensityMatrix,
        grid: TimeGrid,
        stepper: Stepper,
        observables: Vec<Observable>,
        sample_every: usize,
    },
    /// Monte Carlo over trajectories.
    Ensemble {
        spec: EnsembleSpec,
        scenario: Scenario,
    },
    /// Averaged Gaussian moment equations.
    GaussianMoments {
        spec: EnsembleSpec,
        scenario: Scenario,
    },
}

impl Plan {
    pub fn gaussian(&self) -> Option<&GaussianScenario> {
        match self {
            Plan::Ensemble {
                scenario: Scenario::Gaussian(g),
                ..
            }
            | Plan::GaussianMoments {
                scenario: Scenario::Gaussian(g),
                ..
            } => Some(g),
            _ => None,
        }
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, path: &str, rule: &'static str, message: impl Into<String>) {
        self.out.push(Violation {
            path: path.into(),
            rule,
            message: message.into(),
        });
    }
}

fn matrix(rows: &[Vec<f64>], path: &str, ck: &mut Checker) -> Option<RMatrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        ck.fail(
            path,
            "matrix_shape",
            "expected a non-empty rectangular array of rows",
        );
        return None;
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        ck.fail(path, "finite", "matrix entries must be finite");
        return None;
    }
    Some(RMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl ScenarioConfig {
    fn system_kind(&self) -> Option<SystemKind> {
        match self.system {
            SystemConfig::Qubit => Some(SystemKind::Qubit),
            SystemConfig::Boson { dim } => Some(SystemKind::Boson(dim)),
            SystemConfig::Gaussian { .. } => None,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.system, SystemConfig::Gaussian { .. })
    }

    /// Semantic rules; type-level problems are caught by deserialization.
    pub fn check(&self) -> Vec<Violation> {
        let mut ck = Checker { out: Vec::new() };
        self.build_with(&mut ck);
        ck.out
    }

    /// Builds the executable plan.
    pub fn plan(&self) -> Result<Plan, ConfigError> {
        let mut ck = Checker { out: Vec::new() };
        match self.build_with(&mut ck) {
            Some(plan) if ck.out.is_empty() => Ok(plan),
            _ => Err(ConfigError { violations: ck.out }),
        }
    }

    fn build_with(&self, ck: &mut Checker) -> Option<Plan> {
        let run = &self.run;
        if !(run.dt.is_finite() && run.dt > 0.0) {
            ck.fail(
                "run.dt",
                "positive_dt",
                format!("dt must be positive, got {}", run.dt),
            );
        }
        if run.n_traj == 0 {
            ck.fail("run.n_traj", "n_traj_positive", "n_traj must be at least 1");
        }
        if run.sample_every == 0 {
            ck.fail(
                "run.sample_every",
                "sample_every_positive",
                "sample_every must be at least 1",
            );
        }
        let grid = if run.dt > 0.0 {
            match TimeGrid::new(run.dt, run.t_final) {
                Ok(g) => Some(g),
                Err(e) => {
                    ck.fail("run.t_final", "time_grid", e.to_string());
                    None
                }
            }
        } else {
            None
        };
        let eta = self.model.efficiency;
        if !(0.0..=1.0).contains(&eta) {
            ck.fail(
                "model.efficiency",
                "efficiency_range",
                format!("efficiency out of [0,1]: {eta}"),
            );
        }
        if !self.model.phase.is_finite() {
            ck.fail("model.phase", "finite", "phase must be finite");
        }
        match &self.feedback {
            FeedbackConfig::Lqg { .. } if !self.is_gaussian() => {
                ck.fail("feedback.kind", "lqg_requires_gaussian", "LQG feedback requires a gaussian system");
            }
            FeedbackConfig::Markovian { .. } if !self.is_gaussian() => ck.fail(
                "feedback.kind",
                "markovian_requires_gaussian",
                "matrix-valued markovian feedback requires a gaussian system; use \"homodyne\" feedback for operators",
            ),
            FeedbackConfig::Photodetection { .. } | FeedbackConfig::Homodyne { .. } if self.is_gaussian() => ck.fail(
                "feedback.kind",
                "operator_feedback_requires_quantum",
                "operator feedback requires a qubit or boson system",
            ),
            _ => {}
        }
        let plan = if self.is_gaussian() {
            self.build_gaussian(ck, grid)
        } else {
            self.build_quantum(ck, grid)
        };
        if ck.out.is_empty() {
            plan
        } else {
            None
        }
    }

    fn ensemble_spec(&self, observables: Vec<Observable>) -> EnsembleSpec {
        let run = &self.run;
        EnsembleSpec {
            observables,
            storage: if self.output.store_trajectories {
                Storage::Full
            } else {
                Storage::Expectations
            },
            noise: match run.noise {
                NoiseConfig::Gaussian => NoiseMode::Gaussian,
                NoiseConfig::TwoPoint => NoiseMode::TwoPoint,
            },
            positivity: match run.positivity {
                PositivityConfig::Off => PositivityPolicy::Off,
                PositivityConfig::Count => PositivityPolicy::Count,
                PositivityConfig::Abort => PositivityPolicy::Abort,
            },
            sample_every: run.sample_every.max(1),
            ..EnsembleSpec::new(run.n_traj, run.seed, run.dt, run.t_final)
        }
    }

    fn build_quantum(&self, ck: &mut Checker, grid: Option<TimeGrid>) -> Option<Plan> {
        let kind = self.system_kind()?;
        let ops = match build_standard_ops(kind) {
            Ok(o) => o,
            Err(e) => {
                ck.fail("system", "system_dimension", e.to_string());
                return None;
            }
        };
        let m = &self.model;
        if m.gaussian.is_some() {
            ck.fail(
                "model.gaussian",
                "gaussian_requires_gaussian_system",
                "gaussian model block needs system kind \"gaussian\"",
            );
        }
        let h = terms_matrix(&m.hamiltonian, &ops, "model.hamiltonian", ck);
        let mut channels = Vec::new();
        for (i, c) in m.channels.iter().enumerate() {
            let path = format!("model.channels[{i}]");
            if !(c.rate.is_finite() && c.rate >= 0.0) {
                ck.fail(
                    &format!("{path}.rate"),
                    "rate_nonnegative",
                    format!("channel rate must be non-negative, got {}", c.rate),
                );
            }
            if let Some(op) = operator_product(&c.op, &ops, &format!("{path}.op"), ck) {
                channels.push(Channel::new(c.rate, op));
            }
        }
        let u = &self.unravelling;
        if u.kind != UnravellingKind::None && m.channels.is_empty() {
            ck.fail(
                "model.channels",
                "monitored_channel",
                "an unravelling needs at least one (monitored) channel",
            );
        }
        let bath = BathSpec::squeezed(m.bath.n_thermal, c64(m.bath.m[0], m.bath.m[1]));
        if let Err(e) = bath.validate() {
            ck.fail("model.bath", "bath_physical", e.to_string());
        }
        let vacuum = bath.is_vacuum();

        // cross-field rules
        match (&self.feedback, u.kind) {
            (FeedbackConfig::Photodetection { .. }, k) if k != UnravellingKind::Jump => ck.fail(
                "feedback.kind",
                "feedback_unravelling",
                "photodetection feedback needs a jump unravelling",
            ),
            (FeedbackConfig::Photodetection { .. }, _) if m.efficiency != 1.0 => ck.fail(
                "feedback.kind",
                "jump_feedback_efficiency",
                format!(
                    "photodetection feedback requires efficiency 1 (eta=1 restriction), got {}",
                    m.efficiency
                ),
            ),
            (FeedbackConfig::Homodyne { .. }, k) if k != UnravellingKind::Homodyne => ck.fail(
                "feedback.kind",
                "feedback_unravelling",
                "homodyne feedback needs a homodyne unravelling",
            ),
            _ => {}
        }
        if !vacuum {
            match u.kind {
                UnravellingKind::Jump => ck.fail(
                    "unravelling.kind",
                    "bath_unravelling",
                    "photodetection of a thermal or squeezed input is not supported",
                ),
                UnravellingKind::Homodyne | UnravellingKind::Heterodyne => {
                    if m.efficiency != 1.0 || m.phase != 0.0 {
                        ck.fail(
                            "model",
                            "bath_detection",
                            "detection of a thermal or squeezed input needs efficiency 1 and phase 0",
                        );
                    }
                    if m.bath.m[1] != 0.0 {
                        ck.fail(
                            "model.bath.m",
                            "bath_detection",
                            "detection needs a real squeezing correlation M",
                        );
                    }
                    if u.kind == UnravellingKind::Heterodyne && m.bath.m != [0.0, 0.0] {
                        ck.fail(
                            "model.bath.m",
                            "bath_detection",
                            "heterodyne detection needs M = 0",
                        );
                    }
                    if !matches!(self.feedback, FeedbackConfig::None) || u.linear {
                        ck.fail(
                            "unravelling",
                            "bath_detection",
                            "feedback and linear trajectories are not available with a thermal or squeezed input",
                        );
                    }
                }
                UnravellingKind::None => {}
            }
        }
        let kraus_available = match u.kind {
            UnravellingKind::Jump => true,
            UnravellingKind::Homodyne => vacuum && matches!(self.feedback, FeedbackConfig::None),
            _ => false,
        };
        if u.scheme == Some(SchemeConfig::Kraus) && !kraus_available {
            ck.fail(
                "unravelling.scheme",
                "scheme_supported",
                "the kraus scheme is available for jump and plain homodyne unravellings only",
            );
        }
        if u.linear && !matches!(u.kind, UnravellingKind::Jump | UnravellingKind::Homodyne) {
            ck.fail(
                "unravelling.linear",
                "linear_supported",
                "linear trajectories exist for jump and homodyne unravellings only",
            );
        }
        if u.linear && !matches!(self.feedback, FeedbackConfig::None) {
            ck.fail(
                "unravelling.linear",
                "linear_supported",
                "linear trajectories cannot be combined with feedback",
            );
        }
        if u.state_vector
            && (u.kind != UnravellingKind::Jump
                || u.linear
                || !matches!(self.feedback, FeedbackConfig::None))
        {
            ck.fail(
                "unravelling.state_vector",
                "state_vector_supported",
                "state-vector trajectories are available for plain jump unravellings only",
            );
        }
        if u.linear && !(u.beta.is_finite() && u.beta > 0.0) {
            ck.fail(
                "unravelling.beta",
                "beta_positive",
                format!("beta must be positive, got {}", u.beta),
            );
        }
        if !u.mu.is_finite() {
            ck.fail("unravelling.mu", "finite", "mu must be finite");
        }

        let observables = self.quantum_observables(&ops, ck);
        let rho0 = self.initial_density(&ops, ck);
        let h = h?;
        if channels.len() != m.channels.len() {
            return None;
        }
        let mut h = h;
        if let Some([re, im]) = m.drive {
            match channels.first() {
                Some(ch) => h += coherent_drive_hamiltonian(&ch.op, ch.rate, c64(re, im)),
                None => ck.fail(
                    "model.drive",
                    "monitored_channel",
                    "a coherent drive needs a channel",
                ),
            }
        }
        let model = OpenSystemModel::new(h, channels)
            .and_then(|x| x.with_efficiency(m.efficiency.clamp(0.0, 1.0)))
            .and_then(|x| x.with_phase(m.phase))
            .and_then(|x| x.with_bath(bath));
        let model = match model {
            Ok(x) => x,
            Err(e) => {
                ck.fail("model", "model_construction", e.to_string());
                return None;
            }
        };
        let (rho0, grid, observables) = (rho0?, grid?, observables?);
        if u.kind == UnravellingKind::None {
            return Some(Plan::MasterEquation {
                model,
                rho0,
                grid,
                stepper: match self.run.stepper {
                    StepperConfig::Rk4 => Stepper::Rk4,
                    StepperConfig::Expm => Stepper::Expm,
                },
                observables,
                sample_every: self.run.sample_every.max(1),
            });
        }
        let scheme = match u.scheme {
            Some(SchemeConfig::Euler) => LinearScheme::Euler,
            _ => LinearScheme::Kraus,
        };
        let kraus = u.scheme != Some(SchemeConfig::Euler);
        let unravelling = match (u.kind, &self.feedback) {
            (UnravellingKind::Jump, FeedbackConfig::Photodetection { f }) => {
                let f = terms_matrix(f, &ops, "feedback.f", ck)?;
                match JumpFeedback::new(f) {
                    Ok(fb) => Unravelling::JumpFeedback(fb),
                    Err(e) => {
                        ck.fail("feedback.f", "feedback_operator", e.to_string());
                        return None;
                    }
                }
            }
            (UnravellingKind::Homodyne, FeedbackConfig::Homodyne { f }) => {
                let f = terms_matrix(f, &ops, "feedback.f", ck)?;
                match HomodyneFeedback::new(f) {
                    Ok(fb) => Unravelling::HomodyneFeedback(fb),
                    Err(e) => {
                        ck.fail("feedback.f", "feedback_operator", e.to_string());
                        return None;
                    }
                }
            }
            (UnravellingKind::Jump, _) if u.linear => Unravelling::JumpLinear {
                beta: u.beta,
                scheme,
            },
            (UnravellingKind::Jump, _) if u.state_vector => Unravelling::JumpSse,
            (UnravellingKind::Jump, _) if kraus => Unravelling::JumpKraus,
            (UnravellingKind::Jump, _) => Unravelling::JumpSme,
            (UnravellingKind::Homodyne, _) if !vacuum => Unravelling::BathHomodyne,
            (UnravellingKind::Homodyne, _) if u.linear => {
                Unravelling::HomodyneLinear { mu: u.mu, scheme }
            }
            (UnravellingKind::Homodyne, _) if kraus => Unravelling::HomodyneKraus,
            (UnravellingKind::Homodyne, _) => Unravelling::HomodyneSme,
            (UnravellingKind::Heterodyne, _) if !vacuum => Unravelling::BathHeterodyne,
            (UnravellingKind::Heterodyne, _) => Unravelling::Heterodyne,
            (UnravellingKind::None, _) => unreachable!("handled above"),
        };
        if matches!(unravelling, Unravelling::JumpSse) {
            if let Err(e) = contmon_core::ensemble::pure_state(&rho0) {
                ck.fail("model.initial", "pure_initial_state", e.to_string());
                return None;
            }
        }
        let spec = self.ensemble_spec(observables);
        Some(Plan::Ensemble {
            spec,
            scenario: Scenario::quantum(model, rho0, unravelling),
        })
    }

    fn quantum_observables(&self, ops: &OperatorSet, ck: &mut Checker) -> Option<Vec<Observable>> {
        let names = if self.output.observables.is_empty() {
            default_observables(&self.system)
        } else {
            self.output.observables.clone()
        };
        let mut out = Vec::new();
        let mut ok = true;
        for (i, name) in names.iter().enumerate() {
            match operator_product(name, ops, &format!("output.observables[{i}]"), ck) {
                Some(op) => out.push(Observable::operator(name.clone(), op)),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn initial_density(&self, ops: &OperatorSet, ck: &mut Checker) -> Option<DensityMatrix> {
        let dim = ops.dim();
        let init = self
            .model
            .initial
            .clone()
            .unwrap_or(InitialConfig::Basis { index: 0 });
        let r = match &init {
            InitialConfig::Basis { index } => DensityMatrix::basis(dim, *index),
            InitialConfig::Diagonal { populations } => {
                if populations.len() != dim {
                    ck.fail(
                        "model.initial.populations",
                        "initial_state",
                        format!("expected {dim} populations, got {}", populations.len()),
                    );
                    return None;
                }
                DensityMatrix::diagonal(populations)
            }
            InitialConfig::MaximallyMixed => Ok(DensityMatrix::maximally_mixed(dim)),
            InitialConfig::Gaussian { .. } => {
                ck.fail(
                    "model.initial.kind",
                    "initial_state",
                    "gaussian initial moments need a gaussian system",
                );
                return None;
            }
        };
        match r {
            Ok(r) => Some(r),
            Err(e) => {
                ck.fail("model.initial", "initial_state", e.to_string());
                None
            }
        }
    }

    fn build_gaussian(&self, ck: &mut Checker, grid: Option<TimeGrid>) -> Option<Plan> {
        let SystemConfig::Gaussian { n_modes } = self.system else {
            return None;
        };
        if n_modes == 0 {
            ck.fail(
                "system.n_modes",
                "system_dimension",
                "n_modes must be at least 1",
            );
            return None;
        }
        let dim = 2 * n_modes;
        let m = &self.model;
        if !m.hamiltonian.is_empty()
            || !m.channels.is_empty()
            || m.drive.is_some()
            || m.bath != BathConfig::default()
        {
            ck.fail("model", "quantum_fields_in_gaussian", "hamiltonian, channels, drive and bath do not apply to a gaussian system; use model.gaussian");
        }
        let u = &self.unravelling;
        if !matches!(u.kind, UnravellingKind::None | UnravellingKind::Homodyne) {
            ck.fail("unravelling.kind", "gaussian_unravelling", "gaussian systems support \"none\" (averaged moments) and \"homodyne\" (conditional moments)");
        }
        if u.linear || u.state_vector || u.scheme.is_some() {
            ck.fail(
                "unravelling",
                "gaussian_unravelling",
                "scheme, linear and state_vector do not apply to a gaussian system",
            );
        }
        if u.kind == UnravellingKind::None && !matches!(self.feedback, FeedbackConfig::None) {
            ck.fail(
                "feedback",
                "feedback_unravelling",
                "feedback acts on measured currents and needs a homodyne unravelling",
            );
        }
        let Some(g) = &m.gaussian else {
            ck.fail(
                "model.gaussian",
                "gaussian_model",
                "a gaussian system needs model.gaussian (opo or a/d/b/e)",
            );
            return None;
        };
        let model = match (&g.opo, &g.a, &g.d, &g.b, &g.e) {
            (Some(opo), None, None, None, None) => {
                if n_modes != 1 {
                    ck.fail(
                        "system.n_modes",
                        "gaussian_model",
                        "the opo model has one mode",
                    );
                    return None;
                }
                if !(opo.kappa > 0.0) {
                    ck.fail(
                        "model.gaussian.opo.kappa",
                        "rate_nonnegative",
                        "kappa must be positive",
                    );
                    return None;
                }
                opo_model(opo.chi, opo.kappa, m.efficiency.clamp(0.0, 1.0))
            }
            (None, Some(a), Some(d), Some(b), Some(e)) => {
                let (a, d, b, e) = (
                    matrix(a, "model.gaussian.a", ck),
                    matrix(d, "model.gaussian.d", ck),
                    matrix(b, "model.gaussian.b", ck),
                    matrix(e, "model.gaussian.e", ck),
                );
                let (a, d, b, e) = (a?, d?, b?, e?);
                if a.nrows() != dim {
                    ck.fail(
                        "model.gaussian.a",
                        "gaussian_model",
                        format!("A must be {dim}x{dim} for {n_modes} mode(s)"),
                    );
                    return None;
                }
                GaussianModel::new(a, d, b, e)
            }
            _ => {
                ck.fail(
                    "model.gaussian",
                    "gaussian_model",
                    "give either opo or all of a, d, b, e",
                );
                return None;
            }
        };
        let model = match model {
            Ok(x) => x,
            Err(e) => {
                ck.fail("model.gaussian", "gaussian_model", e.to_string());
                return None;
            }
        };
        let initial = match &m.initial {
            None => GaussianState::vacuum(dim),
            Some(InitialConfig::Gaussian { r, sigma }) => {
                let r = r.clone().unwrap_or_else(|| vec![0.0; dim]);
                let sigma = match sigma {
                    Some(s) => matrix(s, "model.initial.sigma", ck)?,
                    None => RMatrix::identity(dim, dim),
                };
                if r.len() != dim || sigma.nrows() != dim || sigma.ncols() != dim {
                    ck.fail(
                        "model.initial",
                        "initial_state",
                        format!("initial moments must have dimension {dim}"),
                    );
                    return None;
                }
                match GaussianState::new(RVector::from_vec(r), sigma) {
                    Ok(s) => s,
                    Err(e) => {
                        ck.fail("model.initial", "initial_state", e.to_string());
                        return None;
                    }
                }
            }
            Some(_) => {
                ck.fail(
                    "model.initial.kind",
                    "initial_state",
                    "a gaussian system needs initial kind \"gaussian\"",
                );
                return None;
            }
        };
        let controller = match &self.feedback {
            FeedbackConfig::None => Controller::None,
            FeedbackConfig::Markovian { f, m: gain } => {
                let f = matrix(f, "feedback.f", ck)?;
                if f.nrows() != dim {
                    ck.fail(
                        "feedback.f",
                        "feedback_dimensions",
                        format!("F must have {dim} rows"),
                    );
                    return None;
                }
                let gain = match gain {
                    Some(g) => matrix(g, "feedback.m", ck)?,
                    None => match markovian_gain(&model, &f) {
                        Ok(g) => g.m,
                        Err(e) => {
                            ck.fail("feedback.f", "markovian_gain", e.to_string());
                            return None;
                        }
                    },
                };
                Controller::Markovian { f, m: gain }
            }
            FeedbackConfig::Lqg { f, p, q } => {
                let (f, p, q) = (
                    matrix(f, "feedback.f", ck),
                    matrix(p, "feedback.p", ck),
                    matrix(q, "feedback.q", ck),
                );
                let spec = FeedbackSpec {
                    f: f?,
                    p: p?,
                    q: q?,
                };
                match lqg_gain(&model, &spec) {
                    Ok(g) => Controller::StateFeedback { f: spec.f, k: g.k },
                    Err(e) => {
                        ck.fail("feedback", "lqg_gain", e.to_string());
                        return None;
                    }
                }
            }
            _ => return None,
        };
        let names = if self.output.observables.is_empty() {
            default_observables(&self.system)
        } else {
            self.output.observables.clone()
        };
        let mut observables = Vec::new();
        for (i, name) in names.iter().enumerate() {
            match parse_moment(name) {
                Some(mo) => {
                    let max = match mo {
                        Moment::Mean(i) => i,
                        Moment::Covariance(i, j) | Moment::Excess(i, j) | Moment::Total(i, j) => i.max(j),
                    };
                    if max >= dim {
                        ck.fail(&format!("output.observables[{i}]"), "unknown_observable", format!("{name:?} indexes past dimension {dim}"));
                    } else {
                        observables.push(Observable::moment(name.clone(), mo));
                    }
                }
                None => ck.fail(
                    &format!("output.observables[{i}]"),
                    "unknown_observable",
                    format!("unknown gaussian observable {name:?} (use r_i, sigma_i_j, excess_i_j, total_i_j)"),
                ),
            }
        }
        // without an unravelling nothing is measured
        let model = if u.kind == UnravellingKind::None {
            model.unmonitored()
        } else {
            model
        };
        let scenario = Scenario::Gaussian(GaussianScenario {
            model,
            initial,
            controller,
        });
        grid?;
        if !ck.out.is_empty() {
            return None;
        }
        let spec = self.ensemble_spec(observables);
        Some(if u.kind == UnravellingKind::None {
            Plan::GaussianMoments { spec, scenario }
        } else {
            Plan::Ensemble { spec, scenario }
        })
    }
}

pub fn default_observables(system: &SystemConfig) -> Vec<String> {
    let v: &[&str] = match system {
        SystemConfig::Qubit => &["proj_e", "sigma_x", "sigma_y", "sigma_z"],
        SystemConfig::Boson { .. } => &["n", "q", "p", "q*q", "p*p"],
        SystemConfig::Gaussian { .. } => &[
            "r_0",
            "r_1",
            "sigma_0_0",
            "sigma_1_1",
            "total_0_0",
            "total_1_1",
        ],
    };
    v.iter().map(|s| s.to_string()).collect()
}

/// Resolves `"a*b*c"` against the standard operator table.
fn operator_product(
    expr: &str,
    ops: &OperatorSet,
    path: &str,
    ck: &mut Checker,
) -> Option<CMatrix> {
    let mut acc: Option<CMatrix> = None;
    for factor in expr.split('*').map(str::trim) {
        let Some(op) = ops.get(factor) else {
            let known: Vec<&str> = ops.names().collect();
            ck.fail(
                path,
                "unknown_operator",
                format!("unknown operator {factor:?} (known: {})", known.join(", ")),
            );
            return None;
        };
        acc = Some(match acc {
            None => op.clone(),
            Some(a) => a * op,
        });
    }
    acc
}

fn terms_matrix(
    terms: &[Term],
    ops: &OperatorSet,
    path: &str,
    ck: &mut Checker,
) -> Option<CMatrix> {
    let d = ops.dim();
    let mut out = CMatrix::zeros(d, d);
    let mut ok = true;
    for (i, t) in terms.iter().enumerate() {
        if !(t.re.is_finite() && t.im.is_finite()) {
            ck.fail(
                &format!("{path}[{i}]"),
                "finite",
                "coefficients must be finite",
            );
            ok = false;
            continue;
        }
        match operator_product(&t.op, ops, &format!("{path}[{i}].op"), ck) {
            Some(op) => out += op * C64::new(t.re, t.im),
            None => ok = false,
        }
    }
    ok.then_some(out)
}
