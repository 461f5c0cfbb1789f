//! Executes a configuration and writes its outputs and manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use contmon_core::ensemble::{
    reference_solution, run_ensemble, run_ensemble_with_threads, StoredState,
};
use contmon_core::gaussian::{closed_loop_unconditional, riccati_steady_state, Controller, Gain};
use contmon_core::master::integrate_me_with;
use contmon_core::ops::expectation;
use contmon_core::{EnsembleStats, Error as CoreError, Observable, RMatrix, TrajectoryRecord};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{config_from_value, ConfigError, Plan, ScenarioConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PHYSICALITY: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Physicality(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A rerun produced different bytes.
    Mismatch(Vec<String>),
    Other(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Physicality(m) => write!(f, "physicality violation: {m}"),
            RunError::Io { path, source } => write!(f, "I/O error on {}: {source}", path.display()),
            RunError::Mismatch(files) => write!(
                f,
                "rerun differs from the manifest in: {}",
                files.join(", ")
            ),
            RunError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Physicality(_) => EXIT_PHYSICALITY,
            RunError::Io { .. } => EXIT_IO,
            RunError::Mismatch(_) | RunError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Physicality { .. } | CoreError::NotPositive { .. } => {
                RunError::Physicality(e.to_string())
            }
            CoreError::InvalidParameter(_)
            | CoreError::EfficiencyOutOfRange(_)
            | CoreError::UnphysicalBath { .. }
            | CoreError::NegativeRate(_)
            | CoreError::Unsupported(_)
            | CoreError::UnreachableDirection { .. } => RunError::Config(ConfigError {
                violations: vec![crate::config::Violation {
                    path: String::new(),
                    rule: "model",
                    message: e.to_string(),
                }],
            }),
            other => RunError::Other(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub wall_time_s: f64,
    pub diagnostics: Value,
    /// File name to hex SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Series produced by any plan, before formatting.
pub struct Series {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

impl Series {
    fn from_stats(s: &EnsembleStats) -> Self {
        Self {
            times: s.times.clone(),
            names: s.names.clone(),
            mean: s.mean.clone(),
            se: s.se.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for n in &self.names {
            let _ = write!(out, ",{n}.mean,{n}.se");
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t:.16e}");
            for o in 0..self.names.len() {
                let _ = write!(out, ",{:.16e},{:.16e}", self.mean[o][k], self.se[o][k]);
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.mean[i][..])
    }
}

pub struct RunResult {
    pub series: Series,
    pub records: Vec<TrajectoryRecord>,
    pub diagnostics: Value,
    pub steady_state: Option<Value>,
}

fn matrix_json(m: &RMatrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| json!(m[(i, j)])).collect()))
            .collect(),
    )
}

/// Runs a configuration in memory.
pub fn execute(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunResult, RunError> {
    let plan = config.plan()?;
    let steady_state = plan.gaussian().map(gaussian_steady_state);
    match plan {
        Plan::MasterEquation {
            model,
            rho0,
            grid,
            stepper,
            observables,
            sample_every,
        } => {
            let mut times = Vec::new();
            let mut mean = vec![Vec::new(); observables.len()];
            integrate_me_with(&model, &rho0, &grid, stepper, |k, rho| {
                if k % sample_every == 0 || k == grid.n_steps {
                    times.push(grid.t(k));
                    for (o, obs) in observables.iter().enumerate() {
                        let v = match obs {
                            Observable::Operator { op, .. } => {
                                expectation(rho, op).map(|z| z.re).unwrap_or(f64::NAN)
                            }
                            Observable::Moment { .. } => f64::NAN,
                        };
                        mean[o].push(v);
                    }
                }
            })?;
            let se = mean.iter().map(|m| vec![0.0; m.len()]).collect();
            Ok(RunResult {
                series: Series {
                    times,
                    names: observables.iter().map(|o| o.name().to_string()).collect(),
                    mean,
                    se,
                },
                records: Vec::new(),
                diagnostics: json!({"kind": "master_equation"}),
                steady_state,
            })
        }
        Plan::GaussianMoments { spec, scenario } => {
            let r = reference_solution(&spec, &scenario)?;
            let se = r.values.iter().map(|m| vec![0.0; m.len()]).collect();
            Ok(RunResult {
                series: Series {
                    times: r.times,
                    names: r.names,
                    mean: r.values,
                    se,
                },
                records: Vec::new(),
                diagnostics: json!({"kind": "gaussian_moments"}),
                steady_state,
            })
        }
        Plan::Ensemble { spec, scenario } => {
            let out = match opts.threads {
                Some(t) => run_ensemble_with_threads(&spec, &scenario, t)?,
                None => run_ensemble(&spec, &scenario)?,
            };
            let p = &out.stats.positivity;
            let mut diagnostics = json!({
                "kind": "ensemble",
                "n_traj": out.stats.n_traj,
                "positivity": {
                    "checked_steps": p.checked_steps,
                    "violating_steps": p.violating_steps,
                    "violating_trajectories": p.violating_trajectories,
                    "min_eigenvalue": if p.min_eigenvalue.is_finite() { json!(p.min_eigenvalue) } else { Value::Null },
                },
            });
            if let Some(w) = &out.stats.weights {
                diagnostics["weights"] =
                    json!({"final_ess": w.ess.last(), "min_ess": w.min_ess, "low_ess": w.low_ess});
            }
            Ok(RunResult {
                series: Series::from_stats(&out.stats),
                records: out.records,
                diagnostics,
                steady_state,
            })
        }
    }
}

fn gaussian_steady_state(g: &contmon_core::GaussianScenario) -> Value {
    let model = &g.model;
    let dim = model.dim();
    let (f, gain, kind) = match &g.controller {
        Controller::None => (RMatrix::identity(dim, dim), Gain::None, "none"),
        Controller::StateFeedback { f, k } => (f.clone(), Gain::State(k.clone()), "lqg"),
        Controller::Markovian { f, m } => (f.clone(), Gain::Markovian(m.clone()), "markovian"),
    };
    let mut out = json!({"labels": model.labels, "feedback": kind});
    match &gain {
        Gain::State(k) => out["k"] = matrix_json(k),
        Gain::Markovian(m) => out["m"] = matrix_json(m),
        Gain::None => {}
    }
    match riccati_steady_state(model) {
        Ok(s) => out["sigma_c"] = matrix_json(&s),
        Err(e) => out["sigma_c_error"] = json!(e.to_string()),
    }
    match closed_loop_unconditional(model, &f, &gain) {
        Ok(cl) => {
            out["excess"] = matrix_json(&cl.excess);
            out["sigma_unc"] = matrix_json(&cl.sigma_unc);
            out["loop_max_real_eigenvalue"] = json!(cl.loop_stability.max_real);
        }
        Err(e) => out["sigma_unc_error"] = json!(e.to_string()),
    }
    out
}

fn trajectories_csv(names: &[String], times: &[f64], records: &[TrajectoryRecord]) -> String {
    let weighted = records.iter().any(|r| r.log_weights.is_some());
    let mut out = String::from("trajectory,t");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    if weighted {
        out.push_str(",log_weight");
    }
    out.push('\n');
    for r in records {
        for (k, t) in times.iter().enumerate() {
            let _ = write!(out, "{},{t:.16e}", r.index);
            for e in &r.expectations {
                let _ = write!(out, ",{:.16e}", e[k]);
            }
            if let Some(w) = &r.log_weights {
                let _ = write!(out, ",{:.16e}", w[k]);
            }
            out.push('\n');
        }
    }
    out
}

fn stored_state_json(s: &StoredState) -> Value {
    match s {
        StoredState::Density(m) => json!({
            "re": (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].re).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "im": (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].im).collect::<Vec<_>>()).collect::<Vec<_>>(),
        }),
        StoredState::Pure(v) => json!({
            "re": v.iter().map(|z| z.re).collect::<Vec<_>>(),
            "im": v.iter().map(|z| z.im).collect::<Vec<_>>(),
        }),
        StoredState::Gaussian(g) => {
            json!({"r": g.r.iter().collect::<Vec<_>>(), "sigma": matrix_json(&g.sigma)})
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs `config` and writes `stats.csv`, optional trajectory files,
/// `steady_state.json` for Gaussian systems, `config.json` and the manifest.
pub fn run_to_dir(
    config: &ScenarioConfig,
    opts: &RunOptions,
    dir: &Path,
) -> Result<Manifest, RunError> {
    let started = Instant::now();
    let result = execute(config, opts)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    files.push((
        "config.json".into(),
        crate::config::to_json(config).into_bytes(),
    ));
    files.push(("stats.csv".into(), result.series.to_csv().into_bytes()));
    if config.output.store_trajectories && !result.records.is_empty() {
        files.push((
            "trajectories.csv".into(),
            trajectories_csv(&result.series.names, &result.series.times, &result.records)
                .into_bytes(),
        ));
        let states: Vec<Value> = result
            .records
            .iter()
            .map(|r| {
                json!({
                    "trajectory": r.index,
                    "states": r.states.iter().map(stored_state_json).collect::<Vec<_>>(),
                    "outputs": r.outputs,
                })
            })
            .collect();
        files.push((
            "trajectory_states.json".into(),
            serde_json::to_vec(&json!({"times": result.series.times, "records": states}))
                .map_err(|e| RunError::Other(e.to_string()))?,
        ));
    }
    if let Some(ss) = &result.steady_state {
        files.push((
            "steady_state.json".into(),
            serde_json::to_vec_pretty(ss).map_err(|e| RunError::Other(e.to_string()))?,
        ));
    }
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        outputs.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(config).map_err(|e| RunError::Other(e.to_string()))?,
        seed: config.run.seed,
        threads: opts.threads,
        wall_time_s: started.elapsed().as_secs_f64(),
        diagnostics: result.diagnostics,
        outputs,
    };
    let path = dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| RunError::Other(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| {
        RunError::Config(ConfigError {
            violations: vec![crate::config::Violation {
                path: path.display().to_string(),
                rule: "manifest",
                message: format!("unreadable manifest: {e}"),
            }],
        })
    })
}

/// Re-executes a manifest into `dir` and checks every output hash.
pub fn rerun(manifest_path: &Path, opts: &RunOptions, dir: &Path) -> Result<Manifest, RunError> {
    let old = read_manifest(manifest_path)?;
    let config = config_from_value(old.config.clone())?;
    let opts = RunOptions {
        threads: opts.threads.or(old.threads),
    };
    let new = run_to_dir(&config, &opts, dir)?;
    let mismatched: Vec<String> = old
        .outputs
        .iter()
        .filter(|(name, hash)| new.outputs.get(*name) != Some(hash))
        .map(|(name, _)| name.clone())
        .chain(
            new.outputs
                .keys()
                .filter(|n| !old.outputs.contains_key(*n))
                .cloned(),
        )
        .collect();
    if mismatched.is_empty() {
        Ok(new)
    } else {
        Err(RunError::Mismatch(mismatched))
    }
}
