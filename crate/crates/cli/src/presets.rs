//! Named ready-to-run scenarios and `key=value` overrides.

use serde_json::{json, Value};

use crate::config::{config_from_value, ConfigError, ScenarioConfig, Violation};

pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    build: fn() -> Value,
}

impl Preset {
    pub fn value(&self) -> Value {
        let mut v = (self.build)();
        v["name"] = json!(self.name);
        v
    }
}

fn decay_model() -> Value {
    json!({
        "channels": [{"op": "sigma_minus", "rate": 1.0}],
        "initial": {"kind": "basis", "index": 0}
    })
}

fn qubit_run(n_traj: usize) -> Value {
    json!({"dt": 1e-3, "t_final": 5.0, "n_traj": n_traj, "seed": 1, "sample_every": 10})
}

fn opo_model(eta: f64) -> Value {
    json!({
        "efficiency": eta,
        "gaussian": {"opo": {"chi": 0.2, "kappa": 1.0}}
    })
}

fn opo_run(n_traj: usize) -> Value {
    json!({"dt": 1e-3, "t_final": 10.0, "n_traj": n_traj, "seed": 1, "sample_every": 100})
}

const OPO_OBSERVABLES: &[&str] = &[
    "r_0",
    "sigma_0_0",
    "sigma_1_1",
    "excess_0_0",
    "total_0_0",
    "total_1_1",
];

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "qubit_decay_me",
        summary: "spontaneous emission from |e>, master equation",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": decay_model(),
                "run": qubit_run(1),
            })
        },
    },
    Preset {
        name: "qubit_decay_jump",
        summary: "spontaneous emission under direct photodetection",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": decay_model(),
                "unravelling": {"kind": "jump"},
                "run": qubit_run(1000),
            })
        },
    },
    Preset {
        name: "qubit_homodyne",
        summary: "driven resonance fluorescence under homodyne detection (eta=0.8)",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": {
                    "hamiltonian": [{"op": "sigma_x", "re": 0.5}],
                    "channels": [{"op": "sigma_minus", "rate": 1.0}],
                    "efficiency": 0.8,
                    "initial": {"kind": "basis", "index": 1}
                },
                "unravelling": {"kind": "homodyne"},
                "run": qubit_run(500),
            })
        },
    },
    Preset {
        name: "qubit_pd_feedback",
        summary: "photodetection feedback: a pi/2 x-rotation after each click",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": {
                    "hamiltonian": [{"op": "sigma_y", "re": 0.5}],
                    "channels": [{"op": "sigma_minus", "rate": 1.0}]
                },
                "unravelling": {"kind": "jump"},
                "feedback": {"kind": "photodetection", "f": [{"op": "sigma_x", "re": std::f64::consts::FRAC_PI_4}]},
                "run": qubit_run(1000),
            })
        },
    },
    Preset {
        name: "qubit_homodyne_feedback",
        summary: "homodyne current fed back as a sigma_y drive",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": {
                    "channels": [{"op": "sigma_minus", "rate": 1.0}],
                    "efficiency": 0.9
                },
                "unravelling": {"kind": "homodyne"},
                "feedback": {"kind": "homodyne", "f": [{"op": "sigma_y", "re": 0.3}]},
                "run": qubit_run(500),
            })
        },
    },
    Preset {
        name: "thermal_bath_homodyne",
        summary: "qubit in a thermal bath (N=0.5), homodyne detection",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": {
                    "channels": [{"op": "sigma_minus", "rate": 1.0}],
                    "bath": {"n_thermal": 0.5, "m": [0.0, 0.0]}
                },
                "unravelling": {"kind": "homodyne"},
                "run": qubit_run(500),
            })
        },
    },
    Preset {
        name: "squeezed_vacuum_homodyne",
        summary: "qubit in a squeezed vacuum, homodyne detection",
        build: || {
            // minimum-uncertainty squeezing |M|^2 = N(N+1)
            let n: f64 = 0.25;
            json!({
                "schema": 1,
                "system": {"kind": "qubit"},
                "model": {
                    "channels": [{"op": "sigma_minus", "rate": 1.0}],
                    "bath": {"n_thermal": n, "m": [(n * (n + 1.0)).sqrt(), 0.0]}
                },
                "unravelling": {"kind": "homodyne"},
                "run": qubit_run(500),
            })
        },
    },
    Preset {
        name: "coherent_drive",
        summary: "damped oscillator driven by a coherent input, homodyne detection",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "boson", "dim": 12},
                "model": {
                    "channels": [{"op": "a", "rate": 1.0}],
                    "drive": [0.5, 0.0],
                    "initial": {"kind": "basis", "index": 0}
                },
                "unravelling": {"kind": "homodyne"},
                "run": {"dt": 1e-3, "t_final": 5.0, "n_traj": 200, "seed": 1, "sample_every": 10},
                "output": {"observables": ["n", "q", "p"]}
            })
        },
    },
    Preset {
        name: "opo_unconditional",
        summary: "degenerate parametric oscillator below threshold, averaged moments",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "gaussian", "n_modes": 1},
                "model": opo_model(1.0),
                "run": opo_run(1),
                "output": {"observables": ["sigma_0_0", "sigma_1_1"]}
            })
        },
    },
    Preset {
        name: "opo_conditional",
        summary: "parametric oscillator with homodyne detection of the x quadrature",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "gaussian", "n_modes": 1},
                "model": opo_model(1.0),
                "unravelling": {"kind": "homodyne"},
                "run": opo_run(200),
                "output": {"observables": OPO_OBSERVABLES}
            })
        },
    },
    Preset {
        name: "opo_markovian_feedback",
        summary: "parametric oscillator with noise-cancelling current feedback",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "gaussian", "n_modes": 1},
                "model": opo_model(1.0),
                "unravelling": {"kind": "homodyne"},
                "feedback": {"kind": "markovian", "f": [[1.0, 0.0], [0.0, 1.0]]},
                "run": opo_run(200),
                "output": {"observables": OPO_OBSERVABLES}
            })
        },
    },
    Preset {
        name: "opo_lqg",
        summary: "parametric oscillator with optimal (LQG) state feedback, q=1",
        build: || {
            json!({
                "schema": 1,
                "system": {"kind": "gaussian", "n_modes": 1},
                "model": opo_model(1.0),
                "unravelling": {"kind": "homodyne"},
                "feedback": {
                    "kind": "lqg",
                    "f": [[1.0, 0.0], [0.0, 1.0]],
                    "p": [[1.0, 0.0], [0.0, 0.0]],
                    "q": [[1.0, 0.0], [0.0, 1.0]]
                },
                "run": opo_run(200),
                "output": {"observables": OPO_OBSERVABLES}
            })
        },
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// Sets `path` (dotted, with numeric segments indexing arrays) to `raw`,
/// parsed as JSON when possible and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let fail = |msg: String| ConfigError {
        violations: vec![Violation {
            path: assignment.to_string(),
            rule: "override",
            message: msg,
        }],
    };
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| fail("expected key=value".into()))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| fail(format!("{seg:?} indexes a non-array")))?;
            let len = arr.len();
            node = arr
                .get_mut(idx)
                .ok_or_else(|| fail(format!("index {idx} out of range (length {len})")))?;
        } else {
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
            let obj = node
                .as_object_mut()
                .ok_or_else(|| fail(format!("{seg:?} is not inside an object")))?;
            node = obj.entry(seg.to_string()).or_insert(Value::Null);
        }
        if last {
            *node = value;
            return Ok(());
        }
    }
    Ok(())
}

pub fn load_preset(name: &str, overrides: &[String]) -> Result<ScenarioConfig, ConfigError> {
    let preset = find(name).ok_or_else(|| ConfigError {
        violations: vec![Violation {
            path: String::new(),
            rule: "unknown_preset",
            message: format!(
                "unknown preset {name:?} (available: {})",
                PRESETS
                    .iter()
                    .map(|p| p.name)
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        }],
    })?;
    let mut v = preset.value();
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    config_from_value(v)
}
