//! Photodetection (jump) trajectories.
//!
//! Steppers never own a random source: each takes either a uniform variate
//! `u` in `[0, 1)` (a click happens when `u < p_click`) or an explicit click
//! flag, so the same record can drive several steppers.

use crate::error::{Error, Result};
use crate::master::{MonitorOps, OpenSystemModel};
use crate::ops::{
    check_dims, real, trace_product, unitary_exp, CMatrix, CVector, DensityMatrix, StateVector, I,
};

/// Below this `<c^dag c>` the click branch is unreachable.
pub const DARK_THRESHOLD: f64 = 1e-14;

/// Largest click probability per step accepted by the steppers.
pub const MAX_CLICK_PROBABILITY: f64 = 0.1;

/// Click record of one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpRecord {
    pub jump_times: Vec<f64>,
    pub grid_dn: Vec<u8>,
}

impl JumpRecord {
    pub fn push(&mut self, t_end: f64, click: bool) {
        self.grid_dn.push(click as u8);
        if click {
            self.jump_times.push(t_end);
        }
    }

    pub fn clicks(&self) -> usize {
        self.jump_times.len()
    }
}

/// State after one photodetection step.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpStep {
    pub state: DensityMatrix,
    pub click: bool,
    pub p_click: f64,
}

/// Unnormalized conditional state stored as its normalized view plus
/// `log Tr rho_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedState {
    pub state: DensityMatrix,
    pub log_weight: f64,
}

impl WeightedState {
    pub fn new(state: DensityMatrix) -> Self {
        Self {
            state,
            log_weight: 0.0,
        }
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    pub fn unnormalized(&self) -> CMatrix {
        self.state.matrix() * real(self.weight())
    }

    /// Folds an unnormalized update `rho_bar' = scale * m` into the state.
    pub(crate) fn absorb(&self, m: CMatrix, log_scale: f64) -> Result<Self> {
        let tr = m.trace().re;
        if !tr.is_finite() || tr <= 0.0 {
            return Err(Error::NonFinite("linear trajectory trace"));
        }
        Ok(Self {
            state: DensityMatrix::normalize(m)?,
            log_weight: self.log_weight + log_scale + tr.ln(),
        })
    }
}

/// Discretization of the linear (unnormalized) equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearScheme {
    /// Literal Euler increment of the linear equation.
    Euler,
    /// Unnormalized Kraus numerator times the ostensible-law correction.
    #[default]
    Kraus,
}

pub(crate) fn require_vacuum(model: &OpenSystemModel, what: &str) -> Result<()> {
    if !model.bath().is_vacuum() {
        return Err(Error::Unsupported(format!(
            "{what} needs a vacuum input; photon counting with thermal or squeezed baths is not defined"
        )));
    }
    Ok(())
}

fn mean_k(m: &MonitorOps, rho: &CMatrix) -> f64 {
    trace_product(rho, &m.k).re
}

/// Click probability `eta kappa <c^dag c> dt`.
pub fn click_probability(model: &OpenSystemModel, rho: &DensityMatrix, dt: f64) -> Result<f64> {
    check_dims(model.hamiltonian(), rho)?;
    let m = model.monitor()?;
    Ok(model.efficiency() * m.kappa * mean_k(m, rho).max(0.0) * dt)
}

fn checked_probability(p: f64) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::NonFinite("click probability"));
    }
    if p >= MAX_CLICK_PROBABILITY {
        return Err(Error::StepTooLarge(p));
    }
    Ok(p)
}

fn sandwich(a: &CMatrix, rho: &CMatrix, a_adj: &CMatrix) -> CMatrix {
    a * rho * a_adj
}

fn normalize(m: CMatrix) -> Result<DensityMatrix> {
    DensityMatrix::normalize(m)
}

fn collapse(
    m: &MonitorOps,
    rho: &CMatrix,
    op: &CMatrix,
    op_adj: &CMatrix,
) -> Result<DensityMatrix> {
    let n = mean_k(m, rho);
    if n < DARK_THRESHOLD {
        return Err(Error::DarkStateJump(n));
    }
    normalize(sandwich(op, rho, op_adj))
}

/// Euler no-click update of the efficiency-`eta` photodetection equation:
/// `-i[H,rho] - eta kappa/2 H[c^dag c] rho + (1-eta) kappa D[c] rho`
/// plus the unmonitored channels, then renormalized.
fn sme_no_click(model: &OpenSystemModel, rho: &CMatrix, dt: f64) -> Result<DensityMatrix> {
    let m = model.monitor()?;
    let (g, g_adj) = model.effective_generator();
    let eta = model.efficiency();
    // G rho + rho G^dag + eta kappa <K> rho is the -eta kappa/2 H[K] part
    // together with the anticommutator of the deficit dissipator.
    let mut inc = g * rho + rho * g_adj + rho * real(eta * m.kappa * mean_k(m, rho));
    if eta < 1.0 {
        inc += sandwich(&m.c, rho, &m.c_adj) * real((1.0 - eta) * m.kappa);
    }
    for (l, l_adj) in &m.others {
        inc += sandwich(l, rho, l_adj);
    }
    normalize(rho + inc * real(dt))
}

/// Photodetection update with an externally fixed click outcome.
pub fn jump_sme_update(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    click: bool,
) -> Result<DensityMatrix> {
    check_dims(model.hamiltonian(), rho)?;
    require_vacuum(model, "photodetection")?;
    let m = model.monitor()?;
    if click {
        collapse(m, rho, &m.c, &m.c_adj)
    } else {
        sme_no_click(model, rho, dt)
    }
}

/// One step of the photodetection equation; `u` is a uniform variate.
pub fn jump_sme_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    u: f64,
) -> Result<JumpStep> {
    let p = checked_probability(click_probability(model, rho, dt)?)?;
    let click = u < p;
    Ok(JumpStep {
        state: jump_sme_update(rho, model, dt, click)?,
        click,
        p_click: p,
    })
}

/// Kraus update with a fixed outcome: `M_1 = sqrt(eta kappa dt) c` on a
/// click, otherwise `M_0 rho M_0^dag + (1-eta) kappa c rho c^dag dt` with
/// `M_0 = 1 - i H dt - kappa/2 c^dag c dt`. Positive for every `dt`.
pub fn jump_kraus_update(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    click: bool,
) -> Result<DensityMatrix> {
    check_dims(model.hamiltonian(), rho)?;
    require_vacuum(model, "photodetection")?;
    let m = model.monitor()?;
    if click {
        return collapse(m, rho, &m.c, &m.c_adj);
    }
    normalize(kraus_no_click_numerator(model, m, rho, dt))
}

fn kraus_no_click_numerator(
    model: &OpenSystemModel,
    m: &MonitorOps,
    rho: &CMatrix,
    dt: f64,
) -> CMatrix {
    let (g, g_adj) = model.effective_generator();
    let d = rho.nrows();
    let m0 = CMatrix::identity(d, d) + g * real(dt);
    let m0_adj = CMatrix::identity(d, d) + g_adj * real(dt);
    let mut num = sandwich(&m0, rho, &m0_adj);
    let eta = model.efficiency();
    if eta < 1.0 {
        num += sandwich(&m.c, rho, &m.c_adj) * real((1.0 - eta) * m.kappa * dt);
    }
    for (l, l_adj) in &m.others {
        num += sandwich(l, rho, l_adj) * real(dt);
    }
    num
}

pub fn jump_kraus_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    u: f64,
) -> Result<JumpStep> {
    let p = checked_probability(click_probability(model, rho, dt)?)?;
    let click = u < p;
    Ok(JumpStep {
        state: jump_kraus_update(rho, model, dt, click)?,
        click,
        p_click: p,
    })
}

/// State-vector step after one photodetection interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SseStep {
    pub state: StateVector,
    pub click: bool,
    pub p_click: f64,
}

fn check_sse_model(model: &OpenSystemModel) -> Result<()> {
    if model.efficiency() != 1.0 {
        return Err(Error::Unsupported(format!(
            "the stochastic Schroedinger equation needs unit efficiency, got {}",
            model.efficiency()
        )));
    }
    if !model.unmonitored_channels().is_empty() {
        return Err(Error::Unsupported(
            "the stochastic Schroedinger equation needs every channel monitored".into(),
        ));
    }
    require_vacuum(model, "photodetection")
}

/// Stochastic Schroedinger step with a fixed outcome.
pub fn jump_sse_update(
    psi: &StateVector,
    model: &OpenSystemModel,
    dt: f64,
    click: bool,
) -> Result<StateVector> {
    check_sse_model(model)?;
    let m = model.monitor()?;
    if psi.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: psi.dim(),
        });
    }
    let v = psi.amplitudes();
    let k_psi = &m.k * v;
    let n = v.dotc(&k_psi).re;
    if click {
        if n < DARK_THRESHOLD {
            return Err(Error::DarkStateJump(n));
        }
        return StateVector::normalized(&m.c * v);
    }
    let drift: CVector =
        model.hamiltonian() * v * (-I) + (v * real(n) - k_psi) * real(0.5 * m.kappa);
    StateVector::normalized(v + drift * real(dt))
}

pub fn jump_sse_step(
    psi: &StateVector,
    model: &OpenSystemModel,
    dt: f64,
    u: f64,
) -> Result<SseStep> {
    check_sse_model(model)?;
    let m = model.monitor()?;
    let n = psi
        .amplitudes()
        .dotc(&(&m.k * psi.amplitudes()))
        .re
        .max(0.0);
    let p = checked_probability(m.kappa * n * dt)?;
    let click = u < p;
    Ok(SseStep {
        state: jump_sse_update(psi, model, dt, click)?,
        click,
        p_click: p,
    })
}

/// Ostensible click probability `eta kappa beta dt` for linear trajectories.
pub fn ostensible_click_probability(model: &OpenSystemModel, dt: f64, beta: f64) -> Result<f64> {
    let m = model.monitor()?;
    Ok(model.efficiency() * m.kappa * beta * dt)
}

/// Linear photodetection step for a click outcome drawn from the
/// ostensible law. The weight absorbs the trace change, so that
/// `p_true = p_ost * Tr rho_bar` step by step.
pub fn linear_jump_step(
    w: &WeightedState,
    model: &OpenSystemModel,
    dt: f64,
    click: bool,
    beta: f64,
    scheme: LinearScheme,
) -> Result<WeightedState> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ostensible rate beta must be positive, got {beta}"
        )));
    }
    check_dims(model.hamiltonian(), &w.state)?;
    require_vacuum(model, "photodetection")?;
    let m = model.monitor()?;
    let rho = w.state.matrix();
    let eta = model.efficiency();
    if click {
        let num = sandwich(&m.c, rho, &m.c_adj);
        if num.trace().re < DARK_THRESHOLD {
            // the true law never clicks here: the trajectory keeps zero weight
            return Ok(WeightedState {
                state: w.state.clone(),
                log_weight: f64::NEG_INFINITY,
            });
        }
        return w.absorb(num, -beta.ln());
    }
    match scheme {
        LinearScheme::Euler => {
            let (g, g_adj) = model.effective_generator();
            let mut inc = g * rho + rho * g_adj + rho * real(eta * beta * m.kappa);
            if eta < 1.0 {
                inc += sandwich(&m.c, rho, &m.c_adj) * real((1.0 - eta) * m.kappa);
            }
            for (l, l_adj) in &m.others {
                inc += sandwich(l, rho, l_adj);
            }
            w.absorb(rho + inc * real(dt), 0.0)
        }
        LinearScheme::Kraus => {
            let num = kraus_no_click_numerator(model, m, rho, dt);
            w.absorb(num, (eta * beta * m.kappa * dt).ln_1p())
        }
    }
}

/// Unitary `e^{-iF}` applied right after each detector click.
#[derive(Debug, Clone)]
pub struct JumpFeedback {
    f: CMatrix,
    kick: CMatrix,
}

impl JumpFeedback {
    pub fn new(f: CMatrix) -> Result<Self> {
        let kick = unitary_exp(&f, 1.0)?;
        Ok(Self { f, kick })
    }

    pub fn generator(&self) -> &CMatrix {
        &self.f
    }

    /// `e^{-iF}`
    pub fn kick(&self) -> &CMatrix {
        &self.kick
    }

    /// Jump operator of the equivalent unconditional master equation.
    pub fn effective_jump(&self, c: &CMatrix) -> CMatrix {
        &self.kick * c
    }
}

/// Photodetection step with feedback; requires unit efficiency.
pub fn jump_feedback_update(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    fb: &JumpFeedback,
    dt: f64,
    click: bool,
) -> Result<DensityMatrix> {
    if model.efficiency() != 1.0 {
        return Err(Error::Unsupported(format!(
            "photodetection feedback is defined for unit efficiency only, got {}",
            model.efficiency()
        )));
    }
    check_dims(model.hamiltonian(), rho)?;
    check_dims(model.hamiltonian(), &fb.f)?;
    require_vacuum(model, "photodetection")?;
    let m = model.monitor()?;
    if click {
        let op = fb.effective_jump(&m.c);
        let op_adj = op.adjoint();
        collapse(m, rho, &op, &op_adj)
    } else {
        sme_no_click(model, rho, dt)
    }
}

pub fn jump_feedback_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    fb: &JumpFeedback,
    dt: f64,
    u: f64,
) -> Result<JumpStep> {
    let p = checked_probability(click_probability(model, rho, dt)?)?;
    let click = u < p;
    Ok(JumpStep {
        state: jump_feedback_update(rho, model, fb, dt, click)?,
        click,
        p_click: p,
    })
}
