//! Unconditional Lindblad dynamics: right-hand sides, the vectorized
//! Liouvillian, and fixed-step integration.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::ops::{
    check_dims, check_square, commutator, dissipator_unchecked, hermiticity_defect, real, CMatrix,
    CVector, DensityMatrix, Tolerances, C64, I,
};

/// Largest superoperator side (`dim^2`) the dense Liouvillian will build.
pub const MAX_LIOUVILLIAN_DIM: usize = 4096;

/// Per-step trace drift above which an integration step is rejected.
pub const TRACE_DRIFT_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub rate: f64,
    pub op: CMatrix,
}

impl Channel {
    pub fn new(rate: f64, op: CMatrix) -> Self {
        Self { rate, op }
    }
}

/// Statistics of the input field of the monitored channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathSpec {
    /// Mean thermal photon number.
    pub n_thermal: f64,
    /// Squeezing correlation.
    pub m: C64,
    /// Coherent drive amplitude.
    pub beta: C64,
}

impl Default for BathSpec {
    fn default() -> Self {
        Self::vacuum()
    }
}

impl BathSpec {
    pub fn vacuum() -> Self {
        Self {
            n_thermal: 0.0,
            m: C64::new(0.0, 0.0),
            beta: C64::new(0.0, 0.0),
        }
    }

    pub fn thermal(n: f64) -> Self {
        Self {
            n_thermal: n,
            ..Self::vacuum()
        }
    }

    pub fn squeezed(n: f64, m: C64) -> Self {
        Self {
            n_thermal: n,
            m,
            ..Self::vacuum()
        }
    }

    pub fn is_vacuum(&self) -> bool {
        self.n_thermal == 0.0 && self.m == C64::new(0.0, 0.0) && self.beta == C64::new(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_thermal;
        if !n.is_finite() || n < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "thermal photon number must be non-negative, got {n}"
            )));
        }
        if !(self.m.re.is_finite() && self.m.im.is_finite())
            || !(self.beta.re.is_finite() && self.beta.im.is_finite())
        {
            return Err(Error::NonFinite("bath parameters"));
        }
        let bound = n * (n + 1.0);
        let m2 = self.m.norm_sqr();
        if m2 > bound * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::UnphysicalBath {
                m_abs_sq: m2,
                bound,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    /// `-i H - 1/2 sum_k kappa_k c_k^dag c_k`
    g: CMatrix,
    g_adj: CMatrix,
    /// `sqrt(kappa_k) c_k`
    jumps: Vec<CMatrix>,
    jumps_adj: Vec<CMatrix>,
    monitor: Option<MonitorOps>,
}

/// Cached operators of the monitored channel used by the steppers.
#[derive(Debug, Clone)]
pub(crate) struct MonitorOps {
    pub kappa: f64,
    pub c: CMatrix,
    pub c_adj: CMatrix,
    /// `c^dag c`
    pub k: CMatrix,
    /// `c e^{i theta}` and its adjoint
    pub c_theta: CMatrix,
    pub c_theta_adj: CMatrix,
    /// `(sqrt(kappa_k) c_k, adjoint)` of the unmonitored channels
    pub others: Vec<(CMatrix, CMatrix)>,
}

/// Hamiltonian, collapse channels, bath and detection settings.
///
/// `channels[0]` is the monitored channel: its rate and operator are the
/// `kappa` and `c` of every unravelling, and the bath acts on it. Further
/// channels are unmonitored losses.
#[derive(Debug, Clone)]
pub struct OpenSystemModel {
    h: CMatrix,
    channels: Vec<Channel>,
    bath: BathSpec,
    eta: f64,
    theta: f64,
    prepared: OnceLock<Prepared>,
}

impl PartialEq for OpenSystemModel {
    fn eq(&self, other: &Self) -> bool {
        self.h == other.h
            && self.channels == other.channels
            && self.bath == other.bath
            && self.eta == other.eta
            && self.theta == other.theta
    }
}

impl OpenSystemModel {
    pub fn new(h: CMatrix, channels: Vec<Channel>) -> Result<Self> {
        check_square(&h)?;
        let defect = hermiticity_defect(&h);
        if defect > Tolerances::default().hermiticity {
            return Err(Error::NotHermitian {
                what: "Hamiltonian",
                defect,
            });
        }
        for ch in &channels {
            check_dims(&h, &ch.op)?;
            if !ch.rate.is_finite() {
                return Err(Error::NonFinite("channel rate"));
            }
            if ch.rate < 0.0 {
                return Err(Error::NegativeRate(ch.rate));
            }
        }
        if h.iter()
            .chain(channels.iter().flat_map(|c| c.op.iter()))
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::NonFinite("operator"));
        }
        Ok(Self {
            h,
            channels,
            bath: BathSpec::vacuum(),
            eta: 1.0,
            theta: 0.0,
            prepared: OnceLock::new(),
        })
    }

    /// Single monitored channel `(kappa, c)`.
    pub fn monitored(h: CMatrix, kappa: f64, c: CMatrix) -> Result<Self> {
        Self::new(h, vec![Channel::new(kappa, c)])
    }

    pub fn with_efficiency(mut self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::EfficiencyOutOfRange(eta));
        }
        self.eta = eta;
        Ok(self)
    }

    pub fn with_phase(mut self, theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::NonFinite("homodyne phase"));
        }
        self.theta = theta;
        self.prepared = OnceLock::new();
        Ok(self)
    }

    pub fn with_bath(mut self, bath: BathSpec) -> Result<Self> {
        bath.validate()?;
        self.bath = bath;
        Ok(self)
    }

    pub fn with_hamiltonian(&self, h: CMatrix) -> Result<Self> {
        Self::new(h, self.channels.clone())?
            .with_efficiency(self.eta)?
            .with_phase(self.theta)?
            .with_bath(self.bath)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.h
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn bath(&self) -> &BathSpec {
        &self.bath
    }

    pub fn efficiency(&self) -> f64 {
        self.eta
    }

    pub fn phase(&self) -> f64 {
        self.theta
    }

    /// The detected channel.
    pub fn monitored_channel(&self) -> Result<&Channel> {
        self.channels.first().ok_or(Error::NoMonitoredChannel)
    }

    pub fn unmonitored_channels(&self) -> &[Channel] {
        if self.channels.is_empty() {
            &[]
        } else {
            &self.channels[1..]
        }
    }

    /// Monitored operator with the local-oscillator phase folded in, `c e^{i theta}`.
    pub fn phased_operator(&self) -> Result<CMatrix> {
        let ch = self.monitored_channel()?;
        Ok(&ch.op * (I * self.theta).exp())
    }

    fn prepared(&self) -> &Prepared {
        self.prepared.get_or_init(|| {
            let mut g = &self.h * (-I);
            let mut jumps = Vec::with_capacity(self.channels.len());
            for ch in &self.channels {
                let cdc = ch.op.adjoint() * &ch.op;
                g -= cdc * real(0.5 * ch.rate);
                jumps.push(&ch.op * real(ch.rate.sqrt()));
            }
            let monitor = self.channels.first().map(|ch| {
                let c_theta = &ch.op * (I * self.theta).exp();
                MonitorOps {
                    kappa: ch.rate,
                    c_adj: ch.op.adjoint(),
                    k: ch.op.adjoint() * &ch.op,
                    c_theta_adj: c_theta.adjoint(),
                    c_theta,
                    c: ch.op.clone(),
                    others: jumps[1..]
                        .iter()
                        .map(|l| (l.clone(), l.adjoint()))
                        .collect(),
                }
            });
            Prepared {
                monitor,
                g_adj: g.adjoint(),
                jumps_adj: jumps.iter().map(|l| l.adjoint()).collect(),
                g,
                jumps,
            }
        })
    }

    pub(crate) fn monitor(&self) -> Result<&MonitorOps> {
        self.prepared()
            .monitor
            .as_ref()
            .ok_or(Error::NoMonitoredChannel)
    }

    /// `-i H - 1/2 sum_k kappa_k c_k^dag c_k` and its adjoint.
    pub(crate) fn effective_generator(&self) -> (&CMatrix, &CMatrix) {
        let p = self.prepared();
        (&p.g, &p.g_adj)
    }

    /// Lindblad rhs for vacuum input, without dimension checks.
    pub(crate) fn lindblad_unchecked(&self, rho: &CMatrix) -> CMatrix {
        let p = self.prepared();
        let g_rho = &p.g * rho;
        // rho G^dag rather than (G rho)^dag keeps the map linear on
        // non-Hermitian inputs such as matrix units.
        let mut out = g_rho + rho * &p.g_adj;
        for (l, ld) in p.jumps.iter().zip(&p.jumps_adj) {
            out += l * rho * ld;
        }
        out
    }
}

/// `-i[H, rho] + sum_k kappa_k D[c_k] rho` for a vacuum bath.
pub fn liouvillian_apply(model: &OpenSystemModel, rho: &CMatrix) -> Result<CMatrix> {
    check_dims(&model.h, rho)?;
    if !model.bath.is_vacuum() {
        return Err(Error::Unsupported(
            "liouvillian_apply needs a vacuum bath; use generalized_bath_me_rhs".into(),
        ));
    }
    Ok(model.lindblad_unchecked(rho))
}

/// `i sqrt(kappa) (beta^* c - beta c^dag)`.
pub fn coherent_drive_hamiltonian(c: &CMatrix, kappa: f64, beta: C64) -> CMatrix {
    let s = kappa.max(0.0).sqrt();
    (c * beta.conj() - c.adjoint() * beta) * (I * s)
}

/// Master equation of the monitored channel coupled to a squeezed-thermal,
/// coherently displaced input:
/// `kappa (N+1) D[c] + kappa N D[c^dag] + kappa M/2 [c^dag,[c^dag,.]]
///  + kappa M^*/2 [c,[c,.]] - i[H + H_beta, .]`, plus the unmonitored channels.
pub fn generalized_bath_me_rhs(model: &OpenSystemModel, rho: &CMatrix) -> Result<CMatrix> {
    check_dims(&model.h, rho)?;
    model.bath.validate()?;
    Ok(generalized_unchecked(model, rho))
}

pub(crate) fn generalized_unchecked(model: &OpenSystemModel, rho: &CMatrix) -> CMatrix {
    let Some(ch) = model.channels.first() else {
        return model.lindblad_unchecked(rho);
    };
    let b = &model.bath;
    let kappa = ch.rate;
    let c = &ch.op;
    let cd = c.adjoint();
    let h_beta = coherent_drive_hamiltonian(c, kappa, b.beta);
    let h = &model.h + h_beta;
    let mut out = commutator(&h, rho) * (-I);
    out += dissipator_unchecked(c, rho) * real(kappa * (b.n_thermal + 1.0));
    if b.n_thermal != 0.0 {
        out += dissipator_unchecked(&cd, rho) * real(kappa * b.n_thermal);
    }
    if b.m != C64::new(0.0, 0.0) {
        out += commutator(&cd, &commutator(&cd, rho)) * (b.m * (0.5 * kappa));
        out += commutator(c, &commutator(c, rho)) * (b.m.conj() * (0.5 * kappa));
    }
    for other in model.unmonitored_channels() {
        out += dissipator_unchecked(&other.op, rho) * real(other.rate);
    }
    out
}

/// Full unconditional rhs, dispatching on the bath.
pub fn me_rhs(model: &OpenSystemModel, rho: &CMatrix) -> Result<CMatrix> {
    check_dims(&model.h, rho)?;
    Ok(me_rhs_unchecked(model, rho))
}

pub(crate) fn me_rhs_unchecked(model: &OpenSystemModel, rho: &CMatrix) -> CMatrix {
    if model.bath.is_vacuum() {
        model.lindblad_unchecked(rho)
    } else {
        generalized_unchecked(model, rho)
    }
}

/// Column-stacking vectorization.
pub fn vectorize(m: &CMatrix) -> CVector {
    CVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &CVector, dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, v.as_slice())
}

/// Superoperator `L` with `vec(L rho) = L vec(rho)` (column stacking),
/// including any non-vacuum bath.
pub fn liouvillian_matrix(model: &OpenSystemModel) -> Result<CMatrix> {
    let d = model.dim();
    let n = d * d;
    if n > MAX_LIOUVILLIAN_DIM {
        return Err(Error::TooLarge {
            dim: n,
            limit: MAX_LIOUVILLIAN_DIM,
        });
    }
    let mut l = CMatrix::zeros(n, n);
    let mut unit = CMatrix::zeros(d, d);
    for col in 0..n {
        let (i, j) = (col % d, col / d);
        unit[(i, j)] = real(1.0);
        let image = me_rhs_unchecked(model, &unit);
        unit[(i, j)] = real(0.0);
        l.column_mut(col).copy_from_slice(image.as_slice());
    }
    Ok(l)
}

/// `exp(t L)` for a fixed interval `t`.
#[derive(Debug, Clone)]
pub struct Propagator {
    dim: usize,
    interval: f64,
    matrix: CMatrix,
}

impl Propagator {
    pub fn new(model: &OpenSystemModel, interval: f64) -> Result<Self> {
        let l = liouvillian_matrix(model)?;
        Ok(Self {
            dim: model.dim(),
            interval,
            matrix: (l * real(interval)).exp(),
        })
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        if rho.nrows() != self.dim || rho.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: rho.nrows(),
            });
        }
        Ok(unvectorize(&(&self.matrix * vectorize(rho)), self.dim))
    }

    /// Composition `self` after `first`, a propagator over both intervals.
    pub fn then(&self, other: &Propagator) -> Propagator {
        Propagator {
            dim: self.dim,
            interval: self.interval + other.interval,
            matrix: &other.matrix * &self.matrix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stepper {
    Rk4,
    Expm,
}

/// Uniform grid `t_k = k dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if !(t_final.is_finite() && t_final >= dt) {
            return Err(Error::InvalidParameter(format!(
                "t_final must be at least dt, got {t_final}"
            )));
        }
        let steps = (t_final / dt).round();
        if ((steps * dt) - t_final).abs() > 1e-9 * t_final.max(1.0) {
            return Err(Error::GridMismatch(format!(
                "t_final {t_final} is not a multiple of dt {dt}"
            )));
        }
        Ok(Self {
            dt,
            n_steps: steps as usize,
        })
    }

    pub fn with_steps(dt: f64, n_steps: usize) -> Self {
        Self { dt, n_steps }
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.t(self.n_steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }
}

pub(crate) fn rk4_step(model: &OpenSystemModel, rho: &CMatrix, dt: f64) -> CMatrix {
    let f = |r: &CMatrix| me_rhs_unchecked(model, r);
    let k1 = f(rho);
    let k2 = f(&(rho + &k1 * real(0.5 * dt)));
    let k3 = f(&(rho + &k2 * real(0.5 * dt)));
    let k4 = f(&(rho + &k3 * real(dt)));
    rho + (k1 + (k2 + k3) * real(2.0) + k4) * real(dt / 6.0)
}

/// Integrates the master equation on `grid`, returning the state at every
/// grid point (including `t = 0`).
pub fn integrate_me(
    model: &OpenSystemModel,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<Vec<DensityMatrix>> {
    let mut out = Vec::with_capacity(grid.len());
    integrate_me_with(model, rho0, grid, stepper, |_, rho| {
        out.push(DensityMatrix::from_matrix_unchecked(rho.clone()));
    })?;
    Ok(out)
}

/// As [`integrate_me`], but hands each state to `visit` instead of storing it.
pub fn integrate_me_with<F>(
    model: &OpenSystemModel,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    stepper: Stepper,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &CMatrix),
{
    check_dims(&model.h, rho0)?;
    let propagator = match stepper {
        Stepper::Expm => Some(Propagator::new(model, grid.dt)?),
        Stepper::Rk4 => None,
    };
    let mut rho = rho0.matrix().clone();
    visit(0, &rho);
    for k in 0..grid.n_steps {
        let next = match &propagator {
            Some(p) => p.apply(&rho)?,
            None => rk4_step(model, &rho, grid.dt),
        };
        let drift = (next.trace() - rho.trace()).norm();
        if !drift.is_finite() || drift > TRACE_DRIFT_LIMIT {
            return Err(Error::StepRejected { step: k, drift });
        }
        rho = next;
        visit(k + 1, &rho);
    }
    Ok(())
}

/// Piecewise-constant Hamiltonian: segment `k` applies on
/// `[t_{k-1}, t_k)` with `t_k = segments[k].0`.
#[derive(Debug, Clone)]
pub struct HamiltonianSchedule {
    pub segments: Vec<(f64, CMatrix)>,
}

/// Integrates with the Hamiltonian switched at segment ends. Switch times
/// must lie on the grid.
pub fn integrate_me_schedule(
    model: &OpenSystemModel,
    schedule: &HamiltonianSchedule,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    stepper: Stepper,
) -> Result<Vec<DensityMatrix>> {
    if schedule.segments.is_empty() {
        return Err(Error::InvalidParameter("empty Hamiltonian schedule".into()));
    }
    let mut out = vec![rho0.clone()];
    let mut start = 0usize;
    let mut state = rho0.clone();
    for (t_end, h) in &schedule.segments {
        let end_step = (t_end / grid.dt).round();
        if (end_step * grid.dt - t_end).abs() > 1e-9 * t_end.abs().max(1.0) {
            return Err(Error::GridMismatch(format!(
                "switch time {t_end} is not on the grid"
            )));
        }
        let end_step = (end_step as usize).min(grid.n_steps);
        if end_step <= start {
            continue;
        }
        let seg_model = model.with_hamiltonian(h.clone())?;
        let seg_grid = TimeGrid::with_steps(grid.dt, end_step - start);
        let states = integrate_me(&seg_model, &state, &seg_grid, stepper)?;
        state = states.last().cloned().unwrap_or(state);
        out.extend(states.into_iter().skip(1));
        start = end_step;
        if start == grid.n_steps {
            break;
        }
    }
    if start < grid.n_steps {
        return Err(Error::GridMismatch(format!(
            "schedule ends at step {start}, grid has {}",
            grid.n_steps
        )));
    }
    Ok(out)
}
