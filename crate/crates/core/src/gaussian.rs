//! Gaussian moment dynamics under continuous monitoring, steady-state
//! Riccati and Lyapunov solvers, LQG and Markovian feedback gains.
//!
//! Covariances follow `sigma = <{dr, dr^T}>`, so the vacuum has
//! `sigma = 1` and `<dq^2> = sigma_11 / 2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ops::{hermitian_eigenvalues, CMatrix, C64};

pub type RMatrix = DMatrix<f64>;
pub type RVector = DVector<f64>;

/// Eigenvalues with `|Re| < HURWITZ_MARGIN` count as marginal.
pub const HURWITZ_MARGIN: f64 = 1e-10;

/// Tolerance on `sigma + i Omega >= 0`.
pub const PHYSICALITY_TOL: f64 = 1e-8;

const MAX_ITER: usize = 100;

pub(crate) fn max_abs(m: &RMatrix) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn symmetrize(m: &RMatrix) -> RMatrix {
    (m + m.transpose()) * 0.5
}

/// Drift, diffusion and monitoring matrices of an `n`-mode system.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub a: RMatrix,
    pub d: RMatrix,
    pub b: RMatrix,
    pub e: RMatrix,
    pub labels: Vec<String>,
}

impl GaussianModel {
    pub fn new(a: RMatrix, d: RMatrix, b: RMatrix, e: RMatrix) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || n % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "phase-space dimension must be even and positive, got {n}"
            )));
        }
        for (m, what) in [(&a, "A"), (&d, "D")] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidParameter(format!(
                    "{what} must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if b.nrows() != n || e.nrows() != n || b.ncols() != e.ncols() {
            return Err(Error::InvalidParameter(format!(
                "B and E must both be {n}xm, got {}x{} and {}x{}",
                b.nrows(),
                b.ncols(),
                e.nrows(),
                e.ncols()
            )));
        }
        if [&a, &d, &b, &e]
            .iter()
            .any(|m| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("Gaussian model"));
        }
        let asym = max_abs(&(&d - d.transpose()));
        if asym > 1e-12 * max_abs(&d).max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "diffusion matrix is not symmetric (defect {asym:.3e})"
            )));
        }
        let min_d = symmetric_eigenvalues(&d)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_d < -1e-12 * max_abs(&d).max(1.0) {
            return Err(Error::NotPositive {
                min_eigenvalue: min_d,
            });
        }
        let labels = (0..n / 2)
            .flat_map(|k| [format!("q{}", k + 1), format!("p{}", k + 1)])
            .collect();
        Ok(Self { a, d, b, e, labels })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "expected {} labels, got {}",
                self.dim(),
                labels.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Phase-space dimension `2n`.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.dim() / 2
    }

    pub fn n_outputs(&self) -> usize {
        self.b.ncols()
    }

    /// Same dynamics without monitoring.
    pub fn unmonitored(&self) -> Self {
        let mut m = self.clone();
        m.b = RMatrix::zeros(self.dim(), self.n_outputs());
        m.e = m.b.clone();
        m
    }

    /// `E - sigma B`, the gain of the conditional first moments.
    pub fn innovation_gain(&self, sigma: &RMatrix) -> RMatrix {
        &self.e - sigma * &self.b
    }
}

/// First moments and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub r: RVector,
    pub sigma: RMatrix,
}

impl GaussianState {
    pub fn new(r: RVector, sigma: RMatrix) -> Result<Self> {
        let n = r.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: sigma.nrows(),
            });
        }
        let asym = max_abs(&(&sigma - sigma.transpose()));
        if asym > 1e-12 * max_abs(&sigma).max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "covariance is not symmetric (defect {asym:.3e})"
            )));
        }
        let min = physicality_min_eigenvalue(&sigma)?;
        if min < -PHYSICALITY_TOL {
            return Err(Error::NotPositive {
                min_eigenvalue: min,
            });
        }
        Ok(Self { r, sigma })
    }

    pub fn vacuum(dim: usize) -> Self {
        Self {
            r: RVector::zeros(dim),
            sigma: RMatrix::identity(dim, dim),
        }
    }
}

/// `Omega = (+)_k [[0, 1], [-1, 0]]`.
pub fn symplectic_form(dim: usize) -> RMatrix {
    let mut o = RMatrix::zeros(dim, dim);
    for k in 0..dim / 2 {
        o[(2 * k, 2 * k + 1)] = 1.0;
        o[(2 * k + 1, 2 * k)] = -1.0;
    }
    o
}

/// Smallest eigenvalue of `sigma + i Omega`; negative values violate the
/// uncertainty relation.
pub fn physicality_min_eigenvalue(sigma: &RMatrix) -> Result<f64> {
    let n = sigma.nrows();
    if n % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "covariance dimension must be even, got {n}"
        )));
    }
    let omega = symplectic_form(n);
    let m = CMatrix::from_fn(n, n, |i, j| C64::new(sigma[(i, j)], omega[(i, j)]));
    Ok(hermitian_eigenvalues(&m).first().copied().unwrap_or(0.0))
}

pub(crate) fn symmetric_eigenvalues(m: &RMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Marginal,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurwitzReport {
    pub max_real: f64,
    pub stability: Stability,
}

impl HurwitzReport {
    pub fn is_hurwitz(&self) -> bool {
        self.stability == Stability::Stable
    }
}

pub fn hurwitz_report(a: &RMatrix) -> HurwitzReport {
    let max_real = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let stability = if max_real < -HURWITZ_MARGIN {
        Stability::Stable
    } else if max_real.abs() <= HURWITZ_MARGIN {
        Stability::Marginal
    } else {
        Stability::Unstable
    };
    HurwitzReport {
        max_real,
        stability,
    }
}

pub fn is_hurwitz(a: &RMatrix) -> bool {
    hurwitz_report(a).is_hurwitz()
}

/// Solves `A X + X A^T + Q = 0` for Hurwitz `A` through the vectorized
/// system `(I (x) A + A (x) I) vec X = -vec Q`.
pub fn lyapunov_solve(a: &RMatrix, q: &RMatrix) -> Result<RMatrix> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: q.nrows(),
        });
    }
    let report = hurwitz_report(a);
    if !report.is_hurwitz() {
        return Err(Error::NotHurwitz {
            max_real: report.max_real,
        });
    }
    let id = RMatrix::identity(n, n);
    let op = id.kronecker(a) + a.kronecker(&id);
    let lu = op.clone().lu();
    let rhs = -RVector::from_column_slice(q.as_slice());
    let mut x = lu.solve(&rhs).ok_or(Error::Singular("Lyapunov system"))?;
    // one step of iterative refinement
    let opx = &op * &x;
    let resid = &rhs - opx;
    if let Some(corr) = lu.solve(&resid) {
        x += corr;
    }
    Ok(symmetrize(&RMatrix::from_column_slice(n, n, x.as_slice())))
}

pub fn lyapunov_residual(a: &RMatrix, x: &RMatrix, q: &RMatrix) -> f64 {
    max_abs(&(a * x + x * a.transpose() + q))
}

/// `(d r/dt, d sigma/dt) = (A r, A sigma + sigma A^T + D)`.
pub fn unconditional_moment_rhs(
    model: &GaussianModel,
    state: &GaussianState,
) -> Result<(RVector, RMatrix)> {
    check_state(model, state)?;
    let dr = &model.a * &state.r;
    let ds = &model.a * &state.sigma + &state.sigma * model.a.transpose() + &model.d;
    Ok((dr, symmetrize(&ds)))
}

pub(crate) fn check_state(model: &GaussianModel, state: &GaussianState) -> Result<()> {
    if state.r.len() != model.dim() || state.sigma.nrows() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: state.r.len(),
        });
    }
    Ok(())
}

/// `A sigma + sigma A^T + D - (E - sigma B)(E - sigma B)^T`.
pub fn riccati_rhs(model: &GaussianModel, sigma: &RMatrix) -> RMatrix {
    let g = model.innovation_gain(sigma);
    let r = &model.a * sigma + sigma * model.a.transpose() + &model.d - &g * g.transpose();
    symmetrize(&r)
}

pub(crate) fn riccati_rk4(model: &GaussianModel, sigma: &RMatrix, dt: f64) -> RMatrix {
    let k1 = riccati_rhs(model, sigma);
    let k2 = riccati_rhs(model, &(sigma + &k1 * (0.5 * dt)));
    let k3 = riccati_rhs(model, &(sigma + &k2 * (0.5 * dt)));
    let k4 = riccati_rhs(model, &(sigma + &k3 * dt));
    symmetrize(&(sigma + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)))
}

/// Feedback acting on the conditional first moments.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    None,
    /// `u = -K r`, drift `F u`.
    StateFeedback {
        f: RMatrix,
        k: RMatrix,
    },
    /// Displacement proportional to the current, `F M dy`.
    Markovian {
        f: RMatrix,
        m: RMatrix,
    },
}

impl Controller {
    pub(crate) fn check(&self, model: &GaussianModel) -> Result<()> {
        let n = model.dim();
        let bad = |what: &str| {
            Err(Error::InvalidParameter(format!(
                "{what} has inconsistent dimensions"
            )))
        };
        match self {
            Controller::None => Ok(()),
            Controller::StateFeedback { f, k } => {
                if f.nrows() != n || k.nrows() != f.ncols() || k.ncols() != n {
                    return bad("state feedback gain");
                }
                Ok(())
            }
            Controller::Markovian { f, m } => {
                if f.nrows() != n || m.nrows() != f.ncols() || m.ncols() != model.n_outputs() {
                    return bad("Markovian feedback gain");
                }
                Ok(())
            }
        }
    }
}

impl Controller {
    /// Drift of the averaged first moments and source of
    /// `S = E[2 r r^T]`, given the conditional covariance `sigma`.
    pub(crate) fn averaged_dynamics(
        &self,
        model: &GaussianModel,
        sigma: &RMatrix,
    ) -> (RMatrix, RMatrix) {
        let g = model.innovation_gain(sigma);
        match self {
            Controller::None => (model.a.clone(), &g * g.transpose()),
            Controller::StateFeedback { f, k } => (&model.a - f * k, &g * g.transpose()),
            Controller::Markovian { f, m } => {
                let s2 = std::f64::consts::SQRT_2;
                let l = &g / s2 + f * m;
                (
                    &model.a - f * m * model.b.transpose() * s2,
                    &l * l.transpose() * 2.0,
                )
            }
        }
    }
}

/// Cost and actuation of an LQG problem: minimize `r^T P r + u^T Q u`
/// with drift `F u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSpec {
    pub f: RMatrix,
    pub p: RMatrix,
    pub q: RMatrix,
}

/// One conditional step: covariance by RK4 on the Riccati flow, first
/// moments by Euler-Maruyama with `dr = A r dt + (E - sigma B) dw / sqrt 2`
/// plus the controller. Returns the new state and
/// `dy = -sqrt 2 B^T r dt + dw`.
pub fn conditional_step(
    state: &GaussianState,
    model: &GaussianModel,
    dt: f64,
    dw: &RVector,
    controller: &Controller,
) -> Result<(GaussianState, RVector)> {
    check_state(model, state)?;
    if dw.len() != model.n_outputs() {
        return Err(Error::DimensionMismatch {
            expected: model.n_outputs(),
            found: dw.len(),
        });
    }
    controller.check(model)?;
    Ok(conditional_step_unchecked(state, model, dt, dw, controller))
}

pub(crate) fn conditional_step_unchecked(
    state: &GaussianState,
    model: &GaussianModel,
    dt: f64,
    dw: &RVector,
    controller: &Controller,
) -> (GaussianState, RVector) {
    let (r, dy) = mean_step(&state.r, &state.sigma, model, dt, dw, controller);
    let sigma = riccati_rk4(model, &state.sigma, dt);
    (GaussianState { r, sigma }, dy)
}

/// First-moment half of [`conditional_step`] at a given pre-step `sigma`.
pub(crate) fn mean_step(
    r: &RVector,
    sigma: &RMatrix,
    model: &GaussianModel,
    dt: f64,
    dw: &RVector,
    controller: &Controller,
) -> (RVector, RVector) {
    let s2 = std::f64::consts::SQRT_2;
    let dy = -(model.b.transpose() * r) * (s2 * dt) + dw;
    let gain = model.innovation_gain(sigma);
    let mut dr = &model.a * r * dt + gain * dw / s2;
    match controller {
        Controller::None => {}
        Controller::StateFeedback { f, k } => dr -= f * (k * r) * dt,
        Controller::Markovian { f, m } => dr += f * (m * &dy),
    }
    (r + dr, dy)
}

/// RK4 step of the unconditional moment equations.
pub fn unconditional_step(
    state: &GaussianState,
    model: &GaussianModel,
    dt: f64,
) -> Result<GaussianState> {
    check_state(model, state)?;
    let f = |s: &GaussianState| {
        let dr = &model.a * &s.r;
        let ds = &model.a * &s.sigma + &s.sigma * model.a.transpose() + &model.d;
        (dr, ds)
    };
    let add = |s: &GaussianState, k: &(RVector, RMatrix), h: f64| GaussianState {
        r: &s.r + &k.0 * h,
        sigma: &s.sigma + &k.1 * h,
    };
    let k1 = f(state);
    let k2 = f(&add(state, &k1, 0.5 * dt));
    let k3 = f(&add(state, &k2, 0.5 * dt));
    let k4 = f(&add(state, &k3, dt));
    let r = &state.r + (&k1.0 + (&k2.0 + &k3.0) * 2.0 + &k4.0) * (dt / 6.0);
    let sigma = &state.sigma + (&k1.1 + (&k2.1 + &k3.1) * 2.0 + &k4.1) * (dt / 6.0);
    Ok(GaussianState {
        r,
        sigma: symmetrize(&sigma),
    })
}

fn riccati_tolerance(model: &GaussianModel) -> f64 {
    1e-10 * max_abs(&model.d).max(1.0)
}

/// Stabilizing steady state of the conditional covariance flow.
///
/// Newton-Kleinman on `A~ S + S A~^T + D~ - S B B^T S = 0` with
/// `A~ = A + E B^T`, `D~ = D - E E^T`, seeded by the unmonitored Lyapunov
/// solution. When that seed does not stabilize `A~ - S B B^T`, the flow is
/// integrated first.
pub fn riccati_steady_state(model: &GaussianModel) -> Result<RMatrix> {
    let n = model.dim();
    let tol = riccati_tolerance(model);
    let bbt = &model.b * model.b.transpose();
    if max_abs(&bbt) == 0.0 && max_abs(&model.e) == 0.0 {
        return lyapunov_solve(&model.a, &model.d);
    }
    let a_t = &model.a + &model.e * model.b.transpose();
    let d_t = &model.d - &model.e * model.e.transpose();

    let mut sigma = match lyapunov_solve(&model.a, &model.d) {
        Ok(s) => s,
        Err(_) => RMatrix::identity(n, n),
    };
    if !is_hurwitz(&(&a_t - &sigma * &bbt)) {
        sigma = integrate_riccati_flow(model, sigma, tol)?;
    }
    let mut residual = max_abs(&riccati_rhs(model, &sigma));
    for _ in 0..MAX_ITER {
        if residual <= tol {
            return Ok(sigma);
        }
        let a_k = &a_t - &sigma * &bbt;
        let q_k = &d_t + &sigma * &bbt * &sigma;
        let next = lyapunov_solve(&a_k, &q_k)?;
        let next_residual = max_abs(&riccati_rhs(model, &next));
        let step = max_abs(&(&next - &sigma));
        sigma = next;
        residual = next_residual;
        if step <= 1e-15 * max_abs(&sigma).max(1.0) {
            break;
        }
    }
    if residual <= tol {
        Ok(sigma)
    } else {
        Err(Error::NonConvergent {
            what: "Riccati steady state",
            iterations: MAX_ITER,
            residual,
        })
    }
}

fn integrate_riccati_flow(model: &GaussianModel, mut sigma: RMatrix, tol: f64) -> Result<RMatrix> {
    let bbt = &model.b * model.b.transpose();
    let a_t = &model.a + &model.e * model.b.transpose();
    let scale = max_abs(&model.a).max(max_abs(&bbt)).max(1e-3);
    let dt = 0.05 / scale;
    for _ in 0..2_000_000 {
        sigma = riccati_rk4(model, &sigma, dt);
        if sigma.iter().any(|x| !x.is_finite()) {
            break;
        }
        if is_hurwitz(&(&a_t - &sigma * &bbt)) && max_abs(&riccati_rhs(model, &sigma)) < 1e-3 {
            return Ok(sigma);
        }
        if max_abs(&riccati_rhs(model, &sigma)) <= tol {
            return Ok(sigma);
        }
    }
    Err(Error::NonConvergent {
        what: "Riccati flow",
        iterations: 2_000_000,
        residual: max_abs(&riccati_rhs(model, &sigma)),
    })
}

/// Result of [`lqg_gain`].
#[derive(Debug, Clone, PartialEq)]
pub struct LqgGain {
    pub k: RMatrix,
    pub y: RMatrix,
    pub residual: f64,
    pub closed_loop: HurwitzReport,
}

fn check_feedback_dims(model: &GaussianModel, f: &RMatrix) -> Result<()> {
    if f.nrows() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: f.nrows(),
        });
    }
    Ok(())
}

pub fn lqg_riccati_residual(
    a: &RMatrix,
    f: &RMatrix,
    p: &RMatrix,
    q_inv: &RMatrix,
    y: &RMatrix,
) -> f64 {
    max_abs(&(a.transpose() * y + y * a + p - y * f * q_inv * f.transpose() * y))
}

/// Optimal state-feedback gain `K = Q^-1 F^T Y`, with `Y` the stabilizing
/// solution of `A^T Y + Y A + P - Y F Q^-1 F^T Y = 0` (Newton-Kleinman).
pub fn lqg_gain(model: &GaussianModel, spec: &FeedbackSpec) -> Result<LqgGain> {
    let FeedbackSpec { f, p, q } = spec;
    check_feedback_dims(model, f)?;
    let n = model.dim();
    let k_dim = f.ncols();
    if p.nrows() != n || p.ncols() != n || q.nrows() != k_dim || q.ncols() != k_dim {
        return Err(Error::InvalidParameter(
            "cost matrices have inconsistent dimensions".into(),
        ));
    }
    if symmetric_eigenvalues(p).first().copied().unwrap_or(0.0) < -1e-12 {
        return Err(Error::InvalidParameter(
            "P must be positive semidefinite".into(),
        ));
    }
    if symmetric_eigenvalues(q).first().copied().unwrap_or(0.0) <= 0.0 {
        return Err(Error::InvalidParameter(
            "Q must be positive definite".into(),
        ));
    }
    let q_inv = q
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("LQG control cost"))?;
    let a = &model.a;
    let tol = 1e-10 * max_abs(p).max(1.0);

    let mut k = if is_hurwitz(a) {
        RMatrix::zeros(k_dim, n)
    } else {
        bass_gain(a, f, &q_inv)?
    };
    let mut y = RMatrix::zeros(n, n);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let a_cl = a - f * &k;
        let rhs = p + k.transpose() * q * &k;
        let next = lyapunov_solve(&a_cl.transpose(), &rhs)?;
        let step = max_abs(&(&next - &y));
        y = next;
        k = &q_inv * f.transpose() * &y;
        residual = lqg_riccati_residual(a, f, p, &q_inv, &y);
        if residual <= 1e-3 * tol || step <= 1e-15 * max_abs(&y).max(1.0) {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NonConvergent {
            what: "LQG Riccati equation",
            iterations: MAX_ITER,
            residual,
        });
    }
    let closed_loop = hurwitz_report(&(a - f * &k));
    Ok(LqgGain {
        k,
        y,
        residual,
        closed_loop,
    })
}

/// Stabilizing seed gain for unstable `A` (Bass's method).
fn bass_gain(a: &RMatrix, f: &RMatrix, q_inv: &RMatrix) -> Result<RMatrix> {
    let n = a.nrows();
    let shift = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re.abs())
        .fold(0.0, f64::max)
        + 1.0;
    let a_s = -(a + RMatrix::identity(n, n) * shift);
    let w = f * q_inv * f.transpose() * 2.0;
    let z = lyapunov_solve(&a_s, &w)?;
    let z_inv = z
        .try_inverse()
        .ok_or(Error::Singular("Bass stabilization (F does not control A)"))?;
    Ok(q_inv * f.transpose() * z_inv)
}

/// Steady excess noise `Sigma` of the closed loop `A - F K`, sourced by
/// `(E - sigma_c B)(E - sigma_c B)^T`.
pub fn excess_noise_ss(model: &GaussianModel, f: &RMatrix, k: &RMatrix) -> Result<RMatrix> {
    check_feedback_dims(model, f)?;
    let sigma_c = riccati_steady_state(model)?;
    excess_noise_with(model, &sigma_c, f, k)
}

fn excess_noise_with(
    model: &GaussianModel,
    sigma_c: &RMatrix,
    f: &RMatrix,
    k: &RMatrix,
) -> Result<RMatrix> {
    let g = model.innovation_gain(sigma_c);
    lyapunov_solve(&(&model.a - f * k), &(&g * g.transpose()))
}

/// Result of [`markovian_gain`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovianGain {
    pub m: RMatrix,
    pub residual: f64,
    pub closed_loop: HurwitzReport,
}

/// Gain `M` that cancels the conditional noise, `F M = -(E - sigma_c B)/sqrt 2`,
/// solved in the least-squares sense so rank-deficient `F` works whenever
/// the noise lies in its range.
pub fn markovian_gain(model: &GaussianModel, f: &RMatrix) -> Result<MarkovianGain> {
    check_feedback_dims(model, f)?;
    let sigma_c = riccati_steady_state(model)?;
    let target = -model.innovation_gain(&sigma_c) / std::f64::consts::SQRT_2;
    let pinv = f
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|_| Error::Singular("feedback matrix pseudo-inverse"))?;
    let m = &pinv * &target;
    let defect = f * &m - &target;
    let tol = 1e-10 * max_abs(&target).max(1.0);
    let (worst_row, residual) = (0..defect.nrows())
        .map(|i| (i, defect.row(i).iter().fold(0.0f64, |a, x| a.max(x.abs()))))
        .fold(
            (0, 0.0),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    if residual > tol {
        return Err(Error::UnreachableDirection {
            direction: model.labels[worst_row].clone(),
            residual,
        });
    }
    let a_cl = &model.a - f * &m * model.b.transpose() * std::f64::consts::SQRT_2;
    Ok(MarkovianGain {
        m,
        residual,
        closed_loop: hurwitz_report(&a_cl),
    })
}

/// Gain applied in [`closed_loop_unconditional`].
#[derive(Debug, Clone, PartialEq)]
pub enum Gain {
    None,
    State(RMatrix),
    Markovian(RMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub sigma_c: RMatrix,
    pub excess: RMatrix,
    pub sigma_unc: RMatrix,
    pub loop_stability: HurwitzReport,
    /// First moments relax to zero.
    pub mean_decays: bool,
}

/// Unconditional steady covariance `sigma_c + Sigma` under feedback.
pub fn closed_loop_unconditional(
    model: &GaussianModel,
    f: &RMatrix,
    gain: &Gain,
) -> Result<ClosedLoop> {
    check_feedback_dims(model, f)?;
    let sigma_c = riccati_steady_state(model)?;
    let g = model.innovation_gain(&sigma_c);
    let (a_cl, noise) = match gain {
        Gain::None => (model.a.clone(), &g * g.transpose()),
        Gain::State(k) => (&model.a - f * k, &g * g.transpose()),
        Gain::Markovian(m) => {
            let s2 = std::f64::consts::SQRT_2;
            let l = &g / s2 + f * m;
            (
                &model.a - f * m * model.b.transpose() * s2,
                &l * l.transpose() * 2.0,
            )
        }
    };
    let loop_stability = hurwitz_report(&a_cl);
    let excess = lyapunov_solve(&a_cl, &noise)?;
    Ok(ClosedLoop {
        sigma_unc: &sigma_c + &excess,
        sigma_c,
        excess,
        mean_decays: loop_stability.is_hurwitz(),
        loop_stability,
    })
}

/// Degenerate parametric oscillator, `H = -chi (qp + pq)/2`, cavity loss
/// `kappa`, homodyne monitoring of `q` with efficiency `eta`.
pub fn opo_model(chi: f64, kappa: f64, eta: f64) -> Result<GaussianModel> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::EfficiencyOutOfRange(eta));
    }
    if !chi.is_finite() {
        return Err(Error::NonFinite("chi"));
    }
    let a = RMatrix::from_row_slice(2, 2, &[-(chi + kappa / 2.0), 0.0, 0.0, chi - kappa / 2.0]);
    let d = RMatrix::identity(2, 2) * kappa;
    let b = RMatrix::from_row_slice(2, 2, &[-(eta * kappa).sqrt(), 0.0, 0.0, 0.0]);
    GaussianModel::new(a, d, b.clone(), b)?.with_labels(vec!["q".into(), "p".into()])
}

/// Closed-form oscillator results (unit efficiency).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpoReference {
    pub sigma_unc: [f64; 2],
    pub sigma_c: [f64; 2],
    pub m_opt_11: f64,
    pub f_a: f64,
    pub f_b: f64,
}

pub fn opo_reference(chi: f64, kappa: f64, lambda: f64, q: f64) -> Result<OpoReference> {
    if !(kappa > 0.0) || chi.abs() >= kappa / 2.0 {
        return Err(Error::InvalidParameter(format!(
            "need kappa > 0 and |chi| < kappa/2, got chi={chi}, kappa={kappa}"
        )));
    }
    if !(q > 0.0) || lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "need q > 0 and lambda != 0, got q={q}, lambda={lambda}"
        )));
    }
    let s = kappa + 2.0 * chi;
    let f_a = 4.0 * q * chi * chi / (kappa * (q * (4.0 * lambda * lambda + q * s * s)).sqrt());
    // printed without lambda
    let f_b = 8.0 * q * chi * chi / (q * s + (q * (8.0 + q * s * s)).sqrt());
    Ok(OpoReference {
        sigma_unc: [kappa / (kappa + 2.0 * chi), kappa / (kappa - 2.0 * chi)],
        sigma_c: [(kappa - 2.0 * chi) / kappa, kappa / (kappa - 2.0 * chi)],
        m_opt_11: chi / lambda * (2.0 / kappa).sqrt(),
        f_a,
        f_b,
    })
}

/// LQG problem of the oscillator: position cost `P = diag(1, 0)`, `Q = q 1`.
pub fn opo_lqg_spec(f: RMatrix, q: f64) -> FeedbackSpec {
    FeedbackSpec {
        f,
        p: RMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        q: RMatrix::identity(2, 2) * q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(a: f64, b: f64) -> RMatrix {
        RMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b])
    }

    fn close(a: &RMatrix, b: &RMatrix, tol: f64) -> bool {
        max_abs(&(a - b)) <= tol
    }

    #[test]
    fn lyapunov_examples() {
        let x = lyapunov_solve(&(-RMatrix::identity(2, 2)), &RMatrix::identity(2, 2)).unwrap();
        assert!(close(&x, &(RMatrix::identity(2, 2) * 0.5), 1e-15));
        let x = lyapunov_solve(&diag(-1.0, -2.0), &diag(2.0, 4.0)).unwrap();
        assert!(close(&x, &diag(1.0, 1.0), 1e-15));
        assert!(matches!(
            lyapunov_solve(&diag(1.0, -1.0), &diag(1.0, 1.0)),
            Err(Error::NotHurwitz { .. })
        ));
    }

    #[test]
    fn lyapunov_random_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let m = RMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            // shift to make it Hurwitz
            let shift = m
                .complex_eigenvalues()
                .iter()
                .map(|z| z.re)
                .fold(f64::MIN, f64::max)
                + 0.5;
            let a = &m - RMatrix::identity(4, 4) * shift;
            let g = RMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let q = &g * g.transpose();
            let x = lyapunov_solve(&a, &q).unwrap();
            assert!(lyapunov_residual(&a, &x, &q) <= 1e-10);
            // independent oracle: integrate dX/dt = A X + X A^T + Q to steady state
            let mut y = RMatrix::zeros(4, 4);
            let dt = 1e-3;
            for _ in 0..200_000 {
                let k = |z: &RMatrix| &a * z + z * a.transpose() + &q;
                let k1 = k(&y);
                let k2 = k(&(&y + &k1 * (dt / 2.0)));
                let k3 = k(&(&y + &k2 * (dt / 2.0)));
                let k4 = k(&(&y + &k3 * dt));
                y += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
                if max_abs(&k(&y)) < 1e-12 {
                    break;
                }
            }
            assert!(close(&x, &y, 1e-8));
        }
    }

    #[test]
    fn opo_matrices() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        assert!(close(&m.a, &diag(-0.7, -0.3), 1e-15));
        assert_eq!(m.b[(0, 0)], -1.0);
        assert!(is_hurwitz(&m.a));
        assert!(!is_hurwitz(&opo_model(0.6, 1.0, 1.0).unwrap().a));
        assert_eq!(
            hurwitz_report(&opo_model(0.5, 1.0, 1.0).unwrap().a).stability,
            Stability::Marginal
        );
    }

    #[test]
    fn unconditional_steady_state() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let s = diag(1.0 / 1.4, 1.0 / 0.6);
        let st = GaussianState::new(RVector::zeros(2), s.clone()).unwrap();
        let (dr, ds) = unconditional_moment_rhs(&m, &st).unwrap();
        assert_eq!(dr.norm(), 0.0);
        assert!(max_abs(&ds) < 1e-15);
        let x = lyapunov_solve(&m.a, &m.d).unwrap();
        assert!(close(&x, &s, 1e-12));
        assert!(lyapunov_solve(&opo_model(0.5, 1.0, 1.0).unwrap().a, &m.d).is_err());

        let zero = GaussianModel::new(
            RMatrix::zeros(2, 2),
            RMatrix::zeros(2, 2),
            RMatrix::zeros(2, 1),
            RMatrix::zeros(2, 1),
        )
        .unwrap();
        let (dr, ds) = unconditional_moment_rhs(&zero, &GaussianState::vacuum(2)).unwrap();
        assert_eq!(dr.norm() + max_abs(&ds), 0.0);
    }

    #[test]
    fn conditional_steady_point() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let s = diag(0.6, 1.0 / 0.6);
        assert!(max_abs(&riccati_rhs(&m, &s)) < 1e-15);
        let st = GaussianState {
            r: RVector::zeros(2),
            sigma: s.clone(),
        };
        let dw = RVector::from_vec(vec![0.01, 0.0]);
        let (next, _) = conditional_step(&st, &m, 1e-3, &dw, &Controller::None).unwrap();
        assert!(close(&next.sigma, &s, 1e-15));
    }

    #[test]
    fn unmonitored_conditional_step_is_unconditional() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap().unmonitored();
        let st = GaussianState {
            r: RVector::from_vec(vec![0.3, -0.2]),
            sigma: diag(1.2, 0.9),
        };
        let dw = RVector::from_vec(vec![0.05, -0.01]);
        let (next, dy) = conditional_step(&st, &m, 1e-3, &dw, &Controller::None).unwrap();
        assert_eq!(dy, dw);
        let euler_r = &st.r + &m.a * &st.r * 1e-3;
        assert!((next.r - euler_r).norm() < 1e-15);
        let unc = unconditional_step(&st, &m, 1e-3).unwrap();
        assert!(close(&next.sigma, &unc.sigma, 1e-14));
    }

    #[test]
    fn opo_current_mean() {
        let eta = 0.7;
        let kappa = 1.3;
        let m = opo_model(0.2, kappa, eta).unwrap();
        let st = GaussianState {
            r: RVector::from_vec(vec![0.4, 0.1]),
            sigma: RMatrix::identity(2, 2),
        };
        let dt = 1e-3;
        let (_, dy) = conditional_step(&st, &m, dt, &RVector::zeros(2), &Controller::None).unwrap();
        assert_abs_diff_eq!(
            dy[0],
            (2.0 * eta * kappa).sqrt() * 0.4 * dt,
            epsilon = 1e-15
        );
        assert_eq!(dy[1], 0.0);
    }

    #[test]
    fn riccati_examples() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let s = riccati_steady_state(&m).unwrap();
        assert!(close(&s, &diag(0.6, 1.0 / 0.6), 1e-8));
        assert!(max_abs(&riccati_rhs(&m, &s)) <= 1e-10);
        assert!(physicality_min_eigenvalue(&s).unwrap() >= -PHYSICALITY_TOL);

        let blind = opo_model(0.2, 1.0, 0.0).unwrap();
        let s0 = riccati_steady_state(&blind).unwrap();
        assert!(close(&s0, &diag(1.0 / 1.4, 1.0 / 0.6), 1e-10));

        let free = opo_model(0.0, 1.0, 1.0).unwrap();
        assert!(close(
            &riccati_steady_state(&free).unwrap(),
            &RMatrix::identity(2, 2),
            1e-10
        ));
    }

    #[test]
    fn riccati_unstable_drift_is_stabilized_by_monitoring() {
        // A is not Hurwitz but the monitored quadrature is the unstable one.
        let a = diag(0.3, -0.5);
        let d = RMatrix::identity(2, 2);
        let b = RMatrix::from_row_slice(2, 1, &[-1.0, 0.0]);
        let m = GaussianModel::new(a, d, b.clone(), b).unwrap();
        let s = riccati_steady_state(&m).unwrap();
        assert!(max_abs(&riccati_rhs(&m, &s)) <= 1e-10);
        let bbt = &m.b * m.b.transpose();
        assert!(is_hurwitz(&(&m.a + &m.e * m.b.transpose() - &s * bbt)));
    }

    #[test]
    fn lqg_examples() {
        let scalar = GaussianModel::new(
            diag(-1.0, -1.0),
            RMatrix::identity(2, 2),
            RMatrix::zeros(2, 1),
            RMatrix::zeros(2, 1),
        )
        .unwrap();
        let spec = FeedbackSpec {
            f: RMatrix::identity(2, 2),
            p: RMatrix::identity(2, 2),
            q: RMatrix::identity(2, 2),
        };
        let g = lqg_gain(&scalar, &spec).unwrap();
        let root = 2f64.sqrt() - 1.0;
        assert!(close(&g.y, &(RMatrix::identity(2, 2) * root), 1e-12));
        assert!(close(&g.k, &(RMatrix::identity(2, 2) * root), 1e-12));
        assert!(g.closed_loop.is_hurwitz());
        assert_abs_diff_eq!(g.closed_loop.max_real, -(2f64.sqrt()), epsilon = 1e-12);

        let no_cost = FeedbackSpec {
            p: RMatrix::zeros(2, 2),
            ..spec.clone()
        };
        let g = lqg_gain(&scalar, &no_cost).unwrap();
        assert_eq!(max_abs(&g.y) + max_abs(&g.k), 0.0);

        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let g = lqg_gain(&m, &opo_lqg_spec(diag(0.0, 1.0), 1.0)).unwrap();
        assert!(max_abs(&g.k) < 1e-14);
    }

    #[test]
    fn lqg_unstable_drift_uses_stabilizing_seed() {
        let m = opo_model(0.7, 1.0, 1.0).unwrap();
        let spec = FeedbackSpec {
            f: RMatrix::identity(2, 2),
            p: RMatrix::identity(2, 2),
            q: RMatrix::identity(2, 2),
        };
        let g = lqg_gain(&m, &spec).unwrap();
        assert!(g.residual <= 1e-10);
        assert!(g.closed_loop.is_hurwitz());
    }

    #[test]
    fn excess_noise_full_rank_matches_closed_form() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let f = RMatrix::identity(2, 2);
        let g = lqg_gain(&m, &opo_lqg_spec(f.clone(), 1.0)).unwrap();
        let sigma = excess_noise_ss(&m, &f, &g.k).unwrap();
        let r = opo_reference(0.2, 1.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(sigma[(0, 0)], r.f_a, epsilon = 1e-6);
        assert_abs_diff_eq!(r.f_a, 0.0655386, epsilon = 1e-7);
        assert_abs_diff_eq!(r.f_b, 0.0702378, epsilon = 1e-7);
    }

    #[test]
    fn excess_noise_vanishes_for_free_feedback() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let f = RMatrix::identity(2, 2);
        let mut last = f64::INFINITY;
        for e in 2..=8 {
            let q = 10f64.powi(-e);
            let g = lqg_gain(&m, &opo_lqg_spec(f.clone(), q)).unwrap();
            let s11 = excess_noise_ss(&m, &f, &g.k).unwrap()[(0, 0)];
            assert!(s11 < last);
            last = s11;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn markovian_examples() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let g = markovian_gain(&m, &RMatrix::identity(2, 2)).unwrap();
        assert!(close(&g.m, &diag(0.2828427, 0.0), 1e-7));
        assert!(g.closed_loop.is_hurwitz());
        let sc = riccati_steady_state(&m).unwrap();
        let cancel =
            m.innovation_gain(&sc) + RMatrix::identity(2, 2) * &g.m * std::f64::consts::SQRT_2;
        assert!(max_abs(&cancel) <= 1e-10);

        let g = markovian_gain(&m, &diag(1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(g.m[(0, 0)], 0.2828427, epsilon = 1e-7);

        match markovian_gain(&m, &diag(0.0, 1.0)) {
            Err(Error::UnreachableDirection { direction, .. }) => assert_eq!(direction, "q"),
            other => panic!("expected unreachable direction, got {other:?}"),
        }
    }

    #[test]
    fn closed_loop_examples() {
        let m = opo_model(0.2, 1.0, 1.0).unwrap();
        let f = RMatrix::identity(2, 2);
        let g = markovian_gain(&m, &f).unwrap();
        let cl = closed_loop_unconditional(&m, &f, &Gain::Markovian(g.m)).unwrap();
        assert!(close(&cl.sigma_unc, &diag(0.6, 1.0 / 0.6), 1e-8));
        assert!(max_abs(&cl.excess) < 1e-12);
        assert!(cl.mean_decays);

        let cl = closed_loop_unconditional(&m, &f, &Gain::None).unwrap();
        assert!(close(&cl.sigma_unc, &diag(1.0 / 1.4, 1.0 / 0.6), 1e-10));
    }

    #[test]
    fn reference_limits() {
        let r = opo_reference(0.2, 1.0, 1.0, 1e-12).unwrap();
        assert!(r.f_a < 1e-5 && r.f_b < 1e-5);
        let r = opo_reference(0.4999999, 1.0, 1.0, 1.0).unwrap();
        assert!(r.sigma_c[0] < 1e-6);
        assert!(opo_reference(0.5, 1.0, 1.0, 1.0).is_err());
        assert!(opo_reference(0.2, 1.0, 0.0, 1.0).is_err());
        for k in 0..10 {
            let q = 10f64.powf(-4.0 + k as f64 * 5.0 / 9.0);
            let r = opo_reference(0.2, 1.0, 1.0, q).unwrap();
            assert!(r.f_b >= r.f_a);
        }
    }

    #[test]
    fn vacuum_is_physical_and_squeezed_violation_flagged() {
        assert_abs_diff_eq!(
            physicality_min_eigenvalue(&RMatrix::identity(2, 2)).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert!(physicality_min_eigenvalue(&diag(0.5, 1.0)).unwrap() < -0.1);
        assert!(GaussianState::new(RVector::zeros(2), diag(0.5, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn solvers_match_closed_forms(ci in 0usize..10, qi in 0usize..10) {
            let chi = 0.45 * (ci as f64 + 0.5) / 10.0;
            let q = 10f64.powf(-4.0 + qi as f64 * 5.0 / 9.0);
            let m = opo_model(chi, 1.0, 1.0).unwrap();
            let r = opo_reference(chi, 1.0, 1.0, q).unwrap();
            let rel = |x: f64, y: f64| (x - y).abs() <= 1e-6 * y.abs().max(1e-12);
            let s = riccati_steady_state(&m).unwrap();
            prop_assert!(rel(s[(0, 0)], r.sigma_c[0]) && rel(s[(1, 1)], r.sigma_c[1]));
            let g = markovian_gain(&m, &RMatrix::identity(2, 2)).unwrap();
            prop_assert!(rel(g.m[(0, 0)], r.m_opt_11));
            let f = RMatrix::identity(2, 2);
            let l = lqg_gain(&m, &opo_lqg_spec(f.clone(), q)).unwrap();
            let x = excess_noise_ss(&m, &f, &l.k).unwrap();
            prop_assert!(rel(x[(0, 0)], r.f_a));
        }

        #[test]
        fn conditional_step_keeps_sigma_symmetric(
            s11 in 0.5f64..3.0, s22 in 0.5f64..3.0, s12 in -0.3f64..0.3,
            dw0 in -0.1f64..0.1, chi in -0.4f64..0.4,
        ) {
            let m = opo_model(chi, 1.0, 0.8).unwrap();
            let st = GaussianState { r: RVector::zeros(2), sigma: RMatrix::from_row_slice(2, 2, &[s11, s12, s12, s22]) };
            let (next, _) = conditional_step(&st, &m, 1e-3, &RVector::from_vec(vec![dw0, 0.0]), &Controller::None).unwrap();
            prop_assert_eq!(next.sigma[(0, 1)], next.sigma[(1, 0)]);
        }
    }
}
