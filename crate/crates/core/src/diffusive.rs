//! Homodyne and heterodyne trajectories, Markovian homodyne feedback, and
//! detection of squeezed-thermal inputs.
//!
//! Euler-type steppers consume the Wiener increment `dw` and report the
//! photocurrent increment `dy`; the Kraus stepper consumes `dy` directly.
//! The local-oscillator phase enters through `c -> c e^{i theta}`.

use crate::error::{Error, Result};
use crate::jump::{require_vacuum, LinearScheme, WeightedState};
use crate::master::{generalized_unchecked, MonitorOps, OpenSystemModel};
use crate::ops::{
    check_dims, commutator, dissipator_unchecked, hermiticity_defect,
    measurement_superop_unchecked, real, sup_norm, trace_product, CMatrix, DensityMatrix,
    Tolerances, C64, I,
};

/// Sampled record of a diffusive trajectory, `channels` values per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffusiveRecord {
    pub channels: usize,
    pub grid_dy: Vec<f64>,
    pub grid_dw: Vec<f64>,
}

impl DiffusiveRecord {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn push(&mut self, dy: &[f64], dw: &[f64]) {
        self.grid_dy.extend_from_slice(dy);
        self.grid_dw.extend_from_slice(dw);
    }

    pub fn steps(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.grid_dy.len() / self.channels
        }
    }
}

fn quadrature_mean(rho: &CMatrix, a: &CMatrix) -> f64 {
    // <a + a^dag> = 2 Re Tr[rho a]
    2.0 * trace_product(rho, a).re
}

fn vacuum_monitor<'a>(model: &'a OpenSystemModel, rho: &CMatrix) -> Result<&'a MonitorOps> {
    check_dims(model.hamiltonian(), rho)?;
    require_vacuum(model, "this stepper")?;
    model.monitor()
}

/// `dy = sqrt(eta kappa) <c e^{i theta} + h.c.> dt + dw`.
pub fn homodyne_current(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dw: f64,
) -> Result<f64> {
    check_dims(model.hamiltonian(), rho)?;
    let m = model.monitor()?;
    Ok((model.efficiency() * m.kappa).sqrt() * quadrature_mean(rho, &m.c_theta) * dt + dw)
}

/// Euler step of the efficiency-`eta` homodyne equation
/// `rho + (-i[H,rho] + kappa D[c] rho) dt + sqrt(eta kappa) H[c e^{i theta}] rho dw`,
/// renormalized. Returns the state and `dy`.
pub fn homodyne_sme_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dw: f64,
) -> Result<(DensityMatrix, f64)> {
    let m = vacuum_monitor(model, rho)?;
    let s = (model.efficiency() * m.kappa).sqrt();
    let dy = s * quadrature_mean(rho, &m.c_theta) * dt + dw;
    let next = rho.matrix()
        + model.lindblad_unchecked(rho) * real(dt)
        + measurement_superop_unchecked(&m.c_theta, rho) * real(s * dw);
    Ok((DensityMatrix::normalize(next)?, dy))
}

fn homodyne_kraus_numerator(
    model: &OpenSystemModel,
    m: &MonitorOps,
    rho: &CMatrix,
    dt: f64,
    dy: f64,
) -> CMatrix {
    let (g, g_adj) = model.effective_generator();
    let d = rho.nrows();
    let s = (model.efficiency() * m.kappa).sqrt() * dy;
    let k = CMatrix::identity(d, d) + g * real(dt) + &m.c_theta * real(s);
    let k_adj = CMatrix::identity(d, d) + g_adj * real(dt) + &m.c_theta_adj * real(s);
    let mut num = &k * rho * &k_adj;
    let eta = model.efficiency();
    if eta < 1.0 {
        num += &m.c * rho * &m.c_adj * real((1.0 - eta) * m.kappa * dt);
    }
    for (l, l_adj) in &m.others {
        num += l * rho * l_adj * real(dt);
    }
    num
}

/// Kraus-map step driven by the measured `dy`:
/// `(M rho M^dag + kappa (1-eta) c rho c^dag dt) / Tr[...]` with
/// `M = 1 - i H dt - kappa/2 c^dag c dt + sqrt(eta kappa) c dy`.
/// Positive for every `dt`.
pub fn homodyne_kraus_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dy: f64,
) -> Result<DensityMatrix> {
    let m = vacuum_monitor(model, rho)?;
    DensityMatrix::normalize(homodyne_kraus_numerator(model, m, rho, dt, dy))
}

/// Kraus step with the current built from `dw` at the pre-step state.
pub fn homodyne_kraus_step_dw(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dw: f64,
) -> Result<(DensityMatrix, f64)> {
    let dy = homodyne_current(rho, model, dt, dw)?;
    Ok((homodyne_kraus_step(rho, model, dt, dy)?, dy))
}

/// Deviation of `sum_J p(J) M_J^dag M_J` (plus the unmonitored and
/// inefficiency terms) from the identity, with `J ~ N(0, dt)` integrated by
/// three-point Gauss-Hermite quadrature (exact for the quadratic integrand).
pub fn kraus_normalization_residual(model: &OpenSystemModel, dt: f64) -> Result<f64> {
    let m = model.monitor()?;
    let (g, g_adj) = model.effective_generator();
    let d = model.dim();
    let eta = model.efficiency();
    let s = (eta * m.kappa).sqrt();
    let node = (3.0 * dt).sqrt();
    let mut acc = CMatrix::zeros(d, d);
    for (j, w) in [(-node, 1.0 / 6.0), (0.0, 2.0 / 3.0), (node, 1.0 / 6.0)] {
        let k = CMatrix::identity(d, d) + g * real(dt) + &m.c_theta * real(s * j);
        let k_adj = CMatrix::identity(d, d) + g_adj * real(dt) + &m.c_theta_adj * real(s * j);
        acc += k_adj * k * real(w);
    }
    acc += &m.k * real((1.0 - eta) * m.kappa * dt);
    for (l, l_adj) in &m.others {
        acc += l_adj * l * real(dt);
    }
    acc -= CMatrix::identity(d, d);
    Ok(sup_norm(&acc))
}

/// Heterodyne as two homodyne channels `c/sqrt 2` and `i c/sqrt 2`.
/// Returns the state and the two current increments.
pub fn heterodyne_sme_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dw1: f64,
    dw2: f64,
) -> Result<(DensityMatrix, f64, f64)> {
    let m = vacuum_monitor(model, rho)?;
    let s = (0.5 * model.efficiency() * m.kappa).sqrt();
    let c1 = &m.c_theta;
    let c2 = &m.c_theta * I;
    let dy1 = s * quadrature_mean(rho, c1) * dt + dw1;
    let dy2 = s * quadrature_mean(rho, &c2) * dt + dw2;
    let next = rho.matrix()
        + model.lindblad_unchecked(rho) * real(dt)
        + measurement_superop_unchecked(c1, rho) * real(s * dw1)
        + measurement_superop_unchecked(&c2, rho) * real(s * dw2);
    Ok((DensityMatrix::normalize(next)?, dy1, dy2))
}

/// Current increment under the ostensible law of linear homodyne
/// trajectories, `dy ~ N(sqrt(eta kappa) mu dt, dt)`.
pub fn ostensible_homodyne_current(
    model: &OpenSystemModel,
    dt: f64,
    mu: f64,
    dw: f64,
) -> Result<f64> {
    let m = model.monitor()?;
    Ok((model.efficiency() * m.kappa).sqrt() * mu * dt + dw)
}

/// Linear homodyne step for a current `dy` drawn from the ostensible law.
pub fn linear_homodyne_step(
    w: &WeightedState,
    model: &OpenSystemModel,
    dt: f64,
    dy: f64,
    mu: f64,
    scheme: LinearScheme,
) -> Result<WeightedState> {
    if !mu.is_finite() {
        return Err(Error::NonFinite("mu"));
    }
    let rho = w.state.matrix();
    let m = vacuum_monitor(model, rho)?;
    let s = (model.efficiency() * m.kappa).sqrt();
    match scheme {
        LinearScheme::Euler => {
            let lin = &m.c_theta * rho + rho * &m.c_theta_adj - rho * real(mu);
            let next =
                rho + model.lindblad_unchecked(rho) * real(dt) + lin * real(s * (dy - s * mu * dt));
            w.absorb(next, 0.0)
        }
        LinearScheme::Kraus => {
            let num = homodyne_kraus_numerator(model, m, rho, dt, dy);
            // density ratio N(0, dt) / N(s mu dt, dt) evaluated at dy
            let log_scale = -s * mu * dy + 0.5 * s * s * mu * mu * dt;
            w.absorb(num, log_scale)
        }
    }
}

/// Markovian homodyne feedback `H_fb = I~(t) F` with the renormalized
/// current `I~ = dy / (dt sqrt eta)`.
#[derive(Debug, Clone)]
pub struct HomodyneFeedback {
    f: CMatrix,
}

impl HomodyneFeedback {
    pub fn new(f: CMatrix) -> Result<Self> {
        let defect = hermiticity_defect(&f);
        if defect > Tolerances::default().hermiticity {
            return Err(Error::NotHermitian {
                what: "feedback operator",
                defect,
            });
        }
        Ok(Self { f })
    }

    pub fn operator(&self) -> &CMatrix {
        &self.f
    }
}

/// `I~ = dy / (dt sqrt eta)`, the current the feedback Hamiltonian uses.
pub fn renormalized_current(dy: f64, dt: f64, eta: f64) -> f64 {
    dy / (dt * eta.sqrt())
}

fn feedback_checks(model: &OpenSystemModel, rho: &CMatrix, f: &CMatrix) -> Result<()> {
    check_dims(model.hamiltonian(), rho)?;
    check_dims(model.hamiltonian(), f)?;
    let defect = hermiticity_defect(f);
    if defect > Tolerances::default().hermiticity {
        return Err(Error::NotHermitian {
            what: "feedback operator",
            defect,
        });
    }
    if model.efficiency() <= 0.0 {
        return Err(Error::Unsupported(
            "homodyne feedback needs a nonzero detection efficiency".into(),
        ));
    }
    require_vacuum(model, "homodyne feedback")
}

fn feedback_rhs_unchecked(
    model: &OpenSystemModel,
    m: &MonitorOps,
    rho: &CMatrix,
    f: &CMatrix,
) -> CMatrix {
    let sk = m.kappa.sqrt();
    let x = &m.c_theta * rho + rho * &m.c_theta_adj;
    model.lindblad_unchecked(rho) - commutator(f, &x) * (I * sk)
        + dissipator_unchecked(f, rho) * real(1.0 / model.efficiency())
}

/// Unconditional feedback master equation
/// `-i[H,rho] + kappa D[c] rho - i sqrt(kappa) [F, c rho + rho c^dag] + D[F] rho / eta`.
pub fn feedback_me_rhs(rho: &CMatrix, model: &OpenSystemModel, f: &CMatrix) -> Result<CMatrix> {
    feedback_checks(model, rho, f)?;
    let m = model.monitor()?;
    Ok(feedback_rhs_unchecked(model, m, rho, f))
}

/// The same generator in Lindblad form:
/// `-i sqrt(kappa) [(c^dag F + F c)/2, rho] + D[sqrt(kappa) c - i F] rho + (1-eta)/eta D[F] rho`.
pub fn lindblad_form_rhs(rho: &CMatrix, model: &OpenSystemModel, f: &CMatrix) -> Result<CMatrix> {
    feedback_checks(model, rho, f)?;
    let m = model.monitor()?;
    let eta = model.efficiency();
    let sk = m.kappa.sqrt();
    let h_fb = (&m.c_theta_adj * f + f * &m.c_theta) * real(0.5 * sk);
    let c_bar = &m.c_theta * real(sk) - f * I;
    let h = model.hamiltonian() + h_fb;
    let mut out = commutator(&h, rho) * (-I) + dissipator_unchecked(&c_bar, rho);
    if eta < 1.0 {
        out += dissipator_unchecked(f, rho) * real((1.0 - eta) / eta);
    }
    for (l, _) in &m.others {
        out += dissipator_unchecked(l, rho);
    }
    Ok(out)
}

/// Conditional step under Markovian homodyne feedback:
/// `rho + rhs_fb dt + sqrt(eta kappa) H[c] rho dw - i[F, rho] dw / sqrt(eta)`,
/// renormalized. Returns the state and the raw current `dy`.
pub fn homodyne_feedback_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    fb: &HomodyneFeedback,
    dt: f64,
    dw: f64,
) -> Result<(DensityMatrix, f64)> {
    feedback_checks(model, rho, &fb.f)?;
    let m = model.monitor()?;
    let eta = model.efficiency();
    let s = (eta * m.kappa).sqrt();
    let dy = s * quadrature_mean(rho, &m.c_theta) * dt + dw;
    let next = rho.matrix()
        + feedback_rhs_unchecked(model, m, rho, &fb.f) * real(dt)
        + measurement_superop_unchecked(&m.c_theta, rho) * real(s * dw)
        - commutator(&fb.f, rho) * (I * (dw / eta.sqrt()));
    Ok((DensityMatrix::normalize(next)?, dy))
}

/// Detection scheme for a squeezed-thermal input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BathDetection {
    Homodyne,
    Heterodyne,
}

fn bath_stepper_checks(model: &OpenSystemModel, rho: &CMatrix) -> Result<()> {
    check_dims(model.hamiltonian(), rho)?;
    model.bath().validate()?;
    if model.efficiency() != 1.0 {
        return Err(Error::Unsupported(
            "squeezed-thermal detection is defined for unit efficiency only".into(),
        ));
    }
    if model.phase() != 0.0 {
        return Err(Error::Unsupported(
            "squeezed-thermal detection is defined for zero homodyne phase only".into(),
        ));
    }
    if model.bath().m.im != 0.0 {
        return Err(Error::Unsupported(
            "the photocurrent for complex squeezing M is not defined; use a real M".into(),
        ));
    }
    Ok(())
}

/// Current noise scale `sqrt(L)`, `L = 2N + 1 + 2M`, for homodyne detection.
pub fn bath_current_scale(model: &OpenSystemModel) -> f64 {
    let b = model.bath();
    (2.0 * b.n_thermal + 1.0 + 2.0 * b.m.re).sqrt()
}

/// Homodyne step for a squeezed-thermal (real `M`) input:
/// deterministic part from [`crate::master::generalized_bath_me_rhs`],
/// stochastic part `sqrt(kappa) H[(N+M^*+1) c - (N+M) c^dag] rho dw / sqrt L`,
/// current `dy = sqrt(kappa) <c + c^dag> dt + sqrt(L) dw`.
pub fn generalized_bath_homodyne_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dw: f64,
) -> Result<(DensityMatrix, f64)> {
    bath_stepper_checks(model, rho)?;
    let m = model.monitor()?;
    let b = model.bath();
    let n = b.n_thermal;
    let x = &m.c * (b.m.conj() + n + 1.0) - &m.c_adj * (b.m + n);
    let scale = bath_current_scale(model);
    let sk = m.kappa.sqrt();
    let dy = sk * quadrature_mean(rho, &m.c) * dt + scale * dw;
    let next = rho.matrix()
        + generalized_unchecked(model, rho) * real(dt)
        + measurement_superop_unchecked(&x, rho) * real(sk * dw / scale);
    Ok((DensityMatrix::normalize(next)?, dy))
}

/// Heterodyne step for a thermal (`M = 0`) input; currents carry noise
/// scale `sqrt(2(N+1))`.
pub fn thermal_heterodyne_step(
    rho: &DensityMatrix,
    model: &OpenSystemModel,
    dt: f64,
    dw1: f64,
    dw2: f64,
) -> Result<(DensityMatrix, f64, f64)> {
    bath_stepper_checks(model, rho)?;
    if model.bath().m != C64::new(0.0, 0.0) {
        return Err(Error::Unsupported(
            "heterodyne detection of a squeezed input is not defined".into(),
        ));
    }
    let m = model.monitor()?;
    let n = model.bath().n_thermal;
    let x1 = &m.c * real(n + 1.0) - &m.c_adj * real(n);
    let x2 = (&m.c * real(n + 1.0) + &m.c_adj * real(n)) * I;
    let scale = (2.0 * (n + 1.0)).sqrt();
    let sk = m.kappa.sqrt();
    let dy1 = sk * quadrature_mean(rho, &m.c) * dt + scale * dw1;
    let dy2 = sk * quadrature_mean(rho, &(&m.c * I)) * dt + scale * dw2;
    let next = rho.matrix()
        + generalized_unchecked(model, rho) * real(dt)
        + measurement_superop_unchecked(&x1, rho) * real(sk * dw1 / scale)
        + measurement_superop_unchecked(&x2, rho) * real(sk * dw2 / scale);
    Ok((DensityMatrix::normalize(next)?, dy1, dy2))
}

/// `(r, mu, nu)` with `r = ln(1 + 2N + 2 sqrt(N(N+1)))/2`, `mu = cosh r`,
/// `nu = sinh r`.
pub fn squeezing_parameters(n: f64) -> Result<(f64, f64, f64)> {
    if !(n.is_finite() && n >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "thermal photon number must be non-negative, got {n}"
        )));
    }
    let r = 0.5 * (1.0 + 2.0 * n + 2.0 * (n * (n + 1.0)).sqrt()).ln();
    Ok((r, r.cosh(), r.sinh()))
}

/// Jump operator `mu c - nu c^dag` that turns a squeezed-vacuum input with
/// `M = sqrt(N(N+1))` into an equivalent vacuum problem.
pub fn squeezed_vacuum_jump_operator(c: &CMatrix, n: f64) -> Result<CMatrix> {
    let (_, mu, nu) = squeezing_parameters(n)?;
    Ok(c * real(mu) - c.adjoint() * real(nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master::{me_rhs, BathSpec, Channel};
    use crate::ops::{boson_ops, c64, min_eigenvalue, qubit_ops};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn decay() -> OpenSystemModel {
        OpenSystemModel::monitored(CMatrix::zeros(2, 2), 1.0, qubit_ops().sigma_minus).unwrap()
    }

    fn driven(eta: f64) -> OpenSystemModel {
        let q = qubit_ops();
        OpenSystemModel::monitored(
            q.sigma_x * real(0.8) + q.sigma_z * real(0.3),
            1.0,
            q.sigma_minus,
        )
        .unwrap()
        .with_efficiency(eta)
        .unwrap()
    }

    fn generic() -> DensityMatrix {
        DensityMatrix::normalize(CMatrix::from_row_slice(
            2,
            2,
            &[c64(0.6, 0.0), c64(0.2, 0.3), c64(0.2, -0.3), c64(0.4, 0.0)],
        ))
        .unwrap()
    }

    fn e() -> DensityMatrix {
        DensityMatrix::diagonal(&[1.0, 0.0]).unwrap()
    }

    fn g() -> DensityMatrix {
        DensityMatrix::diagonal(&[0.0, 1.0]).unwrap()
    }

    fn matrix_units(d: usize) -> Vec<CMatrix> {
        let mut out = Vec::new();
        for i in 0..d {
            for j in 0..d {
                let mut m = CMatrix::zeros(d, d);
                m[(i, j)] = real(1.0);
                out.push(m);
            }
        }
        out
    }

    #[test]
    fn dark_state_is_stationary() {
        let (rho, dy) = homodyne_sme_step(&g(), &decay(), 1e-3, 0.02).unwrap();
        assert!(sup_norm(&(rho.matrix() - g().matrix())) < 1e-15);
        assert_eq!(dy, 0.02);
        let (rho, dy1, dy2) = heterodyne_sme_step(&g(), &decay(), 1e-3, 0.01, -0.03).unwrap();
        assert!(sup_norm(&(rho.matrix() - g().matrix())) < 1e-15);
        assert_eq!((dy1, dy2), (0.01, -0.03));
    }

    #[test]
    fn zero_efficiency_is_deterministic() {
        let model = driven(0.0);
        let rho = generic();
        let (a, dy) = homodyne_sme_step(&rho, &model, 1e-3, 0.05).unwrap();
        let euler = rho.matrix() + me_rhs(&model, &rho).unwrap() * real(1e-3);
        assert!(sup_norm(&(a.matrix() - euler)) < 1e-15);
        assert_eq!(dy, 0.05);
    }

    #[test]
    fn two_point_quadrature_recovers_euler_step() {
        let dt: f64 = 1e-3;
        let h = dt.sqrt();
        for eta in [1.0, 0.4] {
            let model = driven(eta).with_phase(0.7).unwrap();
            let rho = generic();
            let euler = rho.matrix() + me_rhs(&model, &rho).unwrap() * real(dt);

            let plus = homodyne_sme_step(&rho, &model, dt, h).unwrap().0;
            let minus = homodyne_sme_step(&rho, &model, dt, -h).unwrap().0;
            let avg = (plus.matrix() + minus.matrix()) * real(0.5);
            assert!(sup_norm(&(avg - &euler)) < 1e-15);

            let mut avg = CMatrix::zeros(2, 2);
            for (a, b) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                avg += heterodyne_sme_step(&rho, &model, dt, a, b)
                    .unwrap()
                    .0
                    .into_matrix()
                    * real(0.25);
            }
            assert!(sup_norm(&(avg - &euler)) < 1e-15);
        }
    }

    #[test]
    fn kraus_examples() {
        let model = decay();
        let rho = homodyne_kraus_step(&e(), &model, 0.01, 0.0).unwrap();
        assert!(sup_norm(&(rho.matrix() - e().matrix())) < 1e-15);

        let m = model.monitor().unwrap();
        let num = homodyne_kraus_numerator(&model, m, e().matrix(), 0.01, 0.1);
        let want = CMatrix::from_row_slice(
            2,
            2,
            &[real(0.990025), real(0.0995), real(0.0995), real(0.01)],
        );
        assert!(sup_norm(&(&num - want)) < 1e-15);
        assert_abs_diff_eq!(num.trace().re, 1.000025, epsilon = 1e-15);
    }

    #[test]
    fn kraus_positive_for_large_steps() {
        let model = driven(0.7);
        let mut rho = generic();
        for k in 0..200 {
            let dy = if k % 2 == 0 { 3.0 } else { -2.5 };
            rho = homodyne_kraus_step(&rho, &model, 0.5, dy).unwrap();
            assert!(min_eigenvalue(&rho) >= -1e-12);
        }
    }

    #[test]
    fn kraus_normalization_is_second_order() {
        for eta in [1.0, 0.5] {
            let model = driven(eta);
            let r1 = kraus_normalization_residual(&model, 1e-2).unwrap();
            let r2 = kraus_normalization_residual(&model, 5e-3).unwrap();
            let order = (r1 / r2).log2();
            assert!(order >= 1.9, "order {order}");
        }
    }

    #[test]
    fn kraus_agrees_with_sme_to_first_order() {
        let model = driven(1.0);
        let rho = generic();
        let dt: f64 = 1e-6;
        let dw = 1e-3;
        let (a, dy) = homodyne_sme_step(&rho, &model, dt, dw).unwrap();
        let b = homodyne_kraus_step(&rho, &model, dt, dy).unwrap();
        // difference is O(dt) = O(dw^2)
        assert!(sup_norm(&(a.matrix() - b.matrix())) < 10.0 * dt);
    }

    #[test]
    fn heterodyne_deterministic_part_matches_homodyne() {
        let model = driven(1.0);
        let rho = generic();
        let a = homodyne_sme_step(&rho, &model, 1e-3, 0.0).unwrap().0;
        let b = heterodyne_sme_step(&rho, &model, 1e-3, 0.0, 0.0).unwrap().0;
        assert!(sup_norm(&(a.matrix() - b.matrix())) < 1e-15);
    }

    #[test]
    fn linear_homodyne_dark_state() {
        let w = WeightedState::new(g());
        for scheme in [LinearScheme::Euler, LinearScheme::Kraus] {
            let out = linear_homodyne_step(&w, &decay(), 1e-3, 0.0, 0.0, scheme).unwrap();
            assert!(sup_norm(&(out.state.matrix() - g().matrix())) < 1e-15);
            assert_abs_diff_eq!(out.weight(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_kraus_matches_nonlinear_kraus_pathwise() {
        let dt: f64 = 1e-4;
        for (eta, mu) in [(1.0, 0.0), (1.0, 0.4), (0.6, -0.3)] {
            let model = driven(eta);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut rho = e();
            let mut w = WeightedState::new(e());
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let dy = ostensible_homodyne_current(&model, dt, mu, z * dt.sqrt()).unwrap();
                rho = homodyne_kraus_step(&rho, &model, dt, dy).unwrap();
                w = linear_homodyne_step(&w, &model, dt, dy, mu, LinearScheme::Kraus).unwrap();
                worst = worst.max(sup_norm(&(rho.matrix() - w.state.matrix())));
            }
            assert!(worst <= 1e-7, "{worst}");
        }
    }

    #[test]
    fn linear_euler_tracks_nonlinear_euler() {
        let dt: f64 = 1e-5;
        let model = driven(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rho = e();
        let mut w = WeightedState::new(e());
        for _ in 0..1000 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let (next, dy) = homodyne_sme_step(&rho, &model, dt, z * dt.sqrt()).unwrap();
            w = linear_homodyne_step(&w, &model, dt, dy, 0.0, LinearScheme::Euler).unwrap();
            rho = next;
        }
        assert!(sup_norm(&(rho.matrix() - w.state.matrix())) < 1e-2);
    }

    #[test]
    fn feedback_zero_reduces_to_homodyne() {
        let fb = HomodyneFeedback::new(CMatrix::zeros(2, 2)).unwrap();
        let model = driven(0.8);
        let rho = generic();
        let (a, dya) = homodyne_feedback_step(&rho, &model, &fb, 1e-3, 0.03).unwrap();
        let (b, dyb) = homodyne_sme_step(&rho, &model, 1e-3, 0.03).unwrap();
        assert!(sup_norm(&(a.matrix() - b.matrix())) < 1e-15);
        assert_eq!(dya, dyb);
    }

    fn random_hermitian(seed: u64, d: usize) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = CMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                m[(i, j)] = c64(re, im);
            }
        }
        (&m + m.adjoint()) * real(0.5)
    }

    #[test]
    fn feedback_forms_agree_on_operator_basis() {
        let f = random_hermitian(17, 2);
        for eta in [0.5, 0.7, 1.0] {
            let model = driven(eta);
            for unit in matrix_units(2) {
                let a = feedback_me_rhs(&unit, &model, &f).unwrap();
                let b = lindblad_form_rhs(&unit, &model, &f).unwrap();
                assert!(sup_norm(&(a - b)) <= 1e-12);
            }
        }
        let zero = CMatrix::zeros(2, 2);
        let model = driven(1.0);
        let rho = generic();
        let base = me_rhs(&model, &rho).unwrap();
        assert!(sup_norm(&(feedback_me_rhs(&rho, &model, &zero).unwrap() - &base)) < 1e-15);
        assert!(sup_norm(&(lindblad_form_rhs(&rho, &model, &zero).unwrap() - &base)) < 1e-15);
        assert!(matches!(
            feedback_me_rhs(&rho, &driven(0.0), &f),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn unit_efficiency_feedback_is_modified_homodyne() {
        // Conditional generator equals the homodyne equation for
        // c_bar = sqrt(kappa) c - i F plus H_fb = sqrt(kappa)(c^dag F + F c)/2.
        let f = random_hermitian(23, 2);
        let base = driven(1.0);
        let c = base.monitor().unwrap().c.clone();
        let c_bar = &c - &f * I;
        let h_fb = (c.adjoint() * &f + &f * &c) * real(0.5);
        let modified = OpenSystemModel::monitored(base.hamiltonian() + h_fb, 1.0, c_bar).unwrap();
        let fb = HomodyneFeedback::new(f).unwrap();
        let dt: f64 = 1e-3;
        for rho in [generic(), e(), g(), DensityMatrix::maximally_mixed(2)] {
            for dw in [0.0, 0.03, -0.05] {
                let a = homodyne_feedback_step(&rho, &base, &fb, dt, dw).unwrap().0;
                let b = homodyne_sme_step(&rho, &modified, dt, dw).unwrap().0;
                assert!(sup_norm(&(a.matrix() - b.matrix())) < 1e-12);
            }
        }
    }

    #[test]
    fn feedback_two_point_average_is_me_step() {
        let f = random_hermitian(29, 2);
        let fb = HomodyneFeedback::new(f.clone()).unwrap();
        let model = driven(0.6);
        let rho = generic();
        let dt: f64 = 1e-3;
        let h = dt.sqrt();
        let plus = homodyne_feedback_step(&rho, &model, &fb, dt, h).unwrap().0;
        let minus = homodyne_feedback_step(&rho, &model, &fb, dt, -h).unwrap().0;
        let avg = (plus.matrix() + minus.matrix()) * real(0.5);
        let euler = rho.matrix() + feedback_me_rhs(&rho, &model, &f).unwrap() * real(dt);
        assert!(sup_norm(&(avg - euler)) < 1e-15);
    }

    #[test]
    fn vacuum_bath_reduces_to_homodyne() {
        let model = driven(1.0);
        let rho = generic();
        for dw in [0.0, 0.02, -0.04] {
            let (a, dya) = generalized_bath_homodyne_step(&rho, &model, 1e-3, dw).unwrap();
            let (b, dyb) = homodyne_sme_step(&rho, &model, 1e-3, dw).unwrap();
            assert_eq!(a, b);
            assert_eq!(dya, dyb);
        }
    }

    #[test]
    fn thermal_current_variance() {
        let model = decay().with_bath(BathSpec::thermal(1.0)).unwrap();
        assert_abs_diff_eq!(bath_current_scale(&model).powi(2), 3.0, epsilon = 1e-15);
        let rho = DensityMatrix::diagonal(&[1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let dt: f64 = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 200_000;
        let mut s2 = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let dy = generalized_bath_homodyne_step(&rho, &model, dt, z * dt.sqrt())
                .unwrap()
                .1;
            s2 += dy * dy;
        }
        let var_rate = s2 / n as f64 / dt;
        assert!((var_rate - 3.0).abs() < 0.03, "{var_rate}");
    }

    #[test]
    fn bath_steppers_two_point_average() {
        let b = boson_ops(6).unwrap();
        let model = OpenSystemModel::monitored(b.n.clone() * real(0.2), 0.7, b.a.clone())
            .unwrap()
            .with_bath(BathSpec::squeezed(0.5, c64(0.4, 0.0)))
            .unwrap();
        let mut rho = CMatrix::zeros(6, 6);
        for i in 0..3 {
            for j in 0..3 {
                rho[(i, j)] = real(1.0 / (1.0 + (i + j) as f64));
            }
        }
        let rho = DensityMatrix::normalize(rho).unwrap();
        let dt: f64 = 1e-3;
        let h = dt.sqrt();
        let euler = rho.matrix() + me_rhs(&model, &rho).unwrap() * real(dt);
        let p = generalized_bath_homodyne_step(&rho, &model, dt, h)
            .unwrap()
            .0;
        let m = generalized_bath_homodyne_step(&rho, &model, dt, -h)
            .unwrap()
            .0;
        assert!(sup_norm(&((p.matrix() + m.matrix()) * real(0.5) - &euler)) < 1e-15);

        let thermal = OpenSystemModel::monitored(CMatrix::zeros(6, 6), 0.7, b.a.clone())
            .unwrap()
            .with_bath(BathSpec::thermal(0.5))
            .unwrap();
        let euler = rho.matrix() + me_rhs(&thermal, &rho).unwrap() * real(dt);
        let mut avg = CMatrix::zeros(6, 6);
        for (x, y) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
            avg += thermal_heterodyne_step(&rho, &thermal, dt, x, y)
                .unwrap()
                .0
                .into_matrix()
                * real(0.25);
        }
        assert!(sup_norm(&(avg - euler)) < 1e-15);
        assert!(thermal_heterodyne_step(&rho, &model, dt, 0.0, 0.0).is_err());
    }

    #[test]
    fn bath_stepper_restrictions() {
        let rho = generic();
        let complex_m = decay()
            .with_bath(BathSpec::squeezed(1.0, c64(0.0, 1.0)))
            .unwrap();
        assert!(generalized_bath_homodyne_step(&rho, &complex_m, 1e-3, 0.0).is_err());
        assert!(me_rhs(&complex_m, &rho).is_ok());
        let lossy = driven(0.5).with_bath(BathSpec::thermal(1.0)).unwrap();
        assert!(generalized_bath_homodyne_step(&rho, &lossy, 1e-3, 0.0).is_err());
    }

    #[test]
    fn squeezed_vacuum_operator() {
        let (r, mu, nu) = squeezing_parameters(1.0).unwrap();
        assert_abs_diff_eq!(mu, 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(nu, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.exp(), 1.0 + 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(mu * mu - nu * nu, 1.0, epsilon = 1e-12);
        let c = qubit_ops().sigma_minus;
        assert_eq!(squeezed_vacuum_jump_operator(&c, 0.0).unwrap(), c);
        assert!(squeezed_vacuum_jump_operator(&c, -1.0).is_err());
    }

    #[test]
    fn squeezed_vacuum_matches_generalized_bath() {
        let b = boson_ops(8).unwrap();
        let n = 1.0;
        let m_val = (n * (n + 1.0f64)).sqrt();
        let kappa = 0.9;
        let bath_model = OpenSystemModel::monitored(CMatrix::zeros(8, 8), kappa, b.a.clone())
            .unwrap()
            .with_bath(BathSpec::squeezed(n, c64(m_val, 0.0)))
            .unwrap();
        let c_tilde = squeezed_vacuum_jump_operator(&b.a, n).unwrap();
        let replaced = OpenSystemModel::monitored(CMatrix::zeros(8, 8), kappa, c_tilde).unwrap();
        let (r, _, _) = squeezing_parameters(n).unwrap();
        let mut rho = CMatrix::zeros(8, 8);
        for i in 0..4 {
            for j in 0..4 {
                rho[(i, j)] = c64(1.0 / (1.0 + (i + j) as f64), 0.05 * (i as f64 - j as f64));
            }
        }
        let rho = DensityMatrix::normalize(rho).unwrap();
        let a = me_rhs(&bath_model, &rho).unwrap();
        let bb = me_rhs(&replaced, &rho).unwrap();
        assert!(sup_norm(&(&a - &bb)) < 1e-12);

        let dt: f64 = 1e-3;
        for dw in [0.0, 0.02, -0.03] {
            let (x, dyx) = generalized_bath_homodyne_step(&rho, &bath_model, dt, dw).unwrap();
            let (y, dyy) = homodyne_sme_step(&rho, &replaced, dt, dw).unwrap();
            assert!(sup_norm(&(x.matrix() - y.matrix())) < 1e-12);
            // dy' = sqrt(kappa) e^{-r} <c + c^dag> dt + dw = dy / e^r
            let q = 2.0 * trace_product(&rho, &b.a).re;
            assert_abs_diff_eq!(
                dyx * (-r).exp(),
                kappa.sqrt() * (-r).exp() * q * dt + dw,
                epsilon = 1e-15
            );
            assert!(dyy.is_finite());
        }
    }

    #[test]
    fn unmonitored_channel_enters_all_steppers() {
        let q = qubit_ops();
        let model = OpenSystemModel::new(
            q.sigma_x.clone() * real(0.3),
            vec![
                Channel::new(1.0, q.sigma_minus.clone()),
                Channel::new(0.4, q.sigma_z.clone()),
            ],
        )
        .unwrap();
        let rho = generic();
        let dt: f64 = 1e-3;
        let h = dt.sqrt();
        let euler = rho.matrix() + me_rhs(&model, &rho).unwrap() * real(dt);
        let p = homodyne_sme_step(&rho, &model, dt, h).unwrap().0;
        let m = homodyne_sme_step(&rho, &model, dt, -h).unwrap().0;
        assert!(sup_norm(&((p.matrix() + m.matrix()) * real(0.5) - euler)) < 1e-15);
        assert!(kraus_normalization_residual(&model, 1e-3).unwrap() < 1e-5);
    }

    proptest! {
        #[test]
        fn homodyne_steppers_preserve_hermiticity(
            p in 0.0f64..1.0, phase in 0.0f64..6.3, frac in 0.0f64..1.0,
            dw in -0.1f64..0.1, eta in 0.0f64..=1.0,
        ) {
            let off = C64::from_polar(frac * (p * (1.0 - p)).sqrt(), phase);
            let rho = DensityMatrix::normalize(CMatrix::from_row_slice(
                2, 2, &[real(p), off, off.conj(), real(1.0 - p)],
            )).unwrap();
            let model = driven(eta);
            let (a, dy) = homodyne_sme_step(&rho, &model, 1e-3, dw).unwrap();
            prop_assert!(hermiticity_defect(&a) < 1e-12);
            prop_assert!((a.trace().re - 1.0).abs() < 1e-12);
            let b = homodyne_kraus_step(&rho, &model, 1e-3, dy).unwrap();
            prop_assert!(hermiticity_defect(&b) < 1e-12);
            prop_assert!(min_eigenvalue(&b) >= -1e-12);
        }
    }
}
