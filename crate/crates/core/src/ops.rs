//! Dense operator algebra on a truncated Hilbert space.
//!
//! Qubit operators use the basis order `(|e>, |g>)`: index 0 is the excited
//! state, so `sigma_minus = |g><e|` has its single unit entry at `(1, 0)`.
//! Bosonic operators act on Fock states `|0>..|dim-1>`; truncation makes
//! `[q, p] = i` fail on the last diagonal entry.

use std::collections::BTreeMap;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Numerical tolerances shared by every validation in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub hermiticity: f64,
    pub trace: f64,
    pub positivity: f64,
    pub norm: f64,
    /// Maximum population allowed in the top Fock level before a state is
    /// flagged as leaking out of the truncated space.
    pub truncation_leak: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hermiticity: 1e-10,
            trace: 1e-9,
            positivity: 1e-10,
            norm: 1e-10,
            truncation_leak: 1e-6,
        }
    }
}

/// Density operator. Normalized, Hermitian and positive when built through
/// [`DensityMatrix::new`]; steppers that renormalize on every step build it
/// with [`DensityMatrix::from_matrix_unchecked`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn new(m: CMatrix, tol: &Tolerances) -> Result<Self> {
        check_square(&m)?;
        let diag = validate_state(&m, tol);
        if diag.hermiticity_defect > tol.hermiticity {
            return Err(Error::NotHermitian {
                what: "density matrix",
                defect: diag.hermiticity_defect,
            });
        }
        if diag.trace_defect > tol.trace {
            return Err(Error::TraceDeviation {
                trace: m.trace().re,
            });
        }
        if diag.min_eigenvalue < -tol.positivity {
            return Err(Error::NotPositive {
                min_eigenvalue: diag.min_eigenvalue,
            });
        }
        Ok(Self(m))
    }

    pub fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn pure(psi: &StateVector) -> Self {
        Self(&psi.0 * psi.0.adjoint())
    }

    /// Diagonal state with the given populations (must sum to one).
    pub fn diagonal(populations: &[f64]) -> Result<Self> {
        let m = CMatrix::from_diagonal(&CVector::from_iterator(
            populations.len(),
            populations.iter().map(|&p| real(p)),
        ));
        Self::new(m, &Tolerances::default())
    }

    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        Ok(Self::pure(&StateVector::basis(dim, k)?))
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim) / real(dim as f64))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    /// Divides by the trace and symmetrizes away rounding anti-Hermitian parts.
    pub fn normalize(m: CMatrix) -> Result<Self> {
        let tr = m.trace().re;
        if !tr.is_finite() || tr <= 0.0 {
            return Err(Error::NonFinite("density matrix trace"));
        }
        let h = (&m + m.adjoint()) * real(0.5 / tr);
        Ok(Self(h))
    }
}

impl Deref for DensityMatrix {
    type Target = CMatrix;
    fn deref(&self) -> &CMatrix {
        &self.0
    }
}

/// Normalized state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(CVector);

impl StateVector {
    pub fn new(v: CVector, tol: &Tolerances) -> Result<Self> {
        let norm = v.norm();
        if (norm - 1.0).abs() > tol.norm {
            return Err(Error::NotNormalized { norm });
        }
        Ok(Self(v))
    }

    /// Normalizes `v`; fails on the zero vector.
    pub fn normalized(v: CVector) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NonFinite("state vector norm"));
        }
        Ok(Self(v / real(norm)))
    }

    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::InvalidParameter(format!(
                "basis index {k} out of range for dimension {dim}"
            )));
        }
        let mut v = CVector::zeros(dim);
        v[k] = real(1.0);
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.0
    }

    pub fn projector(&self) -> DensityMatrix {
        DensityMatrix::pure(self)
    }
}

impl Deref for StateVector {
    type Target = CVector;
    fn deref(&self) -> &CVector {
        &self.0
    }
}

pub(crate) fn check_square(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

pub(crate) fn check_dims(a: &CMatrix, b: &CMatrix) -> Result<()> {
    check_square(a)?;
    check_square(b)?;
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    Ok(())
}

/// Largest entry modulus.
pub fn sup_norm(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    sup_norm(&(m - m.adjoint()))
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub fn anticommutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}

/// `A rho A^dag - 1/2 {A^dag A, rho}`.
pub fn dissipator(a: &CMatrix, rho: &CMatrix) -> Result<CMatrix> {
    check_dims(a, rho)?;
    Ok(dissipator_unchecked(a, rho))
}

pub(crate) fn dissipator_unchecked(a: &CMatrix, rho: &CMatrix) -> CMatrix {
    let ad = a.adjoint();
    let ada = &ad * a;
    a * rho * &ad - (&ada * rho + rho * &ada) * real(0.5)
}

/// `A rho + rho A^dag - Tr[(A + A^dag) rho] rho`, for normalized `rho`.
pub fn measurement_superop(a: &CMatrix, rho: &CMatrix) -> Result<CMatrix> {
    check_dims(a, rho)?;
    let tr = rho.trace();
    if (tr - real(1.0)).norm() > Tolerances::default().trace {
        return Err(Error::TraceDeviation { trace: tr.re });
    }
    Ok(measurement_superop_unchecked(a, rho))
}

pub(crate) fn measurement_superop_unchecked(a: &CMatrix, rho: &CMatrix) -> CMatrix {
    let a_rho = a * rho;
    let rho_ad = rho * a.adjoint();
    // Tr[(A + A^dag) rho] = 2 Re Tr[A rho]
    let mean = 2.0 * a_rho.trace().re;
    a_rho + rho_ad - rho * real(mean)
}

/// `Tr[rho A]`.
pub fn expectation(rho: &CMatrix, a: &CMatrix) -> Result<C64> {
    check_dims(a, rho)?;
    Ok(trace_product(rho, a))
}

/// `Tr[A B]` without forming the product.
pub(crate) fn trace_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return m[(0, 0)].re;
    }
    if n == 2 {
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b = (m[(0, 1)] + m[(1, 0)].conj()) * 0.5;
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        return mid - rad;
    }
    let h = (m + m.adjoint()) * real(0.5);
    SymmetricEigen::new(h)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let h = (m + m.adjoint()) * real(0.5);
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `exp(-i s F)` for Hermitian `F`, through its eigendecomposition.
pub fn unitary_exp(f: &CMatrix, s: f64) -> Result<CMatrix> {
    check_square(f)?;
    let defect = hermiticity_defect(f);
    if defect > Tolerances::default().hermiticity {
        return Err(Error::NotHermitian {
            what: "generator",
            defect,
        });
    }
    let eig = SymmetricEigen::new(f.clone());
    let phases = CVector::from_iterator(
        f.nrows(),
        eig.eigenvalues.iter().map(|&l| (-I * (s * l)).exp()),
    );
    let v = &eig.eigenvectors;
    Ok(v * CMatrix::from_diagonal(&phases) * v.adjoint())
}

/// Diagnostics produced by [`validate_state`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDiagnostics {
    pub hermiticity_defect: f64,
    pub trace_defect: f64,
    pub min_eigenvalue: f64,
}

impl StateDiagnostics {
    pub fn is_valid(&self, tol: &Tolerances) -> bool {
        self.hermiticity_defect <= tol.hermiticity
            && self.trace_defect <= tol.trace
            && self.min_eigenvalue >= -tol.positivity
    }

    pub fn positivity_violated(&self, tol: &Tolerances) -> bool {
        self.min_eigenvalue < -tol.positivity
    }
}

pub fn validate_state(rho: &CMatrix, _tol: &Tolerances) -> StateDiagnostics {
    StateDiagnostics {
        hermiticity_defect: hermiticity_defect(rho),
        trace_defect: (rho.trace() - real(1.0)).norm(),
        min_eigenvalue: min_eigenvalue(rho),
    }
}

/// Population of the highest Fock level; large values mean the truncation
/// is too small for the dynamics.
pub fn truncation_leak(rho: &CMatrix) -> f64 {
    let n = rho.nrows();
    if n == 0 {
        0.0
    } else {
        rho[(n - 1, n - 1)].re
    }
}

/// Which canonical operator family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Qubit,
    Boson(usize),
}

/// Pauli and ladder operators of a two-level system in `(|e>, |g>)` order.
#[derive(Debug, Clone)]
pub struct QubitOps {
    pub sigma_minus: CMatrix,
    pub sigma_plus: CMatrix,
    pub sigma_x: CMatrix,
    pub sigma_y: CMatrix,
    pub sigma_z: CMatrix,
    pub identity: CMatrix,
    /// `|e><e|`.
    pub proj_e: CMatrix,
    pub proj_g: CMatrix,
}

pub fn qubit_ops() -> QubitOps {
    let o = real(0.0);
    let l = real(1.0);
    let sigma_minus = CMatrix::from_row_slice(2, 2, &[o, o, l, o]);
    let sigma_plus = sigma_minus.adjoint();
    QubitOps {
        sigma_x: CMatrix::from_row_slice(2, 2, &[o, l, l, o]),
        sigma_y: CMatrix::from_row_slice(2, 2, &[o, -I, I, o]),
        sigma_z: CMatrix::from_row_slice(2, 2, &[l, o, o, -l]),
        identity: CMatrix::identity(2, 2),
        proj_e: CMatrix::from_row_slice(2, 2, &[l, o, o, o]),
        proj_g: CMatrix::from_row_slice(2, 2, &[o, o, o, l]),
        sigma_minus,
        sigma_plus,
    }
}

/// Truncated single-mode operators with `q = (a + a^dag)/sqrt 2` and
/// `p = -i (a - a^dag)/sqrt 2`.
#[derive(Debug, Clone)]
pub struct BosonOps {
    pub a: CMatrix,
    pub a_dag: CMatrix,
    pub q: CMatrix,
    pub p: CMatrix,
    pub n: CMatrix,
    pub identity: CMatrix,
}

pub fn boson_ops(dim: usize) -> Result<BosonOps> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "boson truncation dimension must be at least 2, got {dim}"
        )));
    }
    let mut a = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = real((n as f64).sqrt());
    }
    let a_dag = a.adjoint();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let q = (&a + &a_dag) * real(s);
    let p = (&a - &a_dag) * (-I * s);
    let n = &a_dag * &a;
    Ok(BosonOps {
        a,
        a_dag,
        q,
        p,
        n,
        identity: CMatrix::identity(dim, dim),
    })
}

/// Named operator table, used to resolve operator names in configurations.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub kind: SystemKind,
    ops: BTreeMap<&'static str, CMatrix>,
}

impl OperatorSet {
    pub fn get(&self, name: &str) -> Option<&CMatrix> {
        self.ops.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ops.keys().copied()
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            SystemKind::Qubit => 2,
            SystemKind::Boson(d) => d,
        }
    }
}

pub fn build_standard_ops(kind: SystemKind) -> Result<OperatorSet> {
    let mut ops = BTreeMap::new();
    match kind {
        SystemKind::Qubit => {
            let q = qubit_ops();
            let proj_e = &q.sigma_plus * &q.sigma_minus;
            let proj_g = &q.sigma_minus * &q.sigma_plus;
            ops.insert("sigma_minus", q.sigma_minus);
            ops.insert("sigma_plus", q.sigma_plus);
            ops.insert("sigma_x", q.sigma_x);
            ops.insert("sigma_y", q.sigma_y);
            ops.insert("sigma_z", q.sigma_z);
            ops.insert("identity", q.identity);
            ops.insert("proj_e", proj_e);
            ops.insert("proj_g", proj_g);
        }
        SystemKind::Boson(dim) => {
            let b = boson_ops(dim)?;
            ops.insert("a", b.a);
            ops.insert("a_dag", b.a_dag);
            ops.insert("q", b.q);
            ops.insert("p", b.p);
            ops.insert("n", b.n);
            ops.insert("identity", b.identity);
        }
    }
    Ok(OperatorSet { kind, ops })
}
