//! Fixtures shared by the benchmarks.

use contmon_core::gaussian::opo_model;
use contmon_core::ops::{boson_ops, qubit_ops};
use contmon_core::{real, CMatrix, GaussianModel, OpenSystemModel};

/// Driven qubit with monitored decay, `kappa = 1`.
pub fn driven_qubit() -> OpenSystemModel {
    let q = qubit_ops();
    OpenSystemModel::monitored(q.sigma_x * real(0.5), 1.0, q.sigma_minus)
        .expect("valid qubit model")
}

/// Truncated parametric oscillator with `dim` Fock levels.
pub fn truncated_opo(dim: usize) -> OpenSystemModel {
    let b = boson_ops(dim).expect("valid dimension");
    let h: CMatrix = (&b.q * &b.p + &b.p * &b.q) * real(-0.1);
    OpenSystemModel::monitored(h, 1.0, b.a.clone()).expect("valid oscillator model")
}

pub fn opo() -> GaussianModel {
    opo_model(0.2, 1.0, 1.0).expect("valid oscillator")
}
