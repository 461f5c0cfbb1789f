use std::hint::black_box;

use contmon_bench::{driven_qubit, opo, truncated_opo};
use contmon_core::diffusive::homodyne_kraus_step_dw;
use contmon_core::gaussian::{
    conditional_step, lqg_gain, lyapunov_solve, opo_lqg_spec, riccati_steady_state,
};
use contmon_core::jump::jump_kraus_step;
use contmon_core::master::me_rhs;
use contmon_core::*;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn steppers(c: &mut Criterion) {
    let model = driven_qubit();
    let rho = DensityMatrix::basis(2, 0).unwrap();
    c.bench_function("qubit_jump_kraus_step", |b| {
        b.iter(|| jump_kraus_step(black_box(&rho), &model, 1e-3, 0.5).unwrap())
    });
    c.bench_function("qubit_homodyne_kraus_step", |b| {
        b.iter(|| homodyne_kraus_step_dw(black_box(&rho), &model, 1e-3, 0.01).unwrap())
    });
    let big = truncated_opo(20);
    let vac = DensityMatrix::basis(20, 0).unwrap();
    c.bench_function("boson20_homodyne_kraus_step", |b| {
        b.iter(|| homodyne_kraus_step_dw(black_box(&vac), &big, 1e-3, 0.01).unwrap())
    });
    c.bench_function("boson20_me_rhs", |b| {
        b.iter(|| me_rhs(&big, black_box(vac.matrix())).unwrap())
    });
    let g = opo();
    let s = GaussianState::vacuum(2);
    let dw = RVector::from_vec(vec![0.01, -0.02]);
    c.bench_function("gaussian_conditional_step", |b| {
        b.iter(|| conditional_step(black_box(&s), &g, 1e-3, &dw, &Controller::None).unwrap())
    });
}

fn solvers(c: &mut Criterion) {
    let g = opo();
    c.bench_function("lyapunov_2x2", |b| {
        b.iter(|| lyapunov_solve(black_box(&g.a), &g.d).unwrap())
    });
    c.bench_function("riccati_steady_state", |b| {
        b.iter(|| riccati_steady_state(black_box(&g)).unwrap())
    });
    let spec = opo_lqg_spec(RMatrix::identity(2, 2), 1.0);
    c.bench_function("lqg_gain", |b| {
        b.iter(|| lqg_gain(black_box(&g), &spec).unwrap())
    });
}

fn ensembles(c: &mut Criterion) {
    let q = ops::qubit_ops();
    let spec =
        EnsembleSpec::new(256, 1, 1e-3, 1.0).observe(Observable::operator("rho_ee", q.proj_e));
    let sc = Scenario::quantum(
        driven_qubit(),
        DensityMatrix::basis(2, 0).unwrap(),
        Unravelling::HomodyneKraus,
    );
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    group.bench_function("qubit_homodyne_256x1000", |b| {
        b.iter_batched(
            || spec.clone(),
            |s| run_ensemble(&s, &sc).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, steppers, solvers, ensembles);
criterion_main!(benches);
