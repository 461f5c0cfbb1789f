use contmon_core::ensemble::StoredState;
use contmon_core::gaussian::{
    excess_noise_ss, lqg_gain, markovian_gain, opo_lqg_spec, opo_model, riccati_steady_state,
    unconditional_step,
};
use contmon_core::ops::{boson_ops, expectation};
use contmon_core::*;

fn opo_scenario(controller: Controller) -> Scenario {
    Scenario::Gaussian(GaussianScenario {
        model: opo_model(0.2, 1.0, 1.0).unwrap(),
        initial: GaussianState::vacuum(2),
        controller,
    })
}

fn moments_spec(n: usize, dt: f64, t: f64) -> EnsembleSpec {
    EnsembleSpec {
        sample_every: 100,
        ..EnsembleSpec::new(n, 77, dt, t)
    }
    .observe(Observable::moment("excess_qq", Moment::Excess(0, 0)))
    .observe(Observable::moment("total_qq", Moment::Total(0, 0)))
    .observe(Observable::moment("sigma_qq", Moment::Covariance(0, 0)))
}

#[test]
fn lqg_excess_noise_matches_lyapunov_steady_state() {
    let model = opo_model(0.2, 1.0, 1.0).unwrap();
    let f = RMatrix::identity(2, 2);
    let gain = lqg_gain(&model, &opo_lqg_spec(f.clone(), 1.0)).unwrap();
    let sigma = excess_noise_ss(&model, &f, &gain.k).unwrap();
    let dt = 2e-3;
    let spec = moments_spec(4000, dt, 8.0);
    let out = run_ensemble(
        &spec,
        &opo_scenario(Controller::StateFeedback { f, k: gain.k }),
    )
    .unwrap();
    let (mean, se) = out.stats.series("excess_qq").unwrap();
    let last = mean.len() - 1;
    // Euler-Maruyama bias of the stationary variance is O(dt)
    let bias = 2.0 * dt * sigma[(0, 0)];
    assert!(
        (mean[last] - sigma[(0, 0)]).abs() <= 3.0 * se[last] + bias,
        "MC {} +- {} vs Lyapunov {}",
        mean[last],
        se[last],
        sigma[(0, 0)]
    );

    // and the whole relaxation follows the averaged moment equations
    let reference = reference_solution(&spec, &opo_scenario(Controller::None)).unwrap();
    let free = run_ensemble(&spec, &opo_scenario(Controller::None)).unwrap();
    let report = compare_to_me(
        &free.stats,
        &reference,
        &CompareOptions::with_allowance(10.0 * dt),
    )
    .unwrap();
    assert!(report.pass, "max |z| = {}", report.max_abs_z);
}

#[test]
fn markovian_feedback_removes_excess_noise() {
    let model = opo_model(0.2, 1.0, 1.0).unwrap();
    let f = RMatrix::identity(2, 2);
    let m = markovian_gain(&model, &f).unwrap().m;
    let sigma_c = riccati_steady_state(&model).unwrap();
    let controller = Controller::Markovian { f, m };
    let spec = moments_spec(500, 2e-3, 4.0);

    // started on the conditional steady state the feedback cancels the noise
    let steady = Scenario::Gaussian(GaussianScenario {
        model: model.clone(),
        initial: GaussianState::new(RVector::zeros(2), sigma_c.clone()).unwrap(),
        controller: controller.clone(),
    });
    let out = run_ensemble(&spec, &steady).unwrap();
    let (excess, _) = out.stats.series("excess_qq").unwrap();
    assert!(
        excess.iter().all(|&x| x < 1e-20),
        "max excess {:?}",
        excess.iter().cloned().fold(0.0, f64::max)
    );
    let (total, _) = out.stats.series("total_qq").unwrap();
    assert!((total.last().unwrap() - sigma_c[(0, 0)]).abs() < 1e-8);

    // from the vacuum the transient excess decays with the closed loop
    let from_vacuum = opo_scenario(controller);
    let out = run_ensemble(&spec, &from_vacuum).unwrap();
    let (excess, se) = out.stats.series("excess_qq").unwrap();
    let reference = reference_solution(&spec, &from_vacuum).unwrap();
    let report = compare_to_me(
        &out.stats,
        &reference,
        &CompareOptions::with_allowance(2e-2),
    )
    .unwrap();
    assert!(report.pass, "max |z| = {}", report.max_abs_z);
    let last = excess.len() - 1;
    assert!(excess[last] < excess[excess.len() / 4] + 3.0 * se[last]);
}

fn boson_opo(dim: usize, chi: f64, kappa: f64) -> OpenSystemModel {
    let b = boson_ops(dim).unwrap();
    let h = (&b.q * &b.p + &b.p * &b.q) * real(-chi / 2.0);
    OpenSystemModel::monitored(h, kappa, b.a.clone()).unwrap()
}

#[test]
fn truncated_oscillator_tracks_gaussian_moments() {
    let (chi, kappa, dim) = (0.2, 1.0, 20);
    let model = boson_opo(dim, chi, kappa);
    let b = boson_ops(dim).unwrap();
    let q2 = &b.q * &b.q;
    let dt = 2e-3;
    let t = 2.0;
    let spec = EnsembleSpec {
        positivity: PositivityPolicy::Off,
        sample_every: 50,
        ..EnsembleSpec::new(200, 4, dt, t)
    }
    .observe(Observable::operator("q2", q2.clone()))
    .observe(Observable::operator("q", b.q.clone()));
    let vacuum = DensityMatrix::basis(dim, 0).unwrap();
    let sc = Scenario::quantum(model.clone(), vacuum, Unravelling::HomodyneKraus);
    let out = run_ensemble(&spec, &sc).unwrap();

    // unconditional Gaussian prediction <q^2> = sigma_11 / 2
    let g = opo_model(chi, kappa, 1.0).unwrap();
    let mut state = GaussianState::vacuum(2);
    let mut predicted = vec![state.sigma[(0, 0)] / 2.0];
    for k in 1..=spec
        .sample_steps(&spec.grid().unwrap())
        .last()
        .copied()
        .unwrap()
    {
        state = unconditional_step(&state, &g, dt).unwrap();
        if k % 50 == 0 {
            predicted.push(state.sigma[(0, 0)] / 2.0);
        }
    }
    let (mean, se) = out.stats.series("q2").unwrap();
    assert_eq!(mean.len(), predicted.len());
    for k in 0..mean.len() {
        assert!(
            (mean[k] - predicted[k]).abs() <= 3.0 * se[k] + 2e-3,
            "t={} MC {} +- {} vs {}",
            out.stats.times[k],
            mean[k],
            se[k],
            predicted[k]
        );
    }
}

#[test]
fn conditional_variance_follows_riccati_flow() {
    let (chi, kappa, dim) = (0.2, 1.0, 20);
    let model = boson_opo(dim, chi, kappa);
    let b = boson_ops(dim).unwrap();
    let dt = 1e-3;
    let spec = EnsembleSpec {
        positivity: PositivityPolicy::Off,
        storage: Storage::Full,
        sample_every: 3000,
        ..EnsembleSpec::new(3, 8, dt, 3.0)
    }
    .observe(Observable::operator("q", b.q.clone()));
    let vacuum = DensityMatrix::basis(dim, 0).unwrap();
    let out = run_ensemble(
        &spec,
        &Scenario::quantum(model, vacuum, Unravelling::HomodyneKraus),
    )
    .unwrap();

    let g = opo_model(chi, kappa, 1.0).unwrap();
    let mut state = GaussianState::vacuum(2);
    let dw = RVector::zeros(2);
    for _ in 0..3000 {
        state = gaussian::conditional_step(&state, &g, dt, &dw, &Controller::None)
            .unwrap()
            .0;
    }
    for rec in &out.records {
        let StoredState::Density(rho) = rec.states.last().unwrap() else {
            panic!("expected density matrices");
        };
        let mq = expectation(rho, &b.q).unwrap().re;
        let mq2 = expectation(rho, &(&b.q * &b.q)).unwrap().re;
        let var = mq2 - mq * mq;
        assert!(
            (var - state.sigma[(0, 0)] / 2.0).abs() < 1e-2,
            "trajectory {}: variance {var} vs {}",
            rec.index,
            state.sigma[(0, 0)] / 2.0
        );
    }
}
