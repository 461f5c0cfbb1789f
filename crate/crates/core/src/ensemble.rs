//! Seeded parallel Monte Carlo over trajectories, ensemble statistics and
//! comparison against deterministic references.
//!
//! Trajectories are grouped into fixed chunks of [`CHUNK_SIZE`] consecutive
//! indices. Each chunk is reduced sequentially and the chunk results are
//! combined in index order, so the statistics do not depend on the number
//! of worker threads.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::diffusive::{
    feedback_me_rhs, generalized_bath_homodyne_step, heterodyne_sme_step, homodyne_feedback_step,
    homodyne_kraus_step_dw, homodyne_sme_step, linear_homodyne_step, ostensible_homodyne_current,
    thermal_heterodyne_step, HomodyneFeedback,
};
use crate::error::{Error, Result};
use crate::gaussian::{
    check_state, mean_step, physicality_min_eigenvalue, riccati_rhs, riccati_rk4, Controller,
    GaussianModel, GaussianState, RMatrix, RVector,
};
use crate::jump::{
    jump_feedback_step, jump_kraus_step, jump_sme_step, jump_sse_step, linear_jump_step,
    ostensible_click_probability, JumpFeedback, LinearScheme, WeightedState,
};
use crate::master::{generalized_bath_me_rhs, me_rhs, Channel, OpenSystemModel, TimeGrid};
use crate::ops::{
    check_dims, min_eigenvalue, real, trace_product, CMatrix, CVector, DensityMatrix, StateVector,
};
use crate::rng::{NoiseMode, NoiseStream};

/// Trajectories per reduction chunk.
pub const CHUNK_SIZE: usize = 64;

/// States with a smallest eigenvalue below `-POSITIVITY_TOL` count as
/// positivity violations.
pub const POSITIVITY_TOL: f64 = 1e-12;

/// Largest number of stored matrix entries under [`Storage::Full`].
pub const MAX_STORED_ENTRIES: usize = 50_000_000;

/// Effective sample sizes below this fraction of `n_traj` are flagged.
pub const LOW_ESS_FRACTION: f64 = 0.01;

/// Selector of a Gaussian moment, evaluated on `(r, sigma)` of a
/// conditional trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    /// `r_i`.
    Mean(usize),
    /// Conditional covariance `sigma_ij`.
    Covariance(usize, usize),
    /// `2 r_i r_j`; averages to the excess noise.
    Excess(usize, usize),
    /// `sigma_ij + 2 r_i r_j`; averages to the unconditional covariance.
    Total(usize, usize),
}

impl Moment {
    fn eval(&self, s: &GaussianState) -> f64 {
        match *self {
            Moment::Mean(i) => s.r[i],
            Moment::Covariance(i, j) => s.sigma[(i, j)],
            Moment::Excess(i, j) => 2.0 * s.r[i] * s.r[j],
            Moment::Total(i, j) => s.sigma[(i, j)] + 2.0 * s.r[i] * s.r[j],
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            Moment::Mean(i) => i,
            Moment::Covariance(i, j) | Moment::Excess(i, j) | Moment::Total(i, j) => i.max(j),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    /// `Re Tr[rho O]`.
    Operator {
        name: String,
        op: CMatrix,
    },
    Moment {
        name: String,
        moment: Moment,
    },
}

impl Observable {
    pub fn operator(name: impl Into<String>, op: CMatrix) -> Self {
        Observable::Operator {
            name: name.into(),
            op,
        }
    }

    pub fn moment(name: impl Into<String>, moment: Moment) -> Self {
        Observable::Moment {
            name: name.into(),
            moment,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Observable::Operator { name, .. } | Observable::Moment { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Storage {
    #[default]
    Expectations,
    /// Keep states, expectations and measurement outputs of every trajectory.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositivityPolicy {
    Off,
    #[default]
    Count,
    /// Fail with [`Error::Physicality`] at the first violation.
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub n_traj: usize,
    pub master_seed: u64,
    pub dt: f64,
    pub t_final: f64,
    pub observables: Vec<Observable>,
    pub storage: Storage,
    pub noise: NoiseMode,
    pub positivity: PositivityPolicy,
    /// Statistics are kept every `sample_every` steps (and at the last step).
    pub sample_every: usize,
}

impl EnsembleSpec {
    pub fn new(n_traj: usize, master_seed: u64, dt: f64, t_final: f64) -> Self {
        Self {
            n_traj,
            master_seed,
            dt,
            t_final,
            observables: Vec::new(),
            storage: Storage::Expectations,
            noise: NoiseMode::Gaussian,
            positivity: PositivityPolicy::Count,
            sample_every: 1,
        }
    }

    pub fn observe(mut self, obs: Observable) -> Self {
        self.observables.push(obs);
        self
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        if self.n_traj == 0 {
            return Err(Error::InvalidParameter("n_traj must be at least 1".into()));
        }
        if self.sample_every == 0 {
            return Err(Error::InvalidParameter(
                "sample_every must be at least 1".into(),
            ));
        }
        let mut names: Vec<&str> = self.observables.iter().map(Observable::name).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(format!(
                "duplicate observable name {:?}",
                w[0]
            )));
        }
        TimeGrid::new(self.dt, self.t_final)
    }

    /// Step indices at which statistics are kept.
    pub fn sample_steps(&self, grid: &TimeGrid) -> Vec<usize> {
        let mut steps: Vec<usize> = (0..=grid.n_steps)
            .step_by(self.sample_every.max(1))
            .collect();
        if steps.last() != Some(&grid.n_steps) {
            steps.push(grid.n_steps);
        }
        steps
    }
}

/// Stochastic process driving a quantum trajectory.
#[derive(Debug, Clone)]
pub enum Unravelling {
    JumpSme,
    JumpKraus,
    /// State-vector jumps; the initial state must be pure.
    JumpSse,
    JumpFeedback(JumpFeedback),
    JumpLinear {
        beta: f64,
        scheme: LinearScheme,
    },
    HomodyneSme,
    HomodyneKraus,
    Heterodyne,
    HomodyneFeedback(HomodyneFeedback),
    HomodyneLinear {
        mu: f64,
        scheme: LinearScheme,
    },
    BathHomodyne,
    BathHeterodyne,
}

impl Unravelling {
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Unravelling::JumpLinear { .. } | Unravelling::HomodyneLinear { .. }
        )
    }

    /// Measurement outputs per step.
    pub fn n_outputs(&self) -> usize {
        match self {
            Unravelling::Heterodyne | Unravelling::BathHeterodyne => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianScenario {
    pub model: GaussianModel,
    pub initial: GaussianState,
    pub controller: Controller,
}

#[derive(Debug, Clone)]
pub enum Scenario {
    Quantum {
        model: OpenSystemModel,
        rho0: DensityMatrix,
        unravelling: Unravelling,
    },
    Gaussian(GaussianScenario),
}

impl Scenario {
    pub fn quantum(model: OpenSystemModel, rho0: DensityMatrix, unravelling: Unravelling) -> Self {
        Scenario::Quantum {
            model,
            rho0,
            unravelling,
        }
    }

    fn validate(&self, spec: &EnsembleSpec) -> Result<()> {
        match self {
            Scenario::Quantum {
                model,
                rho0,
                unravelling,
            } => {
                check_dims(model.hamiltonian(), rho0)?;
                model.monitored_channel()?;
                match unravelling {
                    Unravelling::JumpFeedback(_) if model.efficiency() != 1.0 => {
                        return Err(Error::Unsupported(format!(
                            "photodetection feedback requires unit efficiency, got {}",
                            model.efficiency()
                        )));
                    }
                    Unravelling::JumpSse => {
                        pure_state(rho0)?;
                    }
                    _ => {}
                }
                for obs in &spec.observables {
                    match obs {
                        Observable::Operator { op, .. } => check_dims(model.hamiltonian(), op)?,
                        Observable::Moment { name, .. } => {
                            return Err(Error::InvalidParameter(format!(
                                "observable {name:?} is a Gaussian moment but the scenario is a quantum trajectory"
                            )));
                        }
                    }
                }
                Ok(())
            }
            Scenario::Gaussian(g) => {
                check_state(&g.model, &g.initial)?;
                g.controller.check(&g.model)?;
                for obs in &spec.observables {
                    match obs {
                        Observable::Moment { moment, name } => {
                            if moment.max_index() >= g.model.dim() {
                                return Err(Error::InvalidParameter(format!(
                                    "observable {name:?} indexes past phase-space dimension {}",
                                    g.model.dim()
                                )));
                            }
                        }
                        Observable::Operator { name, .. } => {
                            return Err(Error::InvalidParameter(format!(
                                "observable {name:?} is an operator but the scenario is Gaussian"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Extracts `|psi>` from a pure `rho = |psi><psi|`.
pub fn pure_state(rho: &DensityMatrix) -> Result<StateVector> {
    let purity = trace_product(rho, rho).re;
    if (purity - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!(
            "state-vector trajectories need a pure initial state, purity is {purity}"
        )));
    }
    let eig = SymmetricEigen::new(rho.matrix().clone());
    let (k, _) =
        eig.eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
    StateVector::normalized(eig.eigenvectors.column(k).into_owned())
}

/// Stored state of one trajectory at one sample time.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredState {
    Density(CMatrix),
    Pure(CVector),
    Gaussian(GaussianState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub index: usize,
    /// `[observable][sample]`.
    pub expectations: Vec<Vec<f64>>,
    /// Per sample, linear trajectories only.
    pub log_weights: Option<Vec<f64>>,
    pub states: Vec<StoredState>,
    /// Per step: the click indicator or the current increments.
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityStats {
    pub checked_steps: u64,
    pub violating_steps: u64,
    pub violating_trajectories: usize,
    /// Smallest eigenvalue seen (`+inf` when nothing was checked).
    pub min_eigenvalue: f64,
}

impl Default for PositivityStats {
    fn default() -> Self {
        Self {
            checked_steps: 0,
            violating_steps: 0,
            violating_trajectories: 0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl PositivityStats {
    fn merge(&mut self, o: &PositivityStats) {
        self.checked_steps += o.checked_steps;
        self.violating_steps += o.violating_steps;
        self.violating_trajectories += o.violating_trajectories;
        self.min_eigenvalue = self.min_eigenvalue.min(o.min_eigenvalue);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    /// `(sum w)^2 / sum w^2` per sample time.
    pub ess: Vec<f64>,
    pub min_ess: f64,
    pub low_ess: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_traj: usize,
    pub times: Vec<f64>,
    pub steps: Vec<usize>,
    pub names: Vec<String>,
    /// `[observable][sample]`.
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub positivity: PositivityStats,
    pub weights: Option<WeightStats>,
}

impl EnsembleStats {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn series(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.index_of(name)
            .map(|i| (&self.mean[i][..], &self.se[i][..]))
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub stats: EnsembleStats,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, o: &Welford) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
    }

    fn se(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct WeightedSums {
    sw: f64,
    sw2: f64,
    swx: f64,
    sw2x: f64,
    sw2x2: f64,
}

impl WeightedSums {
    fn push(&mut self, w: f64, x: f64) {
        self.sw += w;
        self.sw2 += w * w;
        self.swx += w * x;
        self.sw2x += w * w * x;
        self.sw2x2 += w * w * x * x;
    }

    fn merge(&mut self, o: &WeightedSums) {
        self.sw += o.sw;
        self.sw2 += o.sw2;
        self.swx += o.swx;
        self.sw2x += o.sw2x;
        self.sw2x2 += o.sw2x2;
    }

    fn mean(&self) -> f64 {
        self.swx / self.sw
    }

    /// Delta-method error of the self-normalized estimator.
    fn se(&self) -> f64 {
        let m = self.mean();
        let v = self.sw2x2 - 2.0 * m * self.sw2x + m * m * self.sw2;
        v.max(0.0).sqrt() / self.sw
    }
}

#[derive(Debug, Clone)]
enum Accumulators {
    Plain(Vec<Welford>),
    Weighted {
        sums: Vec<WeightedSums>,
        weight: Vec<Welford>,
    },
}

impl Accumulators {
    fn new(linear: bool, n_obs: usize, n_samples: usize) -> Self {
        if linear {
            Accumulators::Weighted {
                sums: vec![WeightedSums::default(); n_obs * n_samples],
                weight: vec![Welford::default(); n_samples],
            }
        } else {
            Accumulators::Plain(vec![Welford::default(); n_obs * n_samples])
        }
    }

    fn merge(&mut self, o: &Accumulators) {
        match (self, o) {
            (Accumulators::Plain(a), Accumulators::Plain(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
            }
            (
                Accumulators::Weighted {
                    sums: a,
                    weight: wa,
                },
                Accumulators::Weighted {
                    sums: b,
                    weight: wb,
                },
            ) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
                wa.iter_mut().zip(wb).for_each(|(x, y)| x.merge(y));
            }
            _ => unreachable!("accumulator kinds are fixed per run"),
        }
    }
}

struct ChunkResult {
    acc: Accumulators,
    positivity: PositivityStats,
    records: Vec<TrajectoryRecord>,
}

enum TrajState {
    Rho(DensityMatrix),
    Psi(StateVector),
    Weighted(WeightedState),
    Gauss(GaussianState),
}

impl TrajState {
    fn eval(&self, obs: &Observable) -> f64 {
        match (self, obs) {
            (TrajState::Rho(rho), Observable::Operator { op, .. }) => trace_product(rho, op).re,
            (TrajState::Weighted(w), Observable::Operator { op, .. }) => {
                trace_product(&w.state, op).re
            }
            (TrajState::Psi(psi), Observable::Operator { op, .. }) => {
                let v = psi.amplitudes();
                v.dotc(&(op * v)).re
            }
            (TrajState::Gauss(s), Observable::Moment { moment, .. }) => moment.eval(s),
            _ => unreachable!("observables are validated against the scenario"),
        }
    }

    fn store(&self) -> StoredState {
        match self {
            TrajState::Rho(rho) => StoredState::Density(rho.matrix().clone()),
            TrajState::Weighted(w) => StoredState::Density(w.unnormalized()),
            TrajState::Psi(psi) => StoredState::Pure(psi.amplitudes().clone()),
            TrajState::Gauss(s) => StoredState::Gaussian(s.clone()),
        }
    }

    fn density(&self) -> Option<&CMatrix> {
        match self {
            TrajState::Rho(rho) => Some(rho.matrix()),
            TrajState::Weighted(w) => Some(w.state.matrix()),
            _ => None,
        }
    }
}

/// Shared per-run data.
struct Plan<'a> {
    spec: &'a EnsembleSpec,
    scenario: &'a Scenario,
    grid: TimeGrid,
    samples: Vec<usize>,
    /// Conditional covariance path for Gaussian runs.
    sigma_path: Vec<RMatrix>,
    /// Smallest physicality eigenvalue along `sigma_path`, per step.
    sigma_min_eig: Vec<f64>,
    psi0: Option<StateVector>,
}

/// Runs the ensemble on the current rayon pool.
pub fn run_ensemble(spec: &EnsembleSpec, scenario: &Scenario) -> Result<EnsembleOutput> {
    let grid = spec.grid()?;
    scenario.validate(spec)?;
    let samples = spec.sample_steps(&grid);
    if spec.storage == Storage::Full {
        let per_state = match scenario {
            Scenario::Quantum { model, .. } => model.dim() * model.dim(),
            Scenario::Gaussian(g) => g.model.dim() * (g.model.dim() + 1),
        };
        let total = spec
            .n_traj
            .saturating_mul(samples.len())
            .saturating_mul(per_state);
        if total > MAX_STORED_ENTRIES {
            return Err(Error::InvalidParameter(format!(
                "full-state storage would hold {total} entries, above the limit {MAX_STORED_ENTRIES}; \
                 store expectations only or sample less often"
            )));
        }
    }
    let (sigma_path, sigma_min_eig) = match scenario {
        Scenario::Gaussian(g) => {
            let mut path = Vec::with_capacity(grid.len());
            let mut sigma = g.initial.sigma.clone();
            path.push(sigma.clone());
            for _ in 0..grid.n_steps {
                sigma = riccati_rk4(&g.model, &sigma, grid.dt);
                path.push(sigma.clone());
            }
            let mins = if spec.positivity == PositivityPolicy::Off {
                Vec::new()
            } else {
                path.iter()
                    .map(physicality_min_eigenvalue)
                    .collect::<Result<Vec<_>>>()?
            };
            (path, mins)
        }
        Scenario::Quantum { .. } => (Vec::new(), Vec::new()),
    };
    let psi0 = match scenario {
        Scenario::Quantum {
            rho0,
            unravelling: Unravelling::JumpSse,
            ..
        } => Some(pure_state(rho0)?),
        _ => None,
    };
    let plan = Plan {
        spec,
        scenario,
        grid,
        samples,
        sigma_path,
        sigma_min_eig,
        psi0,
    };

    let n_chunks = spec.n_traj.div_ceil(CHUNK_SIZE);
    let chunks: Vec<Result<ChunkResult>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            run_chunk(
                &plan,
                c * CHUNK_SIZE,
                ((c + 1) * CHUNK_SIZE).min(spec.n_traj),
            )
        })
        .collect();

    let linear = is_linear(scenario);
    let n_obs = spec.observables.len();
    let n_samples = plan.samples.len();
    let mut acc = Accumulators::new(linear, n_obs, n_samples);
    let mut positivity = PositivityStats::default();
    let mut records = Vec::new();
    for chunk in chunks {
        let chunk = chunk?;
        acc.merge(&chunk.acc);
        positivity.merge(&chunk.positivity);
        records.extend(chunk.records);
    }

    let mut mean = vec![vec![0.0; n_samples]; n_obs];
    let mut se = vec![vec![0.0; n_samples]; n_obs];
    let mut weights = None;
    match &acc {
        Accumulators::Plain(w) => {
            for o in 0..n_obs {
                for s in 0..n_samples {
                    let a = &w[o * n_samples + s];
                    mean[o][s] = a.mean;
                    se[o][s] = a.se();
                }
            }
        }
        Accumulators::Weighted { sums, .. } => {
            for o in 0..n_obs {
                for s in 0..n_samples {
                    let a = &sums[o * n_samples + s];
                    mean[o][s] = a.mean();
                    se[o][s] = a.se();
                }
            }
        }
    }
    if let Accumulators::Weighted { weight, .. } = &acc {
        let ess: Vec<f64> = weight
            .iter()
            .map(|w| {
                // (sum w)^2 / sum w^2 from the running mean and variance
                let sum = w.mean * w.n;
                let sum_sq = w.m2 + w.n * w.mean * w.mean;
                if sum_sq > 0.0 {
                    sum * sum / sum_sq
                } else {
                    0.0
                }
            })
            .collect();
        let min_ess = ess.iter().copied().fold(f64::INFINITY, f64::min);
        weights = Some(WeightStats {
            low_ess: min_ess < LOW_ESS_FRACTION * spec.n_traj as f64,
            ess,
            min_ess,
        });
    }

    Ok(EnsembleOutput {
        stats: EnsembleStats {
            n_traj: spec.n_traj,
            times: plan.samples.iter().map(|&k| plan.grid.t(k)).collect(),
            steps: plan.samples.clone(),
            names: spec
                .observables
                .iter()
                .map(|o| o.name().to_string())
                .collect(),
            mean,
            se,
            positivity,
            weights,
        },
        records,
    })
}

/// Runs the ensemble on a dedicated pool of `threads` workers.
pub fn run_ensemble_with_threads(
    spec: &EnsembleSpec,
    scenario: &Scenario,
    threads: usize,
) -> Result<EnsembleOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_ensemble(spec, scenario))
}

fn is_linear(scenario: &Scenario) -> bool {
    matches!(scenario, Scenario::Quantum { unravelling, .. } if unravelling.is_linear())
}

fn run_chunk(plan: &Plan, start: usize, end: usize) -> Result<ChunkResult> {
    let n_obs = plan.spec.observables.len();
    let n_samples = plan.samples.len();
    let mut acc = Accumulators::new(is_linear(plan.scenario), n_obs, n_samples);
    let mut positivity = PositivityStats::default();
    let mut records = Vec::new();
    let mut values = vec![0.0; n_obs];
    for index in start..end {
        let mut violated = false;
        let mut record = (plan.spec.storage == Storage::Full).then(|| TrajectoryRecord {
            index,
            expectations: vec![Vec::with_capacity(n_samples); n_obs],
            log_weights: is_linear(plan.scenario).then(|| Vec::with_capacity(n_samples)),
            states: Vec::with_capacity(n_samples),
            outputs: Vec::with_capacity(plan.grid.n_steps),
        });
        let mut sample = |s: usize, state: &TrajState, record: &mut Option<TrajectoryRecord>| {
            for (v, obs) in values.iter_mut().zip(&plan.spec.observables) {
                *v = state.eval(obs);
            }
            match (&mut acc, state) {
                (Accumulators::Plain(w), _) => {
                    for (o, &v) in values.iter().enumerate() {
                        w[o * n_samples + s].push(v);
                    }
                }
                (Accumulators::Weighted { sums, weight }, TrajState::Weighted(ws)) => {
                    let wt = ws.weight();
                    weight[s].push(wt);
                    for (o, &v) in values.iter().enumerate() {
                        sums[o * n_samples + s].push(wt, v);
                    }
                }
                _ => unreachable!("weighted accumulators imply weighted states"),
            }
            if let Some(r) = record.as_mut() {
                for (o, &v) in values.iter().enumerate() {
                    r.expectations[o].push(v);
                }
                if let (Some(lw), TrajState::Weighted(ws)) = (r.log_weights.as_mut(), state) {
                    lw.push(ws.log_weight);
                }
                r.states.push(state.store());
            }
        };
        let mut check = |step: usize, state: &TrajState| -> Result<()> {
            if plan.spec.positivity == PositivityPolicy::Off {
                return Ok(());
            }
            let min = match state {
                TrajState::Gauss(_) => plan.sigma_min_eig[step],
                _ => match state.density() {
                    Some(rho) => min_eigenvalue(rho),
                    None => return Ok(()),
                },
            };
            positivity.checked_steps += 1;
            positivity.min_eigenvalue = positivity.min_eigenvalue.min(min);
            if min < -POSITIVITY_TOL {
                if plan.spec.positivity == PositivityPolicy::Abort {
                    return Err(Error::Physicality {
                        trajectory: index,
                        step,
                        min_eigenvalue: min,
                    });
                }
                positivity.violating_steps += 1;
                if !violated {
                    violated = true;
                    positivity.violating_trajectories += 1;
                }
            }
            Ok(())
        };

        let mut noise = NoiseStream::new(plan.spec.master_seed, index as u64, plan.spec.noise);
        let mut state = initial_state(plan);
        let mut next_sample = 0;
        if plan.samples[0] == 0 {
            sample(0, &state, &mut record);
            next_sample = 1;
        }
        let mut outputs = [0.0; 2];
        for k in 0..plan.grid.n_steps {
            noise.seek_step(k);
            let n_out = advance(plan, &mut state, k, &mut noise, &mut outputs)?;
            check(k + 1, &state)?;
            if let Some(r) = record.as_mut() {
                r.outputs.push(outputs[..n_out].to_vec());
            }
            if next_sample < n_samples && plan.samples[next_sample] == k + 1 {
                sample(next_sample, &state, &mut record);
                next_sample += 1;
            }
        }
        if let Some(r) = record {
            records.push(r);
        }
    }
    Ok(ChunkResult {
        acc,
        positivity,
        records,
    })
}

fn initial_state(plan: &Plan) -> TrajState {
    match plan.scenario {
        Scenario::Quantum {
            rho0, unravelling, ..
        } => match unravelling {
            Unravelling::JumpSse => TrajState::Psi(plan.psi0.clone().expect("prepared pure state")),
            u if u.is_linear() => TrajState::Weighted(WeightedState::new(rho0.clone())),
            _ => TrajState::Rho(rho0.clone()),
        },
        Scenario::Gaussian(g) => TrajState::Gauss(g.initial.clone()),
    }
}

/// Advances one step, writing the measurement outputs; returns their count.
fn advance(
    plan: &Plan,
    state: &mut TrajState,
    k: usize,
    noise: &mut NoiseStream,
    out: &mut [f64; 2],
) -> Result<usize> {
    let dt = plan.grid.dt;
    let click = |c: bool| if c { 1.0 } else { 0.0 };
    match (plan.scenario, &mut *state) {
        (Scenario::Gaussian(g), TrajState::Gauss(s)) => {
            let dw = RVector::from_fn(g.model.n_outputs(), |_, _| noise.wiener(dt));
            let (r, dy) = mean_step(&s.r, &plan.sigma_path[k], &g.model, dt, &dw, &g.controller);
            s.r = r;
            s.sigma = plan.sigma_path[k + 1].clone();
            let n = dy.len().min(2);
            out[..n].copy_from_slice(&dy.as_slice()[..n]);
            Ok(n)
        }
        (
            Scenario::Quantum {
                model, unravelling, ..
            },
            TrajState::Psi(psi),
        ) => {
            debug_assert!(matches!(unravelling, Unravelling::JumpSse));
            let step = jump_sse_step(psi, model, dt, noise.uniform())?;
            *psi = step.state;
            out[0] = click(step.click);
            Ok(1)
        }
        (
            Scenario::Quantum {
                model, unravelling, ..
            },
            TrajState::Weighted(w),
        ) => {
            match unravelling {
                Unravelling::JumpLinear { beta, scheme } => {
                    let p = ostensible_click_probability(model, dt, *beta)?;
                    let c = noise.uniform() < p;
                    *w = linear_jump_step(w, model, dt, c, *beta, *scheme)?;
                    out[0] = click(c);
                }
                Unravelling::HomodyneLinear { mu, scheme } => {
                    let dy = ostensible_homodyne_current(model, dt, *mu, noise.wiener(dt))?;
                    *w = linear_homodyne_step(w, model, dt, dy, *mu, *scheme)?;
                    out[0] = dy;
                }
                _ => unreachable!("weighted states only for linear unravellings"),
            }
            Ok(1)
        }
        (
            Scenario::Quantum {
                model, unravelling, ..
            },
            TrajState::Rho(rho),
        ) => {
            let n = match unravelling {
                Unravelling::JumpSme => {
                    let s = jump_sme_step(rho, model, dt, noise.uniform())?;
                    *rho = s.state;
                    out[0] = click(s.click);
                    1
                }
                Unravelling::JumpKraus => {
                    let s = jump_kraus_step(rho, model, dt, noise.uniform())?;
                    *rho = s.state;
                    out[0] = click(s.click);
                    1
                }
                Unravelling::JumpFeedback(fb) => {
                    let s = jump_feedback_step(rho, model, fb, dt, noise.uniform())?;
                    *rho = s.state;
                    out[0] = click(s.click);
                    1
                }
                Unravelling::HomodyneSme => {
                    let (r, dy) = homodyne_sme_step(rho, model, dt, noise.wiener(dt))?;
                    *rho = r;
                    out[0] = dy;
                    1
                }
                Unravelling::HomodyneKraus => {
                    let (r, dy) = homodyne_kraus_step_dw(rho, model, dt, noise.wiener(dt))?;
                    *rho = r;
                    out[0] = dy;
                    1
                }
                Unravelling::HomodyneFeedback(fb) => {
                    let (r, dy) = homodyne_feedback_step(rho, model, fb, dt, noise.wiener(dt))?;
                    *rho = r;
                    out[0] = dy;
                    1
                }
                Unravelling::BathHomodyne => {
                    let (r, dy) = generalized_bath_homodyne_step(rho, model, dt, noise.wiener(dt))?;
                    *rho = r;
                    out[0] = dy;
                    1
                }
                Unravelling::Heterodyne => {
                    let (dw1, dw2) = (noise.wiener(dt), noise.wiener(dt));
                    let (r, dy1, dy2) = heterodyne_sme_step(rho, model, dt, dw1, dw2)?;
                    *rho = r;
                    *out = [dy1, dy2];
                    2
                }
                Unravelling::BathHeterodyne => {
                    let (dw1, dw2) = (noise.wiener(dt), noise.wiener(dt));
                    let (r, dy1, dy2) = thermal_heterodyne_step(rho, model, dt, dw1, dw2)?;
                    *rho = r;
                    *out = [dy1, dy2];
                    2
                }
                Unravelling::JumpSse
                | Unravelling::JumpLinear { .. }
                | Unravelling::HomodyneLinear { .. } => {
                    unreachable!("state kind fixed by the unravelling")
                }
            };
            Ok(n)
        }
        _ => unreachable!("state kind fixed by the scenario"),
    }
}

/// Deterministic expectation values on the sample times of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    /// `[observable][sample]`.
    pub values: Vec<Vec<f64>>,
}

/// Unconditional generator whose solution the ensemble of `unravelling`
/// averages to.
pub fn averaged_generator(
    model: &OpenSystemModel,
    unravelling: &Unravelling,
) -> Result<Box<dyn Fn(&CMatrix) -> Result<CMatrix> + Send + Sync>> {
    Ok(match unravelling {
        Unravelling::JumpFeedback(fb) => {
            let mut channels: Vec<Channel> = model.channels().to_vec();
            channels[0].op = fb.effective_jump(&channels[0].op);
            let m = OpenSystemModel::new(model.hamiltonian().clone(), channels)?
                .with_efficiency(model.efficiency())?
                .with_phase(model.phase())?;
            Box::new(move |rho| me_rhs(&m, rho))
        }
        Unravelling::HomodyneFeedback(fb) => {
            let m = model.clone();
            let f = fb.operator().clone();
            Box::new(move |rho| feedback_me_rhs(rho, &m, &f))
        }
        Unravelling::BathHomodyne | Unravelling::BathHeterodyne => {
            let m = model.clone();
            Box::new(move |rho| generalized_bath_me_rhs(&m, rho))
        }
        _ => {
            let m = model.clone();
            Box::new(move |rho| me_rhs(&m, rho))
        }
    })
}

/// RK4 integration of the averaged dynamics of `scenario`, sampled like
/// [`run_ensemble`] would for `spec`.
pub fn reference_solution(spec: &EnsembleSpec, scenario: &Scenario) -> Result<ReferenceSolution> {
    let grid = spec.grid()?;
    scenario.validate(spec)?;
    let samples = spec.sample_steps(&grid);
    let n_obs = spec.observables.len();
    let mut values = vec![Vec::with_capacity(samples.len()); n_obs];
    let mut next = 0;
    let dt = grid.dt;
    match scenario {
        Scenario::Quantum {
            model,
            rho0,
            unravelling,
        } => {
            let f = averaged_generator(model, unravelling)?;
            let mut rho = rho0.matrix().clone();
            for k in 0..=grid.n_steps {
                if next < samples.len() && samples[next] == k {
                    for (o, obs) in spec.observables.iter().enumerate() {
                        if let Observable::Operator { op, .. } = obs {
                            values[o].push(trace_product(&rho, op).re);
                        }
                    }
                    next += 1;
                }
                if k == grid.n_steps {
                    break;
                }
                let k1 = f(&rho)?;
                let k2 = f(&(&rho + &k1 * real(0.5 * dt)))?;
                let k3 = f(&(&rho + &k2 * real(0.5 * dt)))?;
                let k4 = f(&(&rho + &k3 * real(dt)))?;
                rho += (k1 + (k2 + k3) * real(2.0) + k4) * real(dt / 6.0);
            }
        }
        Scenario::Gaussian(g) => {
            // mean m = E[r], second moment S = E[2 r r^T], conditional sigma
            let model = &g.model;
            let rhs = |m: &RVector, s: &RMatrix, sigma: &RMatrix| {
                let (a_cl, src) = g.controller.averaged_dynamics(model, sigma);
                let dm = &a_cl * m;
                let ds = &a_cl * s + s * a_cl.transpose() + src;
                (dm, ds, riccati_rhs(model, sigma))
            };
            let mut m = g.initial.r.clone();
            let mut s = &m * m.transpose() * 2.0;
            let mut sigma = g.initial.sigma.clone();
            for k in 0..=grid.n_steps {
                if next < samples.len() && samples[next] == k {
                    let r_view = GaussianState {
                        r: m.clone(),
                        sigma: sigma.clone(),
                    };
                    for (o, obs) in spec.observables.iter().enumerate() {
                        if let Observable::Moment { moment, .. } = obs {
                            let v = match *moment {
                                Moment::Excess(i, j) => s[(i, j)],
                                Moment::Total(i, j) => sigma[(i, j)] + s[(i, j)],
                                other => other.eval(&r_view),
                            };
                            values[o].push(v);
                        }
                    }
                    next += 1;
                }
                if k == grid.n_steps {
                    break;
                }
                let (m1, s1, g1) = rhs(&m, &s, &sigma);
                let (m2, s2, g2) = rhs(
                    &(&m + &m1 * (0.5 * dt)),
                    &(&s + &s1 * (0.5 * dt)),
                    &(&sigma + &g1 * (0.5 * dt)),
                );
                let (m3, s3, g3) = rhs(
                    &(&m + &m2 * (0.5 * dt)),
                    &(&s + &s2 * (0.5 * dt)),
                    &(&sigma + &g2 * (0.5 * dt)),
                );
                let (m4, s4, g4) = rhs(&(&m + &m3 * dt), &(&s + &s3 * dt), &(&sigma + &g3 * dt));
                m += (m1 + (m2 + m3) * 2.0 + m4) * (dt / 6.0);
                s += (s1 + (s2 + s3) * 2.0 + s4) * (dt / 6.0);
                sigma += (g1 + (g2 + g3) * 2.0 + g4) * (dt / 6.0);
            }
        }
    }
    Ok(ReferenceSolution {
        times: samples.iter().map(|&k| grid.t(k)).collect(),
        names: spec
            .observables
            .iter()
            .map(|o| o.name().to_string())
            .collect(),
        values,
    })
}

/// Default pass threshold on `max |z|`.
pub const Z_THRESHOLD: f64 = 4.0;

/// Default absolute allowance (relative for `|reference| > 1`) added in
/// quadrature to the standard error. It keeps deterministic observables
/// from failing on rounding-level differences; pass a larger value to
/// absorb the known O(dt) bias of first-order steppers.
pub const DEFAULT_ALLOWANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub threshold: f64,
    pub allowance: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            threshold: Z_THRESHOLD,
            allowance: DEFAULT_ALLOWANCE,
        }
    }
}

impl CompareOptions {
    pub fn with_allowance(allowance: f64) -> Self {
        Self {
            allowance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableComparison {
    pub name: String,
    pub z: Vec<f64>,
    pub max_abs_z: f64,
    pub worst_index: usize,
    pub worst_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub observables: Vec<ObservableComparison>,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn get(&self, name: &str) -> Option<&ObservableComparison> {
        self.observables.iter().find(|o| o.name == name)
    }
}

/// Per-time z-scores `(mean - reference) / sqrt(SE^2 + a^2)` for every
/// observable of `stats`, with `a` the allowance of `options`.
pub fn compare_to_me(
    stats: &EnsembleStats,
    reference: &ReferenceSolution,
    options: &CompareOptions,
) -> Result<ComparisonReport> {
    let CompareOptions {
        threshold,
        allowance,
    } = *options;
    if stats.times.len() != reference.times.len() {
        return Err(Error::GridMismatch(format!(
            "ensemble has {} sample times, reference has {}",
            stats.times.len(),
            reference.times.len()
        )));
    }
    for (k, (a, b)) in stats.times.iter().zip(&reference.times).enumerate() {
        if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(Error::GridMismatch(format!(
                "sample {k}: ensemble time {a} differs from reference time {b}"
            )));
        }
    }
    let mut observables = Vec::new();
    for (o, name) in stats.names.iter().enumerate() {
        let Some(r) = reference.names.iter().position(|n| n == name) else {
            return Err(Error::GridMismatch(format!(
                "observable {name:?} missing from reference"
            )));
        };
        let refs = &reference.values[r];
        if refs.len() != stats.times.len() {
            return Err(Error::GridMismatch(format!(
                "reference series {name:?} has {} values for {} times",
                refs.len(),
                stats.times.len()
            )));
        }
        let z: Vec<f64> = stats.mean[o]
            .iter()
            .zip(&stats.se[o])
            .zip(refs)
            .map(|((m, se), r)| {
                let a = allowance * r.abs().max(1.0);
                (m - r) / se.hypot(a)
            })
            .collect();
        let (worst_index, max_abs_z) = z.iter().enumerate().fold((0, 0.0f64), |best, (i, v)| {
            if v.abs() > best.1 {
                (i, v.abs())
            } else {
                best
            }
        });
        observables.push(ObservableComparison {
            name: name.clone(),
            worst_time: stats.times[worst_index],
            z,
            max_abs_z,
            worst_index,
        });
    }
    let max_abs_z = observables.iter().map(|o| o.max_abs_z).fold(0.0, f64::max);
    Ok(ComparisonReport {
        observables,
        max_abs_z,
        threshold,
        pass: max_abs_z <= threshold,
    })
}
