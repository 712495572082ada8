//! Federated training loops and their per-round diagnostics.
//!
//! Every algorithm shares one local phase: all `N` workers run their local
//! trajectories from the server model (non-sampled workers included, as
//! virtual trajectories used only for diagnostics). Workers run in parallel;
//! each draws noise from its own `(worker, round, iteration)` lane, so the
//! result does not depend on scheduling.

use std::io::Write;
use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{fixed_order_mean, fixed_order_mean_ref, Lane, ModelVector, Purpose, RngStream};
use crate::problems::{FederatedObjective, NoiseModel};

/// A run stops once the global objective exceeds this value.
pub const DIVERGENCE_OBJECTIVE: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    FedavgMomentum,
    Fedadam,
    MinibatchSgd,
    CentralizedSgd,
}

fn default_eta() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_tau() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    1
}

/// Configuration keys use the optimization symbols: `gamma`, `eta`, `I`, `R`,
/// `M`, `beta`, `beta1`, `beta2`, `tau`, `s`, `sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Local learning rate.
    pub gamma: f64,
    /// Global (server) learning rate.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(rename = "I")]
    pub local_iters: usize,
    #[serde(rename = "R")]
    pub rounds: usize,
    /// Workers sampled per round, with replacement; absent means all.
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub participants: Option<usize>,
    #[serde(rename = "beta", default)]
    pub momentum_beta: f64,
    #[serde(rename = "beta1", default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(rename = "beta2", default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(rename = "tau", default = "default_tau")]
    pub adam_tau: f64,
    /// Mini-batch size of every stochastic gradient.
    #[serde(rename = "s", default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(rename = "seed", default)]
    pub master_seed: u64,
    #[serde(rename = "full_gradient", default)]
    pub full_gradient_mode: bool,
}

impl RunConfig {
    pub fn fedavg(gamma: f64, eta: f64, local_iters: usize, rounds: usize) -> Self {
        RunConfig {
            algorithm: Algorithm::Fedavg,
            gamma,
            eta,
            local_iters,
            rounds,
            participants: None,
            momentum_beta: 0.0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_tau: default_tau(),
            batch_size: 1,
            sigma: 0.0,
            master_seed: 0,
            full_gradient_mode: false,
        }
    }

    pub fn with_algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    /// Local steps actually taken per round.
    pub fn steps_per_round(&self) -> usize {
        match self.algorithm {
            Algorithm::MinibatchSgd => 1,
            _ => self.local_iters,
        }
    }

    /// Standard deviation of one gradient sample after mini-batching.
    pub fn effective_sigma(&self) -> f64 {
        if self.full_gradient_mode {
            0.0
        } else {
            self.sigma / (self.batch_size as f64).sqrt()
        }
    }

    pub fn validate(&self, n_workers: usize) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and non-negative, got {v}")))
            }
        };
        positive("gamma", self.gamma)?;
        positive("eta", self.eta)?;
        positive("sigma", self.sigma)?;
        if self.local_iters == 0 {
            return Err(Error::config("I", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("s", "must be at least 1"));
        }
        if let Some(m) = self.participants {
            if m == 0 || m > n_workers {
                return Err(Error::config("M", format!("must lie in 1..={n_workers}, got {m}")));
            }
        }
        for (key, v) in [
            ("beta", self.momentum_beta),
            ("beta1", self.adam_beta1),
            ("beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if self.algorithm == Algorithm::Fedadam && !(self.adam_tau > 0.0) {
            return Err(Error::config("tau", "FedAdam needs tau > 0"));
        }
        if self.algorithm == Algorithm::FedavgMomentum
            && self.participants.is_some_and(|m| m < n_workers)
        {
            return Err(Error::config("M", "momentum runs use full participation"));
        }
        Ok(())
    }

    fn sampled(&self, n_workers: usize) -> Option<usize> {
        self.participants.filter(|&m| m < n_workers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub x_bar: ModelVector,
    pub adam_m: ModelVector,
    pub adam_v: ModelVector,
    /// Averaged momentum buffer of the momentum variant.
    pub momentum: ModelVector,
    pub round: usize,
}

impl ServerState {
    pub fn initial(x0: ModelVector) -> Self {
        let d = x0.dim();
        ServerState {
            x_bar: x0,
            adam_m: ModelVector::zeros(d),
            adam_v: ModelVector::zeros(d),
            momentum: ModelVector::zeros(d),
            round: 0,
        }
    }
}

/// Observables of one round, measured on the model the round started from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// `f(x̄ʳ)`.
    pub f_bar: f64,
    /// `‖∇f(x̄ʳ)‖²`.
    pub grad_norm_sq: f64,
    /// `Σ_k (1/N) Σ_i ‖x_i^{r,k} − x̂^{r,k}‖²`.
    pub divergence_sum: f64,
    /// `‖x̂^{r,k} − x̄ʳ‖²` for each local step `k`.
    pub avg_drift: Vec<f64>,
    /// `max_i ‖∇F_i(x̄ʳ) − ∇f(x̄ʳ)‖`.
    pub zeta_at_xbar: f64,
    /// The same divergence maximised over every local iterate and virtual
    /// average of the round.
    pub zeta_sup_local: f64,
    /// Largest over `k` of `(1/N) Σ_j ‖(1/N) Σ_i ∇F_i(x_i^{r,k}) − ∇F_j(x_j^{r,k})‖²`.
    pub deviation_check: f64,
}

impl RoundTrace {
    fn is_finite(&self) -> bool {
        [
            self.f_bar,
            self.grad_norm_sq,
            self.divergence_sum,
            self.zeta_at_xbar,
            self.zeta_sup_local,
            self.deviation_check,
        ]
        .iter()
        .chain(&self.avg_drift)
        .all(|v| v.is_finite())
    }
}

/// Per-step quantities behind a [`RoundTrace`], kept for the lemma checks.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiag {
    /// `(1/N) Σ_i ‖x_i^{r,k} − x̂^{r,k}‖²`.
    pub divergence: f64,
    /// Local gradient deviation at step `k`.
    pub deviation: f64,
    /// Largest of `max_i ‖∇F_i(x) − ∇f(x)‖` over this step's points.
    pub zeta: f64,
    /// `‖x̂^{r,k} − x̄ʳ‖²`.
    pub drift: f64,
    /// `‖∇f(x̂^{r,k})‖²`.
    pub grad_hat_sq: f64,
}

#[derive(Clone, Debug)]
pub struct RoundDetail {
    pub steps: Vec<StepDiag>,
    /// `x̂^{r,k}` for `k = 0..=I`.
    pub virtual_models: Vec<ModelVector>,
    /// `(1/N) Σ_i g_i(x_i^{r,k})` for `k < I`.
    pub mean_sampled_grads: Vec<ModelVector>,
    /// `x_i^{r,I}` for every worker.
    pub local_final: Vec<ModelVector>,
    /// Workers whose updates the server used, sorted; duplicates kept.
    pub participants: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub state: ServerState,
    pub trace: RoundTrace,
    pub detail: RoundDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub traces: Vec<RoundTrace>,
    pub final_state: ServerState,
}

/// `m` uniform draws from `0..n`, with replacement, in draw order.
pub fn sample_participants(stream: &mut RngStream, n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|_| stream.index(n)).collect()
}

struct WorkerPath {
    iterates: Vec<ModelVector>,
    exact: Vec<ModelVector>,
    sampled: Vec<ModelVector>,
    zeta: Vec<f64>,
    momentum: Option<ModelVector>,
}

fn worker_path<O: FederatedObjective + ?Sized>(
    obj: &O,
    start: &ModelVector,
    momentum: Option<(&ModelVector, f64)>,
    cfg: &RunConfig,
    steps: usize,
    worker: usize,
    round: usize,
) -> WorkerPath {
    let noise = NoiseModel {
        sigma: cfg.sigma,
    };
    let mut x = start.clone();
    let mut u = momentum.map(|(u0, _)| u0.clone());
    let mut path = WorkerPath {
        iterates: Vec::with_capacity(steps + 1),
        exact: Vec::with_capacity(steps),
        sampled: Vec::with_capacity(steps),
        zeta: Vec::with_capacity(steps),
        momentum: None,
    };
    for k in 0..steps {
        let (exact, g) = if cfg.full_gradient_mode {
            let e = obj.local_gradient(worker, &x);
            (e.clone(), e)
        } else {
            let mut stream = RngStream::new(
                cfg.master_seed,
                Lane::new(Purpose::GradientNoise, worker, round, k),
            );
            obj.exact_and_sample(worker, &x, &noise, cfg.batch_size, &mut stream)
        };
        path.zeta.push(obj.zeta_at(&x));
        path.iterates.push(x.clone());
        match (&mut u, momentum) {
            (Some(u), Some((_, beta))) => {
                // u ← βu + g; x ← x − γu
                for (ui, gi) in u.as_mut_slice().iter_mut().zip(g.iter()) {
                    *ui = beta * *ui + gi;
                }
                x.sub_scaled(cfg.gamma, u);
            }
            _ => x.sub_scaled(cfg.gamma, &g),
        }
        path.exact.push(exact);
        path.sampled.push(g);
    }
    path.iterates.push(x);
    path.momentum = u;
    path
}

struct LocalPhase {
    trace: RoundTrace,
    detail: RoundDetail,
    momenta: Vec<ModelVector>,
}

fn local_phase<O: FederatedObjective + ?Sized>(
    obj: &O,
    state: &ServerState,
    cfg: &RunConfig,
    with_momentum: bool,
) -> std::result::Result<LocalPhase, ()> {
    let n = obj.n_workers();
    let steps = cfg.steps_per_round();
    let r = state.round;
    let momentum = with_momentum.then_some((&state.momentum, cfg.momentum_beta));
    let paths: Vec<WorkerPath> = (0..n)
        .into_par_iter()
        .map(|j| worker_path(obj, &state.x_bar, momentum, cfg, steps, j, r))
        .collect();

    let mut diag = Vec::with_capacity(steps);
    let mut virtual_models = Vec::with_capacity(steps + 1);
    let mut mean_sampled = Vec::with_capacity(steps);
    for k in 0..steps {
        let xs: Vec<&ModelVector> = paths.iter().map(|p| &p.iterates[k]).collect();
        let x_hat = fixed_order_mean_ref(&xs).map_err(|_| ())?;
        let divergence = xs.iter().map(|x| x.dist_sq(&x_hat)).sum::<f64>() / n as f64;
        let exact: Vec<&ModelVector> = paths.iter().map(|p| &p.exact[k]).collect();
        let g_bar = fixed_order_mean_ref(&exact).map_err(|_| ())?;
        let deviation = exact.iter().map(|g| g.dist_sq(&g_bar)).sum::<f64>() / n as f64;
        let zeta = paths
            .iter()
            .map(|p| p.zeta[k])
            .fold(obj.zeta_at(&x_hat), f64::max);
        let sampled: Vec<&ModelVector> = paths.iter().map(|p| &p.sampled[k]).collect();
        mean_sampled.push(fixed_order_mean_ref(&sampled).map_err(|_| ())?);
        diag.push(StepDiag {
            divergence,
            deviation,
            zeta,
            drift: x_hat.dist_sq(&state.x_bar),
            grad_hat_sq: obj.global_gradient(&x_hat).norm_sq(),
        });
        virtual_models.push(x_hat);
    }
    let finals: Vec<ModelVector> = paths.iter().map(|p| p.iterates[steps].clone()).collect();
    virtual_models.push(fixed_order_mean(&finals).map_err(|_| ())?);

    let g = obj.global_gradient(&state.x_bar);
    let trace = RoundTrace {
        round: r,
        f_bar: obj.global_objective(&state.x_bar),
        grad_norm_sq: g.norm_sq(),
        divergence_sum: diag.iter().map(|s| s.divergence).sum(),
        avg_drift: diag.iter().map(|s| s.drift).collect(),
        zeta_at_xbar: obj.zeta_at(&state.x_bar),
        zeta_sup_local: diag.iter().map(|s| s.zeta).fold(0.0, f64::max),
        deviation_check: diag.iter().map(|s| s.deviation).fold(0.0, f64::max),
    };
    if !trace.is_finite() || finals.iter().any(|x| !x.is_finite()) {
        return Err(());
    }
    let momenta = paths.iter().filter_map(|p| p.momentum.clone()).collect();
    Ok(LocalPhase {
        trace,
        detail: RoundDetail {
            steps: diag,
            virtual_models,
            mean_sampled_grads: mean_sampled,
            local_final: finals,
            participants: Vec::new(),
        },
        momenta,
    })
}

fn diverged(state: &ServerState) -> Error {
    Error::Diverged {
        round: state.round,
        partial: Box::new(RunOutput {
            traces: Vec::new(),
            final_state: state.clone(),
        }),
    }
}

fn participants(cfg: &RunConfig, n: usize, round: usize) -> Vec<usize> {
    match cfg.sampled(n) {
        None => (0..n).collect(),
        Some(m) => {
            let mut s = RngStream::new(cfg.master_seed, Lane::new(Purpose::Participants, 0, round, 0));
            let mut ids = sample_participants(&mut s, n, m);
            ids.sort_unstable();
            ids
        }
    }
}

/// Mean of `Δ_i = x̄ʳ − x_i^{r,I}` over the given workers.
fn mean_update(x_bar: &ModelVector, finals: &[ModelVector], ids: &[usize]) -> ModelVector {
    let deltas: Vec<ModelVector> = ids.iter().map(|&i| x_bar.sub(&finals[i])).collect();
    fixed_order_mean(&deltas).expect("at least one participant")
}

fn check_state<O: FederatedObjective + ?Sized>(obj: &O, state: &ServerState) -> bool {
    state.x_bar.is_finite() && obj.global_objective(&state.x_bar) <= DIVERGENCE_OBJECTIVE
}

/// One round of FedAvg with two-sided learning rates.
pub fn fedavg_round<O: FederatedObjective + ?Sized>(
    state: &ServerState,
    obj: &O,
    cfg: &RunConfig,
) -> Result<RoundOutput> {
    let mut phase = local_phase(obj, state, cfg, false).map_err(|_| diverged(state))?;
    let ids = participants(cfg, obj.n_workers(), state.round);
    let delta = mean_update(&state.x_bar, &phase.detail.local_final, &ids);
    let mut next = state.clone();
    next.x_bar.sub_scaled(cfg.eta, &delta);
    next.round += 1;
    phase.detail.participants = ids;
    Ok(RoundOutput {
        state: next,
        trace: phase.trace,
        detail: phase.detail,
    })
}

/// One block of `I` local momentum-SGD steps followed by averaging of both
/// the models and the momentum buffers.
pub fn fedavg_momentum_round<O: FederatedObjective + ?Sized>(
    state: &ServerState,
    obj: &O,
    cfg: &RunConfig,
) -> Result<RoundOutput> {
    if cfg.sampled(obj.n_workers()).is_some() {
        return Err(Error::config("M", "momentum runs use full participation"));
    }
    let mut phase = local_phase(obj, state, cfg, true).map_err(|_| diverged(state))?;
    let ids: Vec<usize> = (0..obj.n_workers()).collect();
    // Written as x̄ − 1·mean(Δ) so that β = 0 reproduces FedAvg at η = 1 bit for bit.
    let delta = mean_update(&state.x_bar, &phase.detail.local_final, &ids);
    let mut next = state.clone();
    next.x_bar.sub_scaled(1.0, &delta);
    next.momentum = fixed_order_mean(&phase.momenta).expect("one momentum per worker");
    next.round += 1;
    phase.detail.participants = ids;
    Ok(RoundOutput {
        state: next,
        trace: phase.trace,
        detail: phase.detail,
    })
}

/// FedAvg local phase with an Adam server step on the averaged update `Δ_r`.
pub fn fedadam_round<O: FederatedObjective + ?Sized>(
    state: &ServerState,
    obj: &O,
    cfg: &RunConfig,
) -> Result<RoundOutput> {
    let mut phase = local_phase(obj, state, cfg, false).map_err(|_| diverged(state))?;
    let ids = participants(cfg, obj.n_workers(), state.round);
    let delta = mean_update(&state.x_bar, &phase.detail.local_final, &ids);
    let mut next = state.clone();
    adam_server_step(&mut next, &delta, cfg);
    next.round += 1;
    phase.detail.participants = ids;
    Ok(RoundOutput {
        state: next,
        trace: phase.trace,
        detail: phase.detail,
    })
}

/// `m ← β₁m + (1−β₁)Δ`, `v ← β₂v + (1−β₂)Δ²`, `x̄ ← x̄ − η m/(√v + τ)`.
pub fn adam_server_step(state: &mut ServerState, delta: &ModelVector, cfg: &RunConfig) {
    let (b1, b2, tau, eta) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_tau, cfg.eta);
    let m = state.adam_m.as_mut_slice();
    let v = state.adam_v.as_mut_slice();
    let x = state.x_bar.as_mut_slice();
    for e in 0..delta.dim() {
        let d = delta[e];
        m[e] = b1 * m[e] + (1.0 - b1) * d;
        v[e] = b2 * v[e] + (1.0 - b2) * d * d;
        x[e] -= eta * m[e] / (v[e].sqrt() + tau);
    }
}

/// Each worker averages `s` gradient samples at `x̄ʳ`; the server steps
/// with rate `γη` along the average.
///
/// Runs through the FedAvg pipeline with a single local step, which is the
/// same update.
pub fn minibatch_sgd_round<O: FederatedObjective + ?Sized>(
    state: &ServerState,
    obj: &O,
    cfg: &RunConfig,
) -> Result<RoundOutput> {
    let mut one = cfg.clone();
    one.algorithm = Algorithm::MinibatchSgd;
    fedavg_round(state, obj, &one)
}

/// `x − γ(∇f(x) + n)` with `E‖n‖² = σ²/N`, the noise of an average of `N`
/// independent worker samples.
pub fn centralized_sgd_step<O: FederatedObjective + ?Sized>(
    x: &ModelVector,
    obj: &O,
    gamma: f64,
    noise: &NoiseModel,
    stream: &mut RngStream,
) -> ModelVector {
    let mut g = obj.global_gradient(x);
    let avg = NoiseModel {
        sigma: noise.sigma / (obj.n_workers() as f64).sqrt(),
    };
    g.add_assign(&avg.sample_mean(x.dim(), 1, stream));
    let mut out = x.clone();
    out.sub_scaled(gamma, &g);
    out
}

/// Worker id used for the lanes of centralized noise.
const CENTRAL_LANE: usize = usize::MAX;

/// `I` centralized steps from `x̄ʳ`; the trace has no model divergence.
pub fn centralized_round<O: FederatedObjective + ?Sized>(
    state: &ServerState,
    obj: &O,
    cfg: &RunConfig,
) -> Result<RoundOutput> {
    let noise = NoiseModel {
        sigma: if cfg.full_gradient_mode { 0.0 } else { cfg.sigma },
    };
    let mut x = state.x_bar.clone();
    let mut steps = Vec::with_capacity(cfg.local_iters);
    let mut virtual_models = Vec::with_capacity(cfg.local_iters + 1);
    let mut grads = Vec::with_capacity(cfg.local_iters);
    for k in 0..cfg.local_iters {
        let g = obj.global_gradient(&x);
        steps.push(StepDiag {
            divergence: 0.0,
            deviation: 0.0,
            zeta: obj.zeta_at(&x),
            drift: x.dist_sq(&state.x_bar),
            grad_hat_sq: g.norm_sq(),
        });
        let mut s = RngStream::new(
            cfg.master_seed,
            Lane::new(Purpose::GradientNoise, CENTRAL_LANE, state.round, k),
        );
        let nx = centralized_sgd_step(&x, obj, cfg.gamma, &noise, &mut s);
        grads.push(x.sub(&nx).scale(1.0 / cfg.gamma));
        virtual_models.push(std::mem::replace(&mut x, nx));
    }
    virtual_models.push(x.clone());
    let trace = RoundTrace {
        round: state.round,
        f_bar: obj.global_objective(&state.x_bar),
        grad_norm_sq: obj.global_gradient(&state.x_bar).norm_sq(),
        divergence_sum: 0.0,
        avg_drift: steps.iter().map(|s| s.drift).collect(),
        zeta_at_xbar: obj.zeta_at(&state.x_bar),
        zeta_sup_local: steps.iter().map(|s| s.zeta).fold(0.0, f64::max),
        deviation_check: 0.0,
    };
    if !trace.is_finite() || !x.is_finite() {
        return Err(diverged(state));
    }
    let mut next = state.clone();
    next.x_bar = x.clone();
    next.round += 1;
    Ok(RoundOutput {
        state: next,
        trace,
        detail: RoundDetail {
            steps,
            virtual_models,
            mean_sampled_grads: grads,
            local_final: vec![x],
            participants: Vec::new(),
        },
    })
}

/// Dispatches one round on `cfg.algorithm`.
pub fn round<O: FederatedObjective + ?Sized>(
    state: &ServerState,
    obj: &O,
    cfg: &RunConfig,
) -> Result<RoundOutput> {
    match cfg.algorithm {
        Algorithm::Fedavg => fedavg_round(state, obj, cfg),
        Algorithm::FedavgMomentum => fedavg_momentum_round(state, obj, cfg),
        Algorithm::Fedadam => fedadam_round(state, obj, cfg),
        Algorithm::MinibatchSgd => minibatch_sgd_round(state, obj, cfg),
        Algorithm::CentralizedSgd => centralized_round(state, obj, cfg),
    }
}

/// Runs `cfg.rounds` rounds from the origin.
pub fn run<O: FederatedObjective + ?Sized>(obj: &O, cfg: &RunConfig) -> Result<RunOutput> {
    let init = ServerState::initial(ModelVector::zeros(obj.dim()));
    run_with(obj, cfg, init, |_, _, _| ControlFlow::Continue(()))
}

/// Runs from `init`, calling `observe` after every round with its trace,
/// detail and the resulting server state. Breaking stops the run early.
pub fn run_with<O, F>(obj: &O, cfg: &RunConfig, init: ServerState, mut observe: F) -> Result<RunOutput>
where
    O: FederatedObjective + ?Sized,
    F: FnMut(&RoundTrace, &RoundDetail, &ServerState) -> ControlFlow<()>,
{
    cfg.validate(obj.n_workers())?;
    if init.x_bar.dim() != obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.dim(),
            got: init.x_bar.dim(),
        });
    }
    let mut traces = Vec::with_capacity(cfg.rounds);
    let mut state = init;
    for _ in 0..cfg.rounds {
        let out = match round(&state, obj, cfg) {
            Ok(out) => out,
            Err(Error::Diverged { round, .. }) => {
                return Err(Error::Diverged {
                    round,
                    partial: Box::new(RunOutput {
                        traces,
                        final_state: state,
                    }),
                })
            }
            Err(e) => return Err(e),
        };
        traces.push(out.trace.clone());
        if !check_state(obj, &out.state) {
            return Err(Error::Diverged {
                round: out.state.round,
                partial: Box::new(RunOutput {
                    traces,
                    final_state: state,
                }),
            });
        }
        let flow = observe(&out.trace, &out.detail, &out.state);
        state = out.state;
        if flow.is_break() {
            break;
        }
    }
    Ok(RunOutput {
        traces,
        final_state: state,
    })
}

/// Header of the trace CSV; `avg_drift` holds its per-step values joined by `;`.
pub const TRACE_COLUMNS: [&str; 8] = [
    "round",
    "f_bar",
    "grad_norm_sq",
    "divergence_sum",
    "avg_drift",
    "zeta_at_xbar",
    "zeta_sup_local",
    "deviation_check",
];

/// Seventeen significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trace_csv<W: Write>(traces: &[RoundTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for t in traces {
        let drift: Vec<String> = t.avg_drift.iter().map(|&v| fmt_f64(v)).collect();
        w.write_record([
            t.round.to_string(),
            fmt_f64(t.f_bar),
            fmt_f64(t.grad_norm_sq),
            fmt_f64(t.divergence_sum),
            drift.join(";"),
            fmt_f64(t.zeta_at_xbar),
            fmt_f64(t.zeta_sup_local),
            fmt_f64(t.deviation_check),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_csv_string(traces: &[RoundTrace]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace_csv(traces, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ASCII"))
}
