//! Experiment plumbing: configuration files, the round-count table, bound
//! audits, lemma sweeps, estimator validation and the heterogeneity-spread
//! demonstration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{fmt_f64, run_with, Algorithm, RoundDetail, RoundTrace, RunConfig, RunOutput, ServerState};
use crate::bounds::{self, BoundInputs, BoundReport, Lemma, TheoremId};
use crate::error::{Error, Result};
use crate::heterogeneity::{
    closed_form_report, estimate_lg, estimate_lh, estimate_ltilde, estimate_sigma, kappa, logistic_reference_report,
    quad_lg_closed, quad_lh_closed, quad_ltilde_closed, HeterogeneityReport, Method, Snapshot,
};
use crate::numkit::{fixed_order_mean, min_eigenvalue, Lane, ModelVector, Purpose, RngStream};
use crate::problems::{
    default_u_scale, gen_common_hessian_with, gen_hetero_quadratic, gen_logistic, FederatedObjective, LogisticFed,
    NoiseModel, Provenance, QuadraticFed,
};

/// Problem generator and its parameters, tagged by `generator`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    CommonHessian {
        d: usize,
        n: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        u_scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<f64>,
    },
    HeteroQuadratic {
        d: usize,
        n: usize,
        delta: f64,
        #[serde(default)]
        psd_floor: f64,
        seed: u64,
    },
    Logistic {
        d: usize,
        n: usize,
        skew: f64,
        samples_per_worker: usize,
        seed: u64,
    },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        let p = match *self {
            ProblemSpec::CommonHessian {
                d,
                n,
                seed,
                u_scale,
                spread,
            } => Problem::Quadratic(gen_common_hessian_with(
                d,
                n,
                seed,
                u_scale.unwrap_or_else(|| default_u_scale(d)),
                spread.unwrap_or(1.0),
            )?),
            ProblemSpec::HeteroQuadratic {
                d,
                n,
                delta,
                psd_floor,
                seed,
            } => Problem::Quadratic(gen_hetero_quadratic(d, n, delta, psd_floor, seed)?),
            ProblemSpec::Logistic {
                d,
                n,
                skew,
                samples_per_worker,
                seed,
            } => Problem::Logistic(gen_logistic(d, n, skew, samples_per_worker, seed)?),
        };
        Ok(p)
    }
}

/// A generated federated instance.
#[derive(Clone, Debug)]
pub enum Problem {
    Quadratic(QuadraticFed),
    Logistic(LogisticFed),
}

impl Problem {
    pub fn objective(&self) -> &dyn FederatedObjective {
        match self {
            Problem::Quadratic(q) => q,
            Problem::Logistic(l) => l,
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticFed> {
        match self {
            Problem::Quadratic(q) => Some(q),
            Problem::Logistic(_) => None,
        }
    }

    pub fn provenance(&self) -> &Provenance {
        match self {
            Problem::Quadratic(q) => q.provenance(),
            Problem::Logistic(l) => &l.provenance,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            Problem::Quadratic(q) => q.to_json(),
            Problem::Logistic(l) => Ok(serde_json::to_string(l)?),
        }
    }
}

/// A labelled run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// The `[bounds]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub theorem: TheoremId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_bound: Option<f64>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub adam_k: Option<f64>,
    /// Explicit inputs; when present the problem is not consulted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<BoundInputs>,
}

/// A configuration file: a problem, a base run, optional variants, seeds,
/// a target and bound settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub id: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Objective value counted as reached in rounds-to-target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    pub problem: ProblemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// First backtick-quoted word of a deserializer message, which is how serde
/// names missing and unknown fields.
fn offending_key(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(offending_key(&msg).unwrap_or_else(|| "config".into()), msg)
        })?;
        if spec.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// The `[run]` table, or a config error naming it.
    pub fn run_config(&self) -> Result<&RunConfig> {
        self.run.as_ref().ok_or_else(|| Error::config("run", "this command needs a [run] table"))
    }

    pub fn build_problem(&self) -> Result<Problem> {
        self.problem.build().map_err(|e| match e {
            Error::InvalidInput(m) => Error::config("problem", m),
            e => e,
        })
    }

    pub fn hash(&self) -> String {
        spec_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the JSON encoding of `v`.
pub fn spec_hash<T: Serialize + ?Sized>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config types serialize");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `f` on a pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Written next to every trace so it can be regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub problem: Provenance,
    pub rounds_completed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
}

/// Smallest `r` with `f_bar ≤ target`.
pub fn rounds_to_target(traces: &[RoundTrace], target: f64) -> Option<usize> {
    traces.iter().find(|t| t.f_bar <= target).map(|t| t.round)
}

/// Runs until `f(x̄ʳ) ≤ target` or `cfg.rounds` rounds, returning the first
/// such `r`. Divergence counts as not reaching the target.
pub fn run_to_target(obj: &dyn FederatedObjective, cfg: &RunConfig, target: f64) -> Result<Option<usize>> {
    let init = ServerState::initial(ModelVector::zeros(obj.dim()));
    if obj.global_objective(&init.x_bar) <= target {
        return Ok(Some(0));
    }
    let mut hit = None;
    let res = run_with(obj, cfg, init, |_, _, s| {
        if obj.global_objective(&s.x_bar) <= target {
            hit = Some(s.round);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    match res {
        Ok(_) => Ok(hit),
        Err(Error::Diverged { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One configuration of the round-count table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Variant {
    pub label: String,
    pub eta: f64,
    pub gamma: f64,
    pub local_iters: usize,
    pub batch: usize,
    /// Published mean rounds, kept for comparison.
    pub reference: f64,
}

/// The nine configurations: four `(η, γ)` pairs with `γη = 0.005` at
/// `I = 10`, then five `(I, s)` pairs at `η = 1`, `γ = 0.005`.
pub fn table2_variants() -> Vec<Table2Variant> {
    let mut v = Vec::new();
    for (eta, gamma) in [(1.0, 0.005), (2.0, 0.0025), (5.0, 0.001), (10.0, 0.0005)] {
        v.push(Table2Variant {
            label: format!("eta={eta},gamma={gamma}"),
            eta,
            gamma,
            local_iters: 10,
            batch: 1,
            reference: 86.0,
        });
    }
    for (i, s, reference) in [(1, 1, 927.0), (1, 5, 927.0), (1, 10, 925.0), (5, 1, 187.0), (10, 1, 95.0)] {
        v.push(Table2Variant {
            label: format!("I={i},s={s}"),
            eta: 1.0,
            gamma: 0.005,
            local_iters: i,
            batch: s,
            reference,
        });
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Options {
    pub d: usize,
    pub n: usize,
    /// Per-sample noise variance `σ²`.
    pub sigma_sq: f64,
    /// Instance seed.
    pub instance_seed: u64,
    /// Required `f(x̄) − f*`.
    pub target_gap: f64,
    pub max_rounds: usize,
}

impl Default for Table2Options {
    fn default() -> Self {
        Table2Options {
            d: 100,
            n: 10,
            sigma_sq: 0.01,
            instance_seed: 1,
            target_gap: 0.8,
            max_rounds: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Table2Variant,
    pub seeds: Vec<u64>,
    /// Rounds to target per seed; `None` marks a failure.
    pub rounds: Vec<Option<usize>>,
    /// Over successful seeds only.
    pub mean: Option<f64>,
    /// Sample standard deviation over successful seeds.
    pub std: Option<f64>,
    pub failures: usize,
}

impl ResultRow {
    fn new(variant: Table2Variant, seeds: Vec<u64>, rounds: Vec<Option<usize>>) -> Self {
        let ok: Vec<f64> = rounds.iter().flatten().map(|&r| r as f64).collect();
        let failures = rounds.len() - ok.len();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        let std = mean.filter(|_| ok.len() > 1).map(|m| {
            (ok.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
        });
        ResultRow {
            variant,
            seeds,
            rounds,
            mean,
            std,
            failures,
        }
    }
}

/// The round-count table on a freshly generated common-Hessian instance.
/// Each seed drives the gradient noise; the instance is shared.
pub fn table2_experiment(opts: &Table2Options, seeds: &[u64]) -> Result<Vec<ResultRow>> {
    table2_with(opts, seeds, &table2_variants())
}

pub fn table2_with(opts: &Table2Options, seeds: &[u64], variants: &[Table2Variant]) -> Result<Vec<ResultRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("at least one seed is required".into()));
    }
    let fed = gen_common_hessian_with(opts.d, opts.n, opts.instance_seed, default_u_scale(opts.d), 1.0)?;
    let (f_star, _) = bounds::quad_fstar(&fed)?;
    let target = f_star + opts.target_gap;
    let sigma = opts.sigma_sq.sqrt();
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Option<usize>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let var = &variants[v];
            let mut cfg = RunConfig::fedavg(var.gamma, var.eta, var.local_iters, opts.max_rounds)
                .with_sigma(sigma)
                .with_seed(seed);
            cfg.batch_size = var.batch;
            run_to_target(&fed, &cfg, target)
        })
        .collect::<Result<_>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, var)| {
            let rounds = results[v * seeds.len()..(v + 1) * seeds.len()].to_vec();
            ResultRow::new(var.clone(), seeds.to_vec(), rounds)
        })
        .collect())
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// CSV with one row per variant; failed seeds are left empty.
pub fn result_rows_csv(rows: &[ResultRow], hash: &str) -> Result<String> {
    let n_seeds = rows.first().map_or(0, |r| r.seeds.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["spec_hash", "variant", "eta", "gamma", "I", "s"].map(String::from).to_vec();
    if let Some(r) = rows.first() {
        header.extend(r.seeds.iter().map(|s| format!("rounds_seed_{s}")));
    }
    header.extend(["mean", "std", "failures", "reference"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        if r.seeds.len() != n_seeds {
            return Err(Error::InvalidInput("rows disagree on their seeds".into()));
        }
        let mut rec = vec![
            hash.to_string(),
            r.variant.label.clone(),
            r.variant.eta.to_string(),
            r.variant.gamma.to_string(),
            r.variant.local_iters.to_string(),
            r.variant.batch.to_string(),
        ];
        rec.extend(r.rounds.iter().map(|x| x.map(|v| v.to_string()).unwrap_or_default()));
        rec.extend([opt_f64(r.mean), opt_f64(r.std), r.failures.to_string(), r.variant.reference.to_string()]);
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

/// Per-round quantities kept from one seed.
#[derive(Clone, Debug, Default)]
struct RoundRecord {
    trace: Option<RoundTrace>,
    divergence: Vec<f64>,
    deviation: Vec<f64>,
    zeta: Vec<f64>,
    drift: Vec<f64>,
    grad_hat_sq: Vec<f64>,
}

impl RoundRecord {
    fn from(trace: &RoundTrace, detail: &RoundDetail) -> Self {
        RoundRecord {
            trace: Some(trace.clone()),
            divergence: detail.steps.iter().map(|s| s.divergence).collect(),
            deviation: detail.steps.iter().map(|s| s.deviation).collect(),
            zeta: detail.steps.iter().map(|s| s.zeta).collect(),
            drift: detail.steps.iter().map(|s| s.drift).collect(),
            grad_hat_sq: detail.steps.iter().map(|s| s.grad_hat_sq).collect(),
        }
    }

    fn trace(&self) -> &RoundTrace {
        self.trace.as_ref().expect("recorded rounds carry a trace")
    }
}

/// Runs every seed in full, keeping per-step diagnostics. A diverged seed
/// is an error.
fn record_seeds(obj: &dyn FederatedObjective, cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<Vec<RoundRecord>>> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("at least one seed is required".into()));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = cfg.clone().with_seed(seed);
            let mut recs = Vec::with_capacity(cfg.rounds);
            let init = ServerState::initial(ModelVector::zeros(obj.dim()));
            run_with(obj, &cfg, init, |t, d, _| {
                recs.push(RoundRecord::from(t, d));
                ControlFlow::Continue(())
            })?;
            Ok(recs)
        })
        .collect()
}

/// Mean over seeds of `pick(record)` at every round, summed in seed order.
fn seed_mean<F: Fn(&RoundRecord) -> f64>(runs: &[Vec<RoundRecord>], round: usize, pick: F) -> f64 {
    runs.iter().map(|r| pick(&r[round])).sum::<f64>() / runs.len() as f64
}

fn seed_mean_steps<F: Fn(&RoundRecord) -> &Vec<f64>>(runs: &[Vec<RoundRecord>], round: usize, pick: F) -> Vec<f64> {
    let k = pick(&runs[0][round]).len();
    (0..k)
        .map(|j| runs.iter().map(|r| pick(&r[round])[j]).sum::<f64>() / runs.len() as f64)
        .collect()
}

/// Closed-form constants and the trajectory-independent inputs for a run.
fn base_inputs(fed: &QuadraticFed, cfg: &RunConfig) -> Result<BoundInputs> {
    let (f_star, _) = bounds::quad_fstar(fed)?;
    let f0 = fed.global_objective(&ModelVector::zeros(fed.dim()));
    let n = fed.n_workers();
    Ok(BoundInputs {
        f_gap: f0 - f_star,
        l_g: quad_lg_closed(fed),
        l_h: quad_lh_closed(fed),
        l_tilde: quad_ltilde_closed(fed),
        sigma: cfg.effective_sigma(),
        zeta: 0.0,
        n,
        m: cfg.participants.unwrap_or(n),
        local_iters: cfg.local_iters,
        rounds: cfg.rounds,
        gamma: cfg.gamma,
        eta: cfg.eta,
        ..Default::default()
    })
}

/// Algorithm each audited result is stated for.
fn audited_algorithm(theorem: TheoremId) -> Option<Algorithm> {
    match theorem {
        TheoremId::Main | TheoremId::Partial | TheoremId::QuadCommonLocal | TheoremId::QuadHetero => {
            Some(Algorithm::Fedavg)
        }
        TheoremId::QuadCommonMinibatch => Some(Algorithm::MinibatchSgd),
        TheoremId::Momentum => Some(Algorithm::FedavgMomentum),
        TheoremId::Fedadam | TheoremId::StronglyConvex => None,
    }
}

/// Bound inputs for `theorem` under `cfg`, with ζ taken from `runs` by the
/// plug-in rule of each result.
fn audit_inputs(fed: &QuadraticFed, cfg: &RunConfig, theorem: TheoremId, runs: &[Vec<RoundRecord>]) -> Result<BoundInputs> {
    let mut p = base_inputs(fed, cfg)?;
    let max_over = |f: &dyn Fn(&RoundTrace) -> f64| {
        runs.iter().flatten().map(|r| f(r.trace())).fold(0.0, f64::max)
    };
    match theorem {
        TheoremId::Main | TheoremId::Partial | TheoremId::Momentum => {
            p.zeta = max_over(&|t| t.zeta_sup_local);
        }
        TheoremId::QuadHetero => {
            p.zeta = max_over(&|t| t.zeta_at_xbar);
            p.kappa = Some(kappa(fed)?);
        }
        TheoremId::QuadCommonMinibatch => {
            // The batch plays the role of I and σ is per sample.
            p.local_iters = cfg.batch_size;
            p.sigma = if cfg.full_gradient_mode { 0.0 } else { cfg.sigma };
        }
        _ => {}
    }
    if theorem == TheoremId::Momentum {
        p.beta = Some(cfg.momentum_beta);
        p.eta = 1.0;
    }
    Ok(p)
}

/// Runs `cfg` over `seeds`, evaluates `theorem` with closed-form constants
/// and attaches the seed-averaged left side.
///
/// The left side is `min_r ‖∇f(x̄ʳ)‖²` for the FedAvg results, the minimum
/// over every virtual iterate for the quadratic ones, and the average over
/// every virtual iterate for momentum.
pub fn bound_audit(fed: &QuadraticFed, cfg: &RunConfig, theorem: TheoremId, seeds: &[u64]) -> Result<BoundReport> {
    let alg = audited_algorithm(theorem)
        .ok_or_else(|| Error::InvalidInput(format!("no empirical audit for {theorem}")))?;
    if cfg.algorithm != alg {
        return Err(Error::config(
            "algorithm",
            format!("{theorem} is stated for {alg:?}, config runs {:?}", cfg.algorithm),
        ));
    }
    if theorem == TheoremId::Partial && cfg.participants.is_none() {
        return Err(Error::config("M", "partial participation needs M"));
    }
    // f* first so an indefinite instance is refused before any run.
    bounds::quad_fstar(fed)?;
    let runs = record_seeds(fed, cfg, seeds)?;
    let p = audit_inputs(fed, cfg, theorem, &runs)?;
    let mut rep = bounds::evaluate(theorem, &p)?;
    let rounds = runs[0].len();
    let lhs = match theorem {
        TheoremId::Main | TheoremId::Partial => (0..rounds)
            .map(|r| seed_mean(&runs, r, |x| x.trace().grad_norm_sq))
            .fold(f64::INFINITY, f64::min),
        TheoremId::QuadCommonLocal | TheoremId::QuadCommonMinibatch | TheoremId::QuadHetero => (0..rounds)
            .flat_map(|r| seed_mean_steps(&runs, r, |x| &x.grad_hat_sq))
            .fold(f64::INFINITY, f64::min),
        TheoremId::Momentum => {
            let all: Vec<f64> = (0..rounds).flat_map(|r| seed_mean_steps(&runs, r, |x| &x.grad_hat_sq)).collect();
            all.iter().sum::<f64>() / all.len() as f64
        }
        _ => unreachable!("filtered above"),
    };
    rep.empirical_lhs = Some(lhs);
    rep.notes.push(format!("{} seeds, closed-form constants", seeds.len()));
    if matches!(theorem, TheoremId::QuadCommonLocal | TheoremId::QuadCommonMinibatch) && !fed.has_common_hessian() {
        rep.notes.push("instance does not have a common Hessian".into());
    }
    Ok(rep)
}

/// One audited configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditCase {
    pub theorem: TheoremId,
    pub problem: ProblemSpec,
    pub config: RunConfig,
    pub report: BoundReport,
}

impl AuditCase {
    /// All constraints pass and the left side is within the bound.
    pub fn passes(&self) -> bool {
        self.report.all_constraints_pass() && self.report.holds() == Some(true)
    }
}

/// Largest step that satisfies every constraint of `theorem`, found by
/// bisection on the report's verdicts.
fn max_valid_gamma(theorem: TheoremId, base: &BoundInputs) -> Result<f64> {
    let ok = |g: f64| -> Result<bool> {
        let p = BoundInputs { gamma: g, ..base.clone() };
        Ok(bounds::evaluate(theorem, &p)?.all_constraints_pass())
    };
    let mut lo = 0.0;
    let mut hi = 10.0;
    if ok(hi)? {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn audit_problem(theorem: TheoremId, case: usize) -> ProblemSpec {
    let seed = 100 + case as u64;
    match theorem {
        TheoremId::QuadCommonLocal | TheoremId::QuadCommonMinibatch => ProblemSpec::CommonHessian {
            d: 8,
            n: 5,
            seed,
            u_scale: None,
            spread: None,
        },
        _ => ProblemSpec::HeteroQuadratic {
            d: 6,
            n: 5,
            delta: 0.3,
            psd_floor: 0.05,
            seed,
        },
    }
}

/// The audited configuration `case` of `theorem`, with `γ` a fraction of
/// the largest valid step.
pub fn audit_config(theorem: TheoremId, case: usize, rounds: usize) -> Result<(ProblemSpec, RunConfig)> {
    let alg = audited_algorithm(theorem).ok_or_else(|| Error::InvalidInput(format!("no audit for {theorem}")))?;
    let spec = audit_problem(theorem, case);
    let fed = spec.build()?.as_quadratic().cloned().expect("audit problems are quadratic");
    let local_iters = [1, 2, 3, 5, 8][case % 5];
    let fraction = [1.0, 0.8, 0.5, 0.3, 0.95][case % 5];
    let mut cfg = RunConfig::fedavg(1.0, 1.0, local_iters, rounds)
        .with_algorithm(alg)
        .with_sigma(0.2);
    match theorem {
        TheoremId::Main => cfg.eta = [1.0, 2.0, 1.5, 4.0, 1.0][case % 5],
        TheoremId::Partial => {
            cfg.participants = Some([2, 3, 4, 2, 3][case % 5]);
            cfg.eta = [1.0, 1.5, 1.0, 2.0, 1.0][case % 5];
        }
        TheoremId::QuadCommonMinibatch => {
            cfg.local_iters = 1;
            cfg.batch_size = local_iters;
        }
        TheoremId::Momentum => cfg.momentum_beta = [0.0, 0.3, 0.5, 0.7, 0.9][case % 5],
        _ => {}
    }
    let mut base = audit_inputs(&fed, &cfg, theorem, &[])?;
    if theorem == TheoremId::QuadHetero {
        base.kappa = Some(kappa(&fed)?);
    }
    cfg.gamma = fraction * max_valid_gamma(theorem, &base)?;
    Ok((spec, cfg))
}

/// Five configurations per audited result, each evaluated over `seeds`.
pub fn audit_suite(theorems: &[TheoremId], seeds: &[u64], rounds: usize) -> Result<Vec<AuditCase>> {
    let mut out = Vec::new();
    for &theorem in theorems {
        for case in 0..5 {
            let (problem, config) = audit_config(theorem, case, rounds)?;
            let fed = problem.build()?.as_quadratic().cloned().expect("audit problems are quadratic");
            let report = bound_audit(&fed, &config, theorem, seeds)?;
            out.push(AuditCase {
                theorem,
                problem,
                config,
                report,
            });
        }
    }
    Ok(out)
}

/// Evaluates the `[bounds]` table of `spec`.
///
/// Explicit `inputs` are evaluated as given. Otherwise the problem must be a
/// quadratic and the `[run]` table is run over `spec.seeds`: audited results
/// get the seed-averaged left side, FedAdam and the strongly convex rate get
/// closed-form constants with ζ from the runs and no left side.
pub fn bounds_for_spec(spec: &ExperimentSpec) -> Result<BoundReport> {
    let section = spec
        .bounds
        .as_ref()
        .ok_or_else(|| Error::config("bounds", "this command needs a [bounds] table"))?;
    let theorem = section.theorem;
    if let Some(p) = &section.inputs {
        return bounds::evaluate(theorem, p).map_err(|e| match e {
            Error::InvalidInput(m) => Error::config("inputs", m),
            e => e,
        });
    }
    let problem = spec.build_problem()?;
    let fed = problem
        .as_quadratic()
        .ok_or_else(|| Error::config("problem", "bounds without explicit inputs need a quadratic problem"))?;
    let cfg = spec.run_config()?;
    cfg.validate(fed.n_workers())?;
    if audited_algorithm(theorem).is_some() {
        return bound_audit(fed, cfg, theorem, &spec.seeds);
    }
    let runs = record_seeds(fed, cfg, &spec.seeds)?;
    let mut p = audit_inputs(fed, cfg, theorem, &runs)?;
    p.zeta = runs.iter().flatten().map(|r| r.trace().zeta_sup_local).fold(0.0, f64::max);
    match theorem {
        TheoremId::Fedadam => {
            p.g_bound = Some(section.g_bound.ok_or_else(|| Error::config("g_bound", "FedAdam needs g_bound"))?);
            p.tau = Some(cfg.adam_tau);
            p.beta1 = Some(cfg.adam_beta1);
            p.beta2 = Some(cfg.adam_beta2);
            p.adam_k = section.adam_k;
        }
        TheoremId::StronglyConvex => {
            let mu = match section.mu {
                Some(mu) => mu,
                None => min_eigenvalue(fed.global_a(), 1e-12)?,
            };
            if !(mu > 0.0) {
                return Err(Error::config("mu", format!("needs mu > 0, instance gives {mu}")));
            }
            let (_, x_star) = bounds::quad_fstar(fed)?;
            p.mu = Some(mu);
            p.x0_dist_sq = Some(x_star.norm_sq());
        }
        _ => unreachable!("audited results returned above"),
    }
    let mut rep = bounds::evaluate(theorem, &p)?;
    rep.notes.push(format!("zeta from {} seeds, closed-form constants", spec.seeds.len()));
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub lemma: String,
    pub round: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub status: LemmaStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaSweep {
    pub rows: Vec<LemmaRow>,
}

impl LemmaSweep {
    /// `(passed, applicable)` rows of one lemma.
    pub fn counts(&self, lemma: &str) -> (usize, usize) {
        let rows = self.rows.iter().filter(|r| r.lemma == lemma);
        let applicable: Vec<_> = rows.filter(|r| r.status != LemmaStatus::NotApplicable).collect();
        let passed = applicable.iter().filter(|r| r.status == LemmaStatus::Pass).count();
        (passed, applicable.len())
    }

    pub fn all_applicable_pass(&self) -> bool {
        self.rows.iter().all(|r| r.status != LemmaStatus::Fail)
    }

    pub fn to_csv(&self, hash: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["spec_hash", "lemma", "round", "lhs", "rhs", "status"])?;
        for r in &self.rows {
            let status = match r.status {
                LemmaStatus::Pass => "pass",
                LemmaStatus::Fail => "fail",
                LemmaStatus::NotApplicable => "not_applicable",
            };
            w.write_record([
                hash.to_string(),
                r.lemma.clone(),
                r.round.to_string(),
                fmt_f64(r.lhs),
                fmt_f64(r.rhs),
                status.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
    }
}

fn lemma_row(lemma: Lemma, round: usize, lhs: f64, rep: &bounds::LemmaReport) -> LemmaRow {
    let status = if !rep.applicable() {
        LemmaStatus::NotApplicable
    } else if lhs <= rep.rhs {
        LemmaStatus::Pass
    } else {
        LemmaStatus::Fail
    };
    LemmaRow {
        lemma: lemma.name().into(),
        round,
        lhs,
        rhs: rep.rhs,
        status,
    }
}

/// Per-round comparison of measured left sides with the lemma right sides.
///
/// The gradient-deviation bound is pointwise, so it is checked at every
/// step of every seed and the worst step is reported. The others are
/// expectation bounds and use seed averages, with ζ the largest value seen
/// in the round across seeds. FedAvg runs check the first three; momentum
/// runs check gradient deviation and momentum divergence.
pub fn lemma_sweep(fed: &QuadraticFed, cfg: &RunConfig, seeds: &[u64]) -> Result<LemmaSweep> {
    let momentum = match cfg.algorithm {
        Algorithm::Fedavg => false,
        Algorithm::FedavgMomentum => true,
        a => return Err(Error::config("algorithm", format!("lemma sweeps cover fedavg and momentum, not {a:?}"))),
    };
    let runs = record_seeds(fed, cfg, seeds)?;
    let mut base = base_inputs(fed, cfg)?;
    base.beta = Some(cfg.momentum_beta);
    let lh2lg2 = 3.0 * (base.l_h * base.l_h + base.l_g * base.l_g);
    let mut rows = Vec::new();
    for r in 0..runs[0].len() {
        // Worst pointwise slack over seeds and steps.
        let mut worst: Option<(f64, f64)> = None;
        for rec in runs.iter().map(|x| &x[r]) {
            for k in 0..rec.deviation.len() {
                let rhs = lh2lg2 * rec.divergence[k] + 3.0 * rec.zeta[k] * rec.zeta[k];
                let lhs = rec.deviation[k];
                if worst.map_or(true, |(l, h)| lhs - rhs > l - h) {
                    worst = Some((lhs, rhs));
                }
            }
        }
        if let Some((lhs, rhs)) = worst {
            let status = if lhs <= rhs { LemmaStatus::Pass } else { LemmaStatus::Fail };
            rows.push(LemmaRow {
                lemma: Lemma::GradientDeviation { divergence: 0.0 }.name().into(),
                round: r,
                lhs,
                rhs,
                status,
            });
        }

        let zeta = runs.iter().map(|x| x[r].trace().zeta_sup_local).fold(0.0, f64::max);
        let p = BoundInputs { zeta, ..base.clone() };
        let div_sum = seed_mean(&runs, r, |x| x.trace().divergence_sum);
        if momentum {
            let rep = bounds::lemma_rhs(Lemma::MomentumDivergence, &p)?;
            rows.push(lemma_row(Lemma::MomentumDivergence, r, div_sum / cfg.local_iters as f64, &rep));
        } else {
            let rep = bounds::lemma_rhs(Lemma::ModelDivergence, &p)?;
            rows.push(lemma_row(Lemma::ModelDivergence, r, div_sum, &rep));
            let which = Lemma::AveragedDrift {
                divergence_sum: div_sum,
                grad_norm_sq: seed_mean(&runs, r, |x| x.trace().grad_norm_sq),
            };
            let drift = seed_mean_steps(&runs, r, |x| &x.drift).into_iter().fold(0.0, f64::max);
            rows.push(lemma_row(which, r, drift, &bounds::lemma_rhs(which, &p)?));
        }
    }
    Ok(LemmaSweep { rows })
}

/// Reference and estimated constants of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorValidation {
    pub reference: HeterogeneityReport,
    pub estimated: HeterogeneityReport,
    /// Rounds run before snapshots were collected.
    pub staging_rounds: usize,
}

/// Snapshot rounds collected after staging.
pub const SNAPSHOT_ROUNDS: usize = 10;

/// Staging stops once `f − f*` falls below this fraction of `𝓕`
/// (quadratics) or `‖∇f‖²` below this fraction of its initial value
/// (logistic).
pub const NEAR_CONVERGENCE: f64 = 1e-3;

/// Runs `cfg` (with `cfg.rounds` as the staging cap) until near convergence,
/// then collects [`SNAPSHOT_ROUNDS`] rounds of snapshots and estimates the
/// constants from them.
pub fn estimator_validation(problem: &Problem, cfg: &RunConfig) -> Result<EstimatorValidation> {
    let obj = problem.objective();
    let x0 = ModelVector::zeros(obj.dim());
    let (reference, converged): (HeterogeneityReport, Box<dyn Fn(&ModelVector) -> bool + '_>) = match problem {
        Problem::Quadratic(q) => {
            let (f_star, _) = bounds::quad_fstar(q)?;
            let gap0 = q.global_objective(&x0) - f_star;
            let rep = closed_form_report(q, &x0, cfg.effective_sigma())?;
            (rep, Box::new(move |x| q.global_objective(x) - f_star <= NEAR_CONVERGENCE * gap0))
        }
        Problem::Logistic(l) => {
            let g0 = l.global_gradient(&x0).norm_sq();
            let rep = logistic_reference_report(l, &x0, cfg.effective_sigma());
            (rep, Box::new(move |x| l.global_gradient(x).norm_sq() <= NEAR_CONVERGENCE * g0))
        }
    };
    let mut run_cfg = cfg.clone();
    run_cfg.rounds = cfg.rounds + SNAPSHOT_ROUNDS;
    let mut staging: Option<usize> = converged(&x0).then_some(0);
    let mut snapshots = Vec::new();
    let mut servers = vec![];
    let mut zeta = 0.0f64;
    let init = ServerState::initial(x0.clone());
    if staging.is_some() {
        servers.push(x0.clone());
    }
    let res = run_with(obj, &run_cfg, init, |t, d, s| {
        match staging {
            None => {
                if converged(&s.x_bar) {
                    staging = Some(s.round);
                    servers.push(s.x_bar.clone());
                } else if s.round >= cfg.rounds {
                    return ControlFlow::Break(());
                }
            }
            Some(_) => {
                let x_bar = fixed_order_mean(&d.local_final).expect("equal dimensions");
                snapshots.push(Snapshot {
                    x_bar,
                    locals: d.local_final.clone(),
                });
                servers.push(s.x_bar.clone());
                zeta = zeta.max(t.zeta_at_xbar);
                if snapshots.len() == SNAPSHOT_ROUNDS {
                    return ControlFlow::Break(());
                }
            }
        }
        ControlFlow::Continue(())
    });
    match res {
        Ok(_) => {}
        Err(Error::Diverged { round, .. }) => {
            return Err(Error::EstimationFailed(format!("staging run diverged at round {round}")))
        }
        Err(e) => return Err(e),
    }
    let staging_rounds = staging.ok_or_else(|| {
        Error::EstimationFailed(format!("no near-convergence within {} rounds", cfg.rounds))
    })?;
    if snapshots.is_empty() {
        return Err(Error::EstimationFailed("no snapshot rounds ran".into()));
    }
    let (l_h, used) = estimate_lh(obj, &snapshots)?;
    let l_tilde = snapshots
        .iter()
        .map(|s| estimate_ltilde(obj, &s.x_bar, &s.locals))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let l_g = servers
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| estimate_lg(obj, &w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let last = servers.last().expect("staging pushed a model");
    let sigma = if cfg.full_gradient_mode || cfg.sigma == 0.0 {
        0.0
    } else {
        let mut stream = RngStream::new(cfg.master_seed, Lane::new(Purpose::Estimator, 0, 0, 0));
        let noise = NoiseModel::new(cfg.sigma)?;
        estimate_sigma(obj, 0, last, &noise, cfg.batch_size, 256, &mut stream)?
    };
    Ok(EstimatorValidation {
        reference,
        estimated: HeterogeneityReport {
            l_h,
            l_g,
            l_tilde,
            zeta,
            sigma,
            kappa: None,
            method: Method::Estimated,
            rounds_averaged: used,
        },
        staging_rounds,
    })
}

/// One heterogeneity scale of the spread demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub spread: f64,
    pub l_h_closed: f64,
    pub l_h_estimated: f64,
    /// `max_i ‖∇F_i(x⁰) − ∇f(x⁰)‖`.
    pub zeta: f64,
    /// `𝓕`, unchanged across spreads.
    pub f_gap: f64,
    pub rounds_to_target: Option<usize>,
}

/// Common-Hessian instances whose linear terms are spread by each factor.
///
/// The spread leaves `∇f` and `f − f*` untouched, so `𝓕` is the same for
/// every row. `cfg` drives the rounds-to-target runs, which stop at
/// `f − f* ≤ target_fraction·𝓕`; the `L_h` estimate uses full gradients.
pub fn zeta_spread_demo(
    d: usize,
    n: usize,
    seed: u64,
    spreads: &[f64],
    cfg: &RunConfig,
    target_fraction: f64,
) -> Result<Vec<SpreadRow>> {
    spreads
        .iter()
        .map(|&spread| {
            let fed = gen_common_hessian_with(d, n, seed, default_u_scale(d), spread)?;
            let (f_star, _) = bounds::quad_fstar(&fed)?;
            let x0 = ModelVector::zeros(d);
            let f_gap = fed.global_objective(&x0) - f_star;
            let est_cfg = RunConfig {
                full_gradient_mode: true,
                rounds: cfg.rounds,
                ..cfg.clone()
            };
            let est = estimator_validation(&Problem::Quadratic(fed.clone()), &est_cfg)?;
            Ok(SpreadRow {
                spread,
                l_h_closed: quad_lh_closed(&fed),
                l_h_estimated: est.estimated.l_h,
                zeta: fed.zeta_at(&x0),
                f_gap,
                rounds_to_target: run_to_target(&fed, cfg, f_star + target_fraction * f_gap)?,
            })
        })
        .collect()
}

/// Trace CSV and manifest of one run, keyed by file name.
pub fn run_outputs(
    out: &RunOutput,
    cfg: &RunConfig,
    problem: &Provenance,
    hash: &str,
    diverged_at: Option<usize>,
) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let seed = cfg.master_seed;
    let mut csv = Vec::new();
    crate::algorithms::write_trace_csv(&out.traces, &mut csv)?;
    files.insert(format!("trace_seed{seed}.csv"), csv);
    let manifest = RunManifest {
        spec_hash: hash.to_string(),
        seed,
        config: cfg.clone(),
        problem: problem.clone(),
        rounds_completed: out.final_state.round,
        diverged_at,
    };
    files.insert(format!("manifest_seed{seed}.json"), serde_json::to_vec_pretty(&manifest)?);
    Ok(files)
}
