//! `fedhet`: generate federated instances, run the simulators, estimate
//! heterogeneity constants, evaluate convergence bounds and run the canned
//! experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::json;

use fedhet::algorithms::{self, RunConfig};
use fedhet::bounds::TheoremId;
use fedhet::harness::{
    atomic_write, audit_suite, bounds_for_spec, estimator_validation, lemma_sweep, result_rows_csv, run_outputs,
    spec_hash, table2_experiment, with_threads, zeta_spread_demo, ExperimentSpec, Table2Options,
};
use fedhet::{Error, Result};

const CONFIG_KEYS: &str = "\
CONFIG FILE (TOML)
  Top level:
    id            free-form experiment name
    seeds         list of run seeds [default: [0]]; --seed replaces it
    target        objective value counted as reached

  [problem]       generator = common_hessian | hetero_quadratic | logistic
    d             model dimension
    n             number of workers N
    seed          instance seed
    u_scale       common_hessian: scale of the shared factor U
    spread        common_hessian: factor on the spread of the b_i around b
    delta         hetero_quadratic: size of the Hessian deviations
    psd_floor     hetero_quadratic: lower eigenvalue limit of each A_i (negative allows indefinite)
    skew          logistic: label skew across workers, in [0, 1]
    samples_per_worker  logistic: samples held by each worker

  [run] and [[variants]] (each variant has `label` and a `config` table)
    algorithm     fedavg | fedavg_momentum | fedadam | minibatch_sgd | centralized_sgd
    gamma         local learning rate (required)
    eta           server learning rate [default: 1]
    I             local steps per round (required)
    R             communication rounds (required)
    M             workers sampled per round with replacement [default: all]
    beta          local momentum factor in [0, 1)
    beta1         FedAdam first-moment decay [default: 0.9]
    beta2         FedAdam second-moment decay [default: 0.99]
    tau           FedAdam adaptivity offset [default: 0.001]
    s             mini-batch size per gradient [default: 1]
    sigma         gradient noise standard deviation
    seed          master seed, overridden per run by `seeds`
    full_gradient use exact gradients [default: false]

  [bounds]
    theorem       main | partial | quad_common_local | quad_common_minibatch |
                  quad_hetero | momentum | fedadam | strongly_convex
    mu            strong convexity constant [default: smallest eigenvalue of A]
    g_bound       FedAdam gradient bound G
    K             FedAdam constant K [default: 1]
    [bounds.inputs]  explicit constants (f_gap, l_g, l_h, l_tilde, sigma, zeta,
                  n, m, local_iters, rounds, gamma, eta, mu, kappa, g_bound,
                  tau, beta, beta1, beta2, x0_dist_sq, adam_k); skips the runs

EXIT STATUS
  0 success, 1 failure, 2 config error (message names the key),
  3 a run diverged (partial outputs are written)";

#[derive(Parser)]
#[command(name = "fedhet", version, about = "Federated optimization under Hessian heterogeneity", after_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory.
    #[arg(long, global = true, env = "FEDHET_OUT", default_value = "results")]
    out: PathBuf,

    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Progress on stderr; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file.
    config: PathBuf,

    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured instance and write it as JSON.
    Gen(ConfigArgs),
    /// Run the configured algorithm for every seed and variant, writing traces.
    Run(ConfigArgs),
    /// Estimate L_h, L_g, L~, zeta and sigma near convergence and compare with reference values.
    Estimate(ConfigArgs),
    /// Evaluate the [bounds] table, with the empirical left side where one is defined.
    Bounds(ConfigArgs),
    /// Round-count table: rounds to reach f* + 0.8 for nine step-size, I and s variants.
    Table2 {
        /// Number of noise seeds, 0..N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 10_000)]
        max_rounds: usize,
    },
    /// Audit every bound with an empirical left side over generated configurations.
    Audit {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 40)]
        rounds: usize,
    },
    /// Per-round check of the divergence and deviation inequalities.
    Lemmas(ConfigArgs),
    /// Common-Hessian instances with growing zeta: L_h stays 0 and rounds-to-target stay put.
    #[command(name = "demo-prop54")]
    SpreadDemo {
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long, default_value_t = 50_000)]
        max_rounds: usize,
    },
}

enum Status {
    Ok,
    Diverged,
    Failed(String),
}

/// The output directory. File names are built here from fixed stems and
/// sanitized labels, so nothing lands outside it.
struct Out {
    dir: PathBuf,
    verbose: u8,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=.-".contains(c) { c } else { '_' })
        .collect()
}

impl Out {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let name = sanitize(name);
        let path = self.dir.join(&name);
        atomic_write(&path, bytes)?;
        if self.verbose > 0 {
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }

    fn json(&self, name: &str, v: &serde_json::Value) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentSpec> {
    if !Path::new(&args.config).is_file() {
        return Err(Error::config("config", format!("{} is not a readable file", args.config.display())));
    }
    let mut spec = ExperimentSpec::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seeds = vec![seed];
    }
    Ok(spec)
}

fn cmd_gen(spec: &ExperimentSpec, out: &Out) -> Result<Status> {
    let hash = spec.hash();
    let problem = spec.build_problem()?;
    let body: serde_json::Value = serde_json::from_str(&problem.to_json()?)?;
    out.json(
        &format!("problem_{hash}.json"),
        &json!({ "spec_hash": hash, "seed": problem.provenance().seed, "problem": body }),
    )?;
    Ok(Status::Ok)
}

fn run_list(spec: &ExperimentSpec) -> Result<Vec<(String, RunConfig)>> {
    let mut list = Vec::new();
    if let Some(cfg) = &spec.run {
        list.push(("run".to_string(), cfg.clone()));
    }
    list.extend(spec.variants.iter().map(|v| (v.label.clone(), v.config.clone())));
    if list.is_empty() {
        return Err(Error::config("run", "this command needs a [run] table or [[variants]]"));
    }
    Ok(list)
}

fn cmd_run(spec: &ExperimentSpec, out: &Out) -> Result<Status> {
    let hash = spec.hash();
    let problem = spec.build_problem()?;
    let obj = problem.objective();
    let runs = run_list(spec)?;
    for (_, cfg) in &runs {
        cfg.validate(obj.n_workers())?;
    }
    let mut diverged = false;
    for (label, cfg) in &runs {
        for &seed in &spec.seeds {
            let cfg = cfg.clone().with_seed(seed);
            let (output, at) = match algorithms::run(obj, &cfg) {
                Ok(o) => (o, None),
                Err(Error::Diverged { round, partial }) => {
                    eprintln!("{label} seed {seed}: diverged at round {round}");
                    diverged = true;
                    (*partial, Some(round))
                }
                Err(e) => return Err(e),
            };
            for (name, bytes) in run_outputs(&output, &cfg, problem.provenance(), &hash, at)? {
                out.write(&format!("{label}_{hash}_{name}"), &bytes)?;
            }
        }
    }
    Ok(if diverged { Status::Diverged } else { Status::Ok })
}

fn cmd_estimate(spec: &ExperimentSpec, out: &Out) -> Result<Status> {
    let hash = spec.hash();
    let problem = spec.build_problem()?;
    let cfg = spec.run_config()?;
    cfg.validate(problem.objective().n_workers())?;
    for &seed in &spec.seeds {
        let v = estimator_validation(&problem, &cfg.clone().with_seed(seed))?;
        let e = &v.estimated;
        println!(
            "seed {seed}: L_h {:.4e}  L_g {:.4e}  L~ {:.4e}  zeta {:.4e}  sigma {:.4e}  (staged {} rounds)",
            e.l_h, e.l_g, e.l_tilde, e.zeta, e.sigma, v.staging_rounds
        );
        let mut body = serde_json::to_value(&v)?;
        body["spec_hash"] = json!(hash);
        body["seed"] = json!(seed);
        out.json(&format!("estimate_{hash}_seed{seed}.json"), &body)?;
    }
    Ok(Status::Ok)
}

fn cmd_bounds(spec: &ExperimentSpec, out: &Out) -> Result<Status> {
    let hash = spec.hash();
    let rep = bounds_for_spec(spec)?;
    print!("{}", rep.to_table());
    out.json(
        &format!("bounds_{}_{hash}.json", rep.theorem_id),
        &json!({ "spec_hash": hash, "seeds": spec.seeds, "report": rep }),
    )?;
    Ok(Status::Ok)
}

fn cmd_lemmas(spec: &ExperimentSpec, out: &Out) -> Result<Status> {
    let hash = spec.hash();
    let problem = spec.build_problem()?;
    let fed = problem
        .as_quadratic()
        .ok_or_else(|| Error::config("problem", "lemma sweeps need a quadratic problem"))?;
    let sweep = lemma_sweep(fed, spec.run_config()?, &spec.seeds)?;
    let mut names: Vec<&str> = sweep.rows.iter().map(|r| r.lemma.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        let (passed, applicable) = sweep.counts(name);
        println!("{name}: {passed}/{applicable} applicable rounds pass");
    }
    out.write(&format!("lemmas_{hash}.csv"), sweep.to_csv(&hash)?.as_bytes())?;
    out.json(
        &format!("lemmas_{hash}.json"),
        &json!({ "spec_hash": hash, "seeds": spec.seeds, "all_applicable_pass": sweep.all_applicable_pass() }),
    )?;
    Ok(if sweep.all_applicable_pass() {
        Status::Ok
    } else {
        Status::Failed("some applicable rounds fail".into())
    })
}

fn cmd_table2(n_seeds: u64, max_rounds: usize, out: &Out) -> Result<Status> {
    if n_seeds == 0 {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let opts = Table2Options {
        max_rounds,
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let hash = spec_hash(&json!({ "table2": opts, "seeds": seeds }));
    let rows = table2_experiment(&opts, &seeds)?;
    for r in &rows {
        let mean = r.mean.map(|m| format!("{m:.1}")).unwrap_or_else(|| "-".into());
        println!("{:<22} mean {:>8}  failures {}  reference {}", r.variant.label, mean, r.failures, r.variant.reference);
    }
    out.write(&format!("table2_{hash}.csv"), result_rows_csv(&rows, &hash)?.as_bytes())?;
    Ok(Status::Ok)
}

fn cmd_audit(n_seeds: u64, rounds: usize, out: &Out) -> Result<Status> {
    let theorems = [
        TheoremId::Main,
        TheoremId::Partial,
        TheoremId::QuadCommonLocal,
        TheoremId::QuadCommonMinibatch,
        TheoremId::QuadHetero,
        TheoremId::Momentum,
    ];
    let seeds: Vec<u64> = (0..n_seeds).collect();
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let hash = spec_hash(&json!({ "audit": theorems, "seeds": seeds, "rounds": rounds }));
    let cases = audit_suite(&theorems, &seeds, rounds)?;
    let mut failed = 0;
    for c in &cases {
        let lhs = c.report.empirical_lhs.unwrap_or(f64::NAN);
        let ok = c.passes();
        failed += usize::from(!ok);
        println!(
            "{:<22} I={:<2} gamma={:.3e}  lhs {:.3e}  rhs {:.3e}  {}",
            c.theorem.to_string(),
            c.config.local_iters,
            c.config.gamma,
            lhs,
            c.report.rhs_value,
            if ok { "ok" } else { "FAIL" }
        );
    }
    out.json(&format!("audit_{hash}.json"), &json!({ "spec_hash": hash, "seeds": seeds, "cases": cases }))?;
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::Failed(format!("{failed} of {} audited cases fail", cases.len()))
    })
}

fn cmd_spread_demo(seed: u64, max_rounds: usize, out: &Out) -> Result<Status> {
    let spreads = [1.0, 10.0, 100.0];
    let cfg = RunConfig::fedavg(0.05, 1.0, 20, max_rounds);
    let hash = spec_hash(&json!({ "spreads": spreads, "seed": seed, "config": cfg }));
    let rows = zeta_spread_demo(10, 10, seed, &spreads, &cfg, 1e-3)?;
    for r in &rows {
        let rounds = r.rounds_to_target.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "spread {:>5}: L_h closed {:.1e}  estimated {:.1e}  zeta {:.4e}  rounds {}",
            r.spread, r.l_h_closed, r.l_h_estimated, r.zeta, rounds
        );
    }
    out.json(
        &format!("spread_demo_{hash}_seed{seed}.json"),
        &json!({ "spec_hash": hash, "seed": seed, "rows": rows }),
    )?;
    Ok(Status::Ok)
}

fn dispatch(cli: &Cli) -> Result<Status> {
    let out = Out {
        dir: cli.out.clone(),
        verbose: cli.verbose,
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&load(a)?, &out),
        Command::Run(a) => cmd_run(&load(a)?, &out),
        Command::Estimate(a) => cmd_estimate(&load(a)?, &out),
        Command::Bounds(a) => cmd_bounds(&load(a)?, &out),
        Command::Lemmas(a) => cmd_lemmas(&load(a)?, &out),
        Command::Table2 { seeds, max_rounds } => cmd_table2(*seeds, *max_rounds, &out),
        Command::Audit { seeds, rounds } => cmd_audit(*seeds, *rounds, &out),
        Command::SpreadDemo { seed, max_rounds } => cmd_spread_demo(*seed, *max_rounds, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.threads {
        Some(0) => Err(Error::config("threads", "must be at least 1")),
        Some(t) => with_threads(t, || dispatch(&cli)).and_then(|r| r),
        None => dispatch(&cli),
    };
    match res {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Diverged) => ExitCode::from(3),
        Ok(Status::Failed(msg)) => {
            eprintln!("fedhet: {msg}");
            ExitCode::FAILURE
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("fedhet: {e}");
            ExitCode::from(2)
        }
        Err(Error::Diverged { round, .. }) => {
            eprintln!("fedhet: run diverged at round {round}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("fedhet: {e}");
            ExitCode::FAILURE
        }
    }
}
