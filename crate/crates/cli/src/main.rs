use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spe_core::bellman::{self, DEFAULT_RESOLUTION, DEFAULT_TOL};
use spe_core::engine::{self, EngineParams, PriorPolicy, SimConfig, DEFAULT_DISCOUNT, DEFAULT_Z_MAX, REPLACE};
use spe_core::estimator::{self, EstimateReport, EstimatorConfig, StepRule};
use spe_core::grid::BeliefGrid;
use spe_core::likelihood;
use spe_core::model::{Belief, ModelFile, PomdpModel};
use spe_core::sensitivity;

#[derive(Parser, Debug)]
#[command(name = "spe", version, about = "Structural estimation for partially observable dynamic discrete choice")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "SPE_THREADS")]
    threads: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate engine-replacement histories as JSON lines.
    Simulate(SimulateArgs),
    /// Fit the POMDP (or the fully observed baseline) to a dataset.
    Estimate(EstimateArgs),
    /// Log-likelihood of a dataset at given parameters.
    Evaluate(EvaluateArgs),
    /// Solve the soft Bellman equation and write the Q table.
    BellmanSolve(SolveArgs),
    /// Prior-robustness sweep; writes the M,spread curve as CSV.
    Sensitivity(SensitivityArgs),
    /// Check whether two models differ in their first two periods.
    IdentifyProbe(ProbeArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Good-state probability of every prior; uniform random when absent.
    #[arg(long)]
    prior_good: Option<f64>,
    #[arg(long, default_value_t = 0)]
    z0: usize,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    /// Also write latent states and beliefs, one JSON line per history.
    #[arg(long)]
    latent_out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Pomdp,
    Mdp,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Pomdp)]
    model: ModelKind,
    /// Estimator configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_Z_MAX)]
    z_max: usize,
    #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
    discount: f64,
    #[arg(long)]
    epsilon: Option<f64>,
    /// "auto" for backtracking or a fixed step size.
    #[arg(long)]
    step: Option<String>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Engine parameters (JSON).
    #[arg(long, conflicts_with = "model_file")]
    params: Option<PathBuf>,
    /// Tabular model file (JSON).
    #[arg(long)]
    model_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with header `M,spread`.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report with every estimate.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    burn_ins: Vec<usize>,
    #[arg(long, default_value_t = 11)]
    candidates: usize,
    #[arg(long, default_value_t = 0.02)]
    slack: f64,
    #[arg(long, default_value_t = DEFAULT_Z_MAX)]
    z_max: usize,
    #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
    discount: f64,
    /// Engine parameters for a filter-contraction certificate in the report.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    params_a: PathBuf,
    #[arg(long)]
    params_b: PathBuf,
    /// Good-state probability of the common prior.
    #[arg(long, default_value_t = 0.5)]
    prior_good: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures carry the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn io(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<spe_core::Error>() {
            Some(spe_core::Error::Io(_)) => 2,
            _ if error.downcast_ref::<std::io::Error>().is_some() => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<spe_core::Error> for Failure {
    fn from(error: spe_core::Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Estimate(args) => estimate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::BellmanSolve(args) => bellman_solve(args),
        Command::Sensitivity(args) => sensitivity(args),
        Command::IdentifyProbe(args) => identify_probe(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn require_input(path: &Path) -> Outcome {
    if !path.is_file() {
        return Err(io(anyhow!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn require_output(path: &Path) -> Outcome {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(io(anyhow!("output directory {} does not exist", dir.display())));
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(io)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

fn digest(path: &Path) -> Result<InputDigest, Failure> {
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let file = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(io)?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| io(e.into()))?;
    Ok(())
}

fn read_params(path: &Path) -> Result<EngineParams, Failure> {
    require_input(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(io)?;
    let params: EngineParams = serde_json::from_str(&text)
        .with_context(|| format!("parsing engine parameters in {}", path.display()))
        .map_err(usage)?;
    params.validate()?;
    Ok(params)
}

fn load_model(source: &ModelSource) -> Result<(PomdpModel, InputDigest), Failure> {
    match (&source.params, &source.model_file) {
        (Some(path), None) => {
            let params = read_params(path)?;
            Ok((engine::build_engine_model(&params)?, digest(path)?))
        }
        (None, Some(path)) => {
            require_input(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(io)?;
            let file: ModelFile = serde_json::from_str(&text)
                .with_context(|| format!("parsing model file {}", path.display()))
                .map_err(usage)?;
            Ok((PomdpModel::try_from(file)?, digest(path)?))
        }
        _ => Err(usage(anyhow!("pass exactly one of --params or --model-file"))),
    }
}

fn simulate(args: SimulateArgs) -> Outcome {
    if args.n == 0 || args.t == 0 {
        return Err(usage(anyhow!("--n and --t must both be at least 1")));
    }
    require_output(&args.out)?;
    if let Some(path) = &args.latent_out {
        require_output(path)?;
    }
    let params = read_params(&args.params)?;
    let prior = match args.prior_good {
        Some(p) => PriorPolicy::Fixed(vec![p, 1.0 - p]),
        None => PriorPolicy::Uniform,
    };
    let sim = SimConfig {
        n_histories: args.n,
        horizon: args.t,
        seed: args.seed,
        prior,
        z0: args.z0,
    };
    let histories = engine::simulate_with_latent(&params, &sim, args.resolution, DEFAULT_TOL)?;
    let dataset: Vec<_> = histories.iter().map(|h| h.history.clone()).collect();
    engine::emit_dataset(&dataset, &args.out)?;
    if let Some(path) = &args.latent_out {
        #[derive(Serialize)]
        struct Latent<'a> {
            s: &'a [usize],
            x: Vec<&'a [f64]>,
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(io)?;
        let mut out = BufWriter::new(file);
        for h in &histories {
            let line = Latent {
                s: &h.states,
                x: h.beliefs.iter().map(|b| b.probs()).collect(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| io(e.into()))?;
            out.write_all(b"\n").map_err(|e| io(e.into()))?;
        }
        out.flush().map_err(|e| io(e.into()))?;
    }
    let replacements: usize = dataset.iter().map(|h| h.acts.iter().filter(|&&a| a == REPLACE).count()).sum();
    let periods = args.n * args.t;
    println!(
        "histories {}  periods {}  replacements {}  replacement rate {:.5}",
        args.n,
        args.t,
        replacements,
        replacements as f64 / periods as f64
    );
    Ok(())
}

fn resolve_estimator_config(args: &EstimateArgs) -> Result<EstimatorConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            require_input(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(io)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing estimator config {}", path.display()))
                .map_err(usage)?
        }
        None => EstimatorConfig::default(),
    };
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    if let Some(step) = &args.step {
        config.step = match step.as_str() {
            "auto" => StepRule::Backtracking,
            other => StepRule::Fixed {
                rho: other
                    .parse()
                    .map_err(|_| usage(anyhow!("--step must be \"auto\" or a number, got {other:?}")))?,
            },
        };
    }
    if let Some(k) = args.max_outer {
        config.max_outer = k;
    }
    if let Some(r) = args.resolution {
        config.resolution = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    command: &'static str,
    model: ModelKind,
    z_max: usize,
    discount: f64,
    input: InputDigest,
    report: &'a EstimateReport,
}

fn estimate(args: EstimateArgs) -> Outcome {
    require_input(&args.data)?;
    require_output(&args.out)?;
    let config = resolve_estimator_config(&args)?;
    let input = digest(&args.data)?;
    let dataset = engine::load_dataset(&args.data)?;
    let report = match args.model {
        ModelKind::Pomdp => estimator::estimate(&engine::engine_family(args.z_max, args.discount), &dataset, &config)?,
        ModelKind::Mdp => estimator::fit_mdp_baseline(&dataset, args.z_max, args.discount, &config)?,
    };
    write_json(
        &args.out,
        &EstimateOutput {
            command: "estimate",
            model: args.model,
            z_max: args.z_max,
            discount: args.discount,
            input,
            report: &report,
        },
    )?;
    for (name, value) in report.theta2_names.iter().zip(&report.theta2) {
        println!("{name:>12}  {value:.4}");
    }
    for (name, value) in report.theta1_names.iter().zip(&report.theta1) {
        println!("{name:>12}  {value:.4}");
    }
    println!("log-likelihood {:.3}", report.likelihood.total);
    if !report.converged {
        return Err(usage(anyhow!(
            "estimation stopped before convergence (stage 1: {}, stage 2: {}); report written to {}",
            report.stage1.converged,
            report.stage2.converged,
            args.out.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput {
    command: &'static str,
    model: InputDigest,
    data: InputDigest,
    resolution: usize,
    tol: f64,
    likelihood: likelihood::LikelihoodTerms,
}

fn evaluate(args: EvaluateArgs) -> Outcome {
    require_input(&args.data)?;
    if let Some(out) = &args.out {
        require_output(out)?;
    }
    let (model, model_digest) = load_model(&args.source)?;
    let data_digest = digest(&args.data)?;
    let dataset = engine::load_dataset(&args.data)?;
    let grid = std::sync::Arc::new(BeliefGrid::new(model.n_states(), args.resolution)?);
    let terms = likelihood::log_likelihood(&model, grid, &dataset, args.tol)?;
    let output = EvaluateOutput {
        command: "evaluate",
        model: model_digest,
        data: data_digest,
        resolution: args.resolution,
        tol: args.tol,
        likelihood: terms,
    };
    match &args.out {
        Some(path) => write_json(path, &output)?,
        None => println!("{}", serde_json::to_string_pretty(&output).map_err(|e| usage(e.into()))?),
    }
    println!(
        "observation {:.6}  choice {:.6}  total {:.6}",
        terms.obs_term, terms.choice_term, terms.total
    );
    Ok(())
}

fn bellman_solve(args: SolveArgs) -> Outcome {
    require_output(&args.out)?;
    let (model, _) = load_model(&args.source)?;
    let grid = std::sync::Arc::new(BeliefGrid::new(model.n_states(), args.resolution)?);
    let q = bellman::solve(&model, grid, args.tol, args.max_iter)?;
    write_json(&args.out, &q.to_file())?;
    println!("sweeps {}  residual {:.3e}", q.iterations(), q.residual());
    Ok(())
}

#[derive(Serialize)]
struct SensitivityOutput {
    command: &'static str,
    data: InputDigest,
    z_max: usize,
    discount: f64,
    sweep: sensitivity::SweepReport,
    contraction: Option<sensitivity::ContractionReport>,
}

fn sensitivity(args: SensitivityArgs) -> Outcome {
    require_input(&args.data)?;
    require_output(&args.out)?;
    if let Some(path) = &args.report {
        require_output(path)?;
    }
    let params = args.params.as_deref().map(read_params).transpose()?;
    let data = digest(&args.data)?;
    let dataset = engine::load_dataset(&args.data)?;
    if dataset.is_empty() {
        return Err(usage(anyhow!("dataset {} is empty", args.data.display())));
    }
    let family = engine::engine_family(args.z_max, args.discount);
    let candidates = sensitivity::edge_candidates(2, args.candidates)?;
    let sweep = sensitivity::x0_sweep_estimate(
        &family,
        &dataset,
        &candidates,
        &args.burn_ins,
        &EstimatorConfig::default(),
        args.slack,
    )?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display())).map_err(io)?;
    sweep.write_csv(BufWriter::new(file))?;
    for p in &sweep.points {
        println!("M {:>3}  spread {:.5}", p.m, p.spread);
    }
    println!("non-increasing within {}: {}", args.slack, sweep.non_increasing);
    let contraction = match params {
        Some(p) => {
            let report = sensitivity::contraction_check(&engine::build_engine_model(&p)?, args.pairs, 16, 0);
            println!("contraction certificate: eta_max {:.6}  passed {}", report.eta_max, report.passed);
            Some(report)
        }
        None => None,
    };
    if let Some(path) = &args.report {
        write_json(
            path,
            &SensitivityOutput {
                command: "sensitivity",
                data,
                z_max: args.z_max,
                discount: args.discount,
                sweep,
                contraction,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeOutput {
    command: &'static str,
    model_a: InputDigest,
    model_b: InputDigest,
    prior: Vec<f64>,
    result: sensitivity::ProbeResult,
}

fn identify_probe(args: ProbeArgs) -> Outcome {
    if let Some(out) = &args.out {
        require_output(out)?;
    }
    let a = read_params(&args.params_a)?;
    let b = read_params(&args.params_b)?;
    if a.z_max != b.z_max {
        bail_usage("both parameter files must use the same z_max")?;
    }
    let prior = Belief::new(vec![args.prior_good, 1.0 - args.prior_good])?;
    let result = sensitivity::two_period_identification_probe(
        &engine::build_engine_model(&a)?,
        &engine::build_engine_model(&b)?,
        &prior,
    )?;
    let output = ProbeOutput {
        command: "identify-probe",
        model_a: digest(&args.params_a)?,
        model_b: digest(&args.params_b)?,
        prior: prior.into_inner(),
        result,
    };
    let text = serde_json::to_string_pretty(&output).map_err(|e| usage(e.into()))?;
    match &args.out {
        Some(path) => write_json(path, &output)?,
        None => println!("{text}"),
    }
    if output.result.rank_one {
        println!("rank-1 kernel: the two-period argument does not apply");
    } else {
        println!("distinguishable: {}", output.result.distinguishable);
    }
    Ok(())
}

fn bail_usage(message: &str) -> Outcome {
    let err: anyhow::Result<()> = (|| bail!("{message}"))();
    err.map_err(usage)
}
