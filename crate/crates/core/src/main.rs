use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fisher_influence::bounds::BoundConstants;
use fisher_influence::curvature::{LissaConfig, SolverConfig};
use fisher_influence::data::Synthetic;
use fisher_influence::expfamily::Head;
use fisher_influence::experiment::{
    auto_solver, load_config, report, resolve_head, resolve_model, run_experiment, write_outputs, DataSpec,
    ExperimentConfig, Method, Optimizer, Task,
};
use fisher_influence::influence::CurvatureWeighting;
use fisher_influence::nn::Model;
use fisher_influence::objective::Regularizer;
use fisher_influence::oracle::{fd_check, reference_models, FdTarget};
use fisher_influence::tasks::fairness::{FairnessMetric, FairnessSpec};
use fisher_influence::train::TrainConfig;
use fisher_influence::{Error, Result};

#[derive(Parser)]
#[command(name = "influence", version, about = "Fisher- and Hessian-based influence estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and report training statistics.
    Train(RunArgs),
    /// Approximate leave-k-out cross-validation.
    Cv(RunArgs),
    /// Remove training points without retraining.
    Unlearn(RunArgs),
    /// Score training points by their effect on the test loss.
    Attribute(RunArgs),
    /// Remove points that increase a fairness metric.
    Fairness(RunArgs),
    /// Finite-difference checks of the differentiation primitives.
    Oracle(OracleArgs),
    /// Re-run the configuration stored in a result.json.
    Replay(ReplayArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// `linear`, `mlp:<w1>,<w2>[:relu|selu]`, or a JSON architecture (file or inline).
    #[arg(long)]
    model: Option<String>,
    /// `categorical[:C]`, `gaussian`, or JSON. Inferred from the data when omitted.
    #[arg(long)]
    head: Option<String>,
    /// CSV path or `synthetic:blobs|regression|biased:key=val,...`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long, default_value = "y")]
    label: String,
    #[arg(long)]
    sensitive: Option<String>,
    /// Comma-separated columns to one-hot encode.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long, default_value = "fisher")]
    method: String,
    /// `none`, `l2:<λ>` or `l1:<λ>`; defaults to `l2:<weight-decay/2>`.
    #[arg(long)]
    reg: Option<String>,
    /// `auto`, `dense` or `lissa`.
    #[arg(long, default_value = "auto")]
    solver: String,
    #[arg(long, default_value_t = 1.0 / 500.0)]
    lissa_sigma: f64,
    #[arg(long, default_value_t = 2000)]
    lissa_depth: usize,
    #[arg(long, default_value_t = 3)]
    lissa_reps: usize,
    #[arg(long)]
    lissa_batch: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    /// `full` (curvature of all samples) or `reweighted`.
    #[arg(long, default_value = "full")]
    weighting: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// `adamw` or `full` (full-batch minimization of the regularized objective).
    #[arg(long, default_value = "adamw")]
    optimizer: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Held-out size (cv) or number of removed points (unlearn).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Comma-separated training indices (removed set or scored set).
    #[arg(long, value_delimiter = ',')]
    indices: Vec<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// JSON file with bound constants for the unlearning noise.
    #[arg(long)]
    constants: Option<PathBuf>,
    /// `dp` or `chi2`.
    #[arg(long, default_value = "dp")]
    metric: String,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Defaults to 0.2 for attribute, 0 otherwise.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Also run exact retraining references.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// `all`, `grad`, `hvp`, `jvp`, `vjp` or `fisher`.
    #[arg(long, default_value = "all")]
    check: String,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    /// A result.json written by a previous run.
    #[arg(long)]
    result: PathBuf,
    #[arg(long, default_value = "replay")]
    out: PathBuf,
}

fn default_data(task: Task) -> &'static str {
    match task {
        Task::Fairness => "synthetic:biased:n=4000,d=14,bias=0.3",
        _ => "synthetic:blobs:n=200,d=5",
    }
}

fn build_config(task: Task, a: &RunArgs) -> Result<ExperimentConfig> {
    let source = a.data.clone().unwrap_or_else(|| default_data(task).to_string());
    let data = DataSpec {
        source: source.clone(),
        label: a.label.clone(),
        sensitive: a.sensitive.clone(),
        categorical: a.categorical.clone(),
        standardize: !a.no_standardize,
    };
    let loaded = data.load(a.seed)?;
    let head = match &a.head {
        Some(h) => resolve_head(h)?,
        None if matches!(Synthetic::parse(&source), Ok(Synthetic::Regression { .. })) => Head::Gaussian,
        None => {
            let classes = loaded.samples.iter().map(|s| s.y).fold(1.0, f64::max) as usize + 1;
            Head::Categorical { classes }
        }
    };
    let model_spec = a.model.clone().unwrap_or_else(|| match task {
        Task::Fairness => "mlp:1000".into(),
        _ => "linear".into(),
    });
    let model = resolve_model(&model_spec, loaded.num_features(), head.dim())?;
    let reg = match &a.reg {
        Some(r) => r.parse::<Regularizer>()?,
        None => Regularizer::L2(a.weight_decay / 2.0),
    };
    let lissa = LissaConfig {
        sigma: a.lissa_sigma,
        depth: a.lissa_depth,
        reps: a.lissa_reps,
        batch: a.lissa_batch,
        seed: a.seed,
    };
    let solver = match a.solver.as_str() {
        "auto" => auto_solver(Model::new(model.clone())?.num_params(), lissa),
        "dense" => SolverConfig::Dense,
        "lissa" => SolverConfig::Lissa(lissa),
        other => return Err(Error::Usage(format!("unknown solver '{other}' (auto|dense|lissa)"))),
    };
    let weighting = match a.weighting.as_str() {
        "full" => CurvatureWeighting::Full,
        "reweighted" => CurvatureWeighting::Reweighted,
        other => return Err(Error::Usage(format!("unknown weighting '{other}' (full|reweighted)"))),
    };
    let constants = match &a.constants {
        Some(p) => Some(BoundConstants::from_json(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    Ok(ExperimentConfig {
        task,
        method: a.method.parse::<Method>()?,
        model,
        head,
        data,
        reg,
        solver,
        damping: a.damping,
        weighting,
        seed: a.seed,
        optimizer: a.optimizer.parse::<Optimizer>()?,
        train: TrainConfig {
            lr: a.lr,
            epochs: a.epochs,
            batch_size: a.batch_size,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            seed: a.seed,
            ..TrainConfig::default()
        },
        test_fraction: a.test_fraction.unwrap_or(if task == Task::Attribute { 0.2 } else { 0.0 }),
        k: a.k,
        folds: a.folds,
        indices: a.indices.clone(),
        epsilon: a.epsilon,
        delta: a.delta,
        constants,
        fairness: FairnessSpec::new(a.metric.parse::<FairnessMetric>()?, a.bins)?,
        verify: a.verify,
    })
}

fn run_and_write(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<()> {
    let run = run_experiment(cfg)?;
    write_outputs(&run, out)?;
    print!("{}", report(&run));
    Ok(())
}

fn oracle(a: &OracleArgs) -> Result<bool> {
    let targets: Vec<FdTarget> = match a.check.as_str() {
        "all" => FdTarget::ALL.to_vec(),
        "grad" => vec![FdTarget::Grad],
        "hvp" => vec![FdTarget::Hvp],
        "jvp" => vec![FdTarget::Jvp],
        "vjp" => vec![FdTarget::Vjp],
        "fisher" => vec![FdTarget::Fisher],
        other => return Err(Error::Usage(format!("unknown check '{other}'"))),
    };
    let cases = [
        (Head::Categorical { classes: 3 }, Synthetic::Blobs { n: 6, d: 4, separation: 1.0 }),
        (Head::Gaussian, Synthetic::Regression { n: 6, d: 4, noise: 0.5 }),
    ];
    let mut all_passed = true;
    for (head, gen) in cases {
        let data = gen.generate(a.seed).data;
        for (name, arch) in reference_models(4, head.dim()) {
            let model = Model::new(arch)?;
            let theta = model.init_params(a.seed);
            for &t in &targets {
                let r = fd_check(t, &model, &head, &data, &theta, a.tolerance, a.seed)?;
                all_passed &= r.passed;
                let head_name = match head {
                    Head::Categorical { .. } => "categorical",
                    Head::Gaussian => "gaussian",
                };
                println!(
                    "{} {head_name:<11} {name:<7} {:<6} max_rel_err={:.3e} tol={:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    t.name(),
                    r.max_rel_err,
                    r.tolerance
                );
            }
        }
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => build_config(Task::Train, a).and_then(|c| run_and_write(&c, &a.out)),
        Command::Cv(a) => build_config(Task::Cv, a).and_then(|c| run_and_write(&c, &a.out)),
        Command::Unlearn(a) => build_config(Task::Unlearn, a).and_then(|c| run_and_write(&c, &a.out)),
        Command::Attribute(a) => build_config(Task::Attribute, a).and_then(|c| run_and_write(&c, &a.out)),
        Command::Fairness(a) => build_config(Task::Fairness, a).and_then(|c| run_and_write(&c, &a.out)),
        Command::Replay(a) => load_config(&a.result).and_then(|c| run_and_write(&c, &a.out)),
        Command::Oracle(a) => match oracle(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
