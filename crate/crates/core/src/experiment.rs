//! Experiment runner: fits a model, runs one task with one or both curvature
//! kinds and writes the result tables.
//!
//! `result.json` holds only deterministic fields; wall times go to
//! `timing.json` so repeated runs produce byte-identical results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::BoundConstants;
use crate::curvature::{CurvatureKind, LissaConfig, SolverConfig, DENSE_CAP};
use crate::data::{load_dataset, sample_folds, CsvOptions, Dataset};
use crate::error::{Error, Result};
use crate::expfamily::{ebar_n, loss_grad, mean_loss, Head};
use crate::influence::{CurvatureWeighting, Estimator, InfluenceConfig};
use crate::linalg::{axpy, norm, sub};
use crate::nn::{Activation, Architecture, Model, PassCounts};
use crate::objective::{Regularizer, WeightVector};
use crate::oracle::{exact_cv, retrain, RetrainConfig};
use crate::tasks::attribution::spearman;
use crate::tasks::cv::{acv, default_k, held_out_at_fit};
use crate::tasks::fairness::{fairness_pipeline, performance, FairnessSpec};
use crate::tasks::unlearn::{unlearn, NoiseRequest, UnlearnRequest};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Train,
    Cv,
    Unlearn,
    Attribute,
    Fairness,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Cv => "cv",
            Task::Unlearn => "unlearn",
            Task::Attribute => "attribute",
            Task::Fairness => "fairness",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Task::Train),
            "cv" => Ok(Task::Cv),
            "unlearn" => Ok(Task::Unlearn),
            "attribute" | "attribution" => Ok(Task::Attribute),
            "fairness" => Ok(Task::Fairness),
            other => Err(Error::Usage(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fisher,
    Hessian,
    Both,
}

impl Method {
    /// Curvature kinds in execution order (Fisher first).
    pub fn kinds(self) -> Vec<CurvatureKind> {
        match self {
            Method::Fisher => vec![CurvatureKind::Fisher],
            Method::Hessian => vec![CurvatureKind::Hessian],
            Method::Both => vec![CurvatureKind::Fisher, CurvatureKind::Hessian],
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(Method::Fisher),
            "hessian" => Ok(Method::Hessian),
            "both" => Ok(Method::Both),
            other => Err(Error::Usage(format!("unknown method '{other}' (fisher|hessian|both)"))),
        }
    }
}

/// How `θ̂` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Mini-batch AdamW with the configured hyperparameters.
    Adamw,
    /// Full-batch minimization of the regularized objective to tolerance.
    Full,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Optimizer::Adamw),
            "full" => Ok(Optimizer::Full),
            other => Err(Error::Usage(format!("unknown optimizer '{other}' (adamw|full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    /// CSV path or `synthetic:<kind>:key=val,...`.
    pub source: String,
    pub label: String,
    pub sensitive: Option<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    pub standardize: bool,
}

impl DataSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let opts = CsvOptions {
            label: self.label.clone(),
            sensitive: self.sensitive.clone(),
            categorical: self.categorical.clone(),
            standardize: self.standardize,
        };
        load_dataset(&self.source, &opts, seed)
    }
}

/// Everything needed to re-run an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub method: Method,
    pub model: Architecture,
    pub head: Head,
    pub data: DataSpec,
    pub reg: Regularizer,
    pub solver: SolverConfig,
    pub damping: f64,
    pub weighting: CurvatureWeighting,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub train: TrainConfig,
    /// Fraction of samples held out as a test split (attribution targets).
    pub test_fraction: f64,
    /// Held-out size for cv, number removed for unlearn.
    pub k: Option<usize>,
    pub folds: usize,
    /// Explicit indices (removed set for unlearn, scored set for attribution).
    #[serde(default)]
    pub indices: Vec<usize>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub constants: Option<BoundConstants>,
    pub fairness: FairnessSpec,
    /// Also run the exact retraining references.
    pub verify: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidInput(format!("damping must be ≥ 0, got {}", self.damping)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidInput(format!("test fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if self.folds == 0 {
            return Err(Error::InvalidInput("folds must be ≥ 1".into()));
        }
        if self.model.layers.last().map(|l| l.output) != Some(self.head.dim()) {
            return Err(Error::DimensionMismatch {
                what: "model output vs head".into(),
                expected: self.head.dim(),
                got: self.model.layers.last().map(|l| l.output).unwrap_or(0),
            });
        }
        Ok(())
    }
}

/// Parses `--model`: `linear`, `mlp:<w1>,<w2>,...[:relu|selu]`, a JSON file
/// or inline JSON.
pub fn resolve_model(spec: &str, input: usize, output: usize) -> Result<Architecture> {
    let spec = spec.trim();
    if spec == "linear" {
        return Ok(Architecture::linear(input, output, true));
    }
    if let Some(rest) = spec.strip_prefix("mlp:") {
        let mut parts = rest.split(':');
        let widths = parts.next().unwrap_or("");
        let act = match parts.next() {
            None | Some("relu") => Activation::Relu,
            Some("selu") => Activation::Selu,
            Some("identity") => Activation::Identity,
            Some(other) => return Err(Error::Usage(format!("unknown activation '{other}'"))),
        };
        let mut all = vec![input];
        for w in widths.split(',').filter(|w| !w.is_empty()) {
            all.push(
                w.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Usage(format!("bad hidden width '{w}'")))?,
            );
        }
        all.push(output);
        return Ok(Architecture::mlp(&all, act));
    }
    if spec.starts_with('{') {
        return Architecture::from_json(spec);
    }
    Architecture::from_json(&fs::read_to_string(spec)?)
}

/// Parses `--head`: `categorical[:C]`, `gaussian`, a JSON file or inline JSON.
pub fn resolve_head(spec: &str) -> Result<Head> {
    let spec = spec.trim();
    if spec == "gaussian" {
        return Ok(Head::Gaussian);
    }
    if spec == "categorical" {
        return Ok(Head::Categorical { classes: 2 });
    }
    if let Some(c) = spec.strip_prefix("categorical:") {
        let classes = c.parse::<usize>().map_err(|_| Error::Usage(format!("bad class count '{c}'")))?;
        return Head::from_json(&format!(r#"{{"head":"categorical","classes":{classes}}}"#));
    }
    if spec.starts_with('{') {
        return Head::from_json(spec);
    }
    Head::from_json(&fs::read_to_string(spec)?)
}

/// Resolves `auto` to the dense solver when `d` fits, LiSSA otherwise.
pub fn auto_solver(num_params: usize, lissa: LissaConfig) -> SolverConfig {
    if num_params <= DENSE_CAP {
        SolverConfig::Dense
    } else {
        SolverConfig::Lissa(lissa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub passes: PassCounts,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method: String,
    pub seconds: f64,
}

/// Per-sample influence columns plus the selected sets (fairness).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tables {
    pub indices: Vec<usize>,
    pub columns: Vec<(String, Vec<f64>)>,
    pub selected: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub results: Vec<ExperimentResult>,
    pub timings: Vec<Timing>,
    pub tables: Tables,
    pub theta: Vec<f64>,
}

fn mean_grad(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; model.num_params()];
    for s in &data.samples {
        axpy(1.0 / data.len() as f64, &loss_grad(model, head, s, theta)?, &mut g);
    }
    Ok(g)
}

/// Runs the configured task.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let all = cfg.data.load(cfg.seed)?;
    cfg.head.check_dataset(&all)?;
    let (data, test) = if cfg.test_fraction > 0.0 {
        all.split(cfg.test_fraction, cfg.seed)?
    } else {
        (all, Dataset::new(Vec::new())?)
    };
    let model = Model::new(cfg.model.clone())?;
    if model.input_dim() != data.num_features() {
        return Err(Error::DimensionMismatch {
            what: "model input vs features".into(),
            expected: data.num_features(),
            got: model.input_dim(),
        });
    }
    let head = cfg.head;
    let n = data.len();

    let fit_start = Instant::now();
    let mut base = BTreeMap::new();
    let theta = match cfg.optimizer {
        Optimizer::Adamw => {
            let out = train(&model, &head, &data, &TrainConfig { seed: cfg.seed, ..cfg.train }, None)?;
            base.insert("train_loss_initial".to_string(), out.loss_curve[0]);
            out.theta
        }
        Optimizer::Full => retrain(
            &model,
            &head,
            &data,
            &WeightVector::all_ones(n),
            &cfg.reg,
            &model.init_params(cfg.seed),
            &RetrainConfig::default(),
        )?,
    };
    let fit_passes = model.counter().snapshot();
    let mut timings = vec![Timing { method: "fit".into(), seconds: fit_start.elapsed().as_secs_f64() }];
    base.insert("n".into(), n as f64);
    base.insert("num_params".into(), model.num_params() as f64);
    base.insert("train_loss".into(), mean_loss(&model, &head, &data, &theta, None)?);
    base.insert("ebar_n".into(), ebar_n(&model, &head, &data, &theta)?);
    base.insert("train_performance".into(), performance(&model, &head, &data, &theta)?);
    if !test.is_empty() {
        base.insert("test_loss".into(), mean_loss(&model, &head, &test, &theta, None)?);
        base.insert("test_performance".into(), performance(&model, &head, &test, &theta)?);
    }

    let mut results = Vec::new();
    let mut tables = Tables::default();
    if cfg.task == Task::Train {
        results.push(ExperimentResult {
            method: "train".into(),
            task: cfg.task,
            metrics: base,
            passes: fit_passes,
            seed: cfg.seed,
            config: cfg.clone(),
        });
        return Ok(ExperimentRun { results, timings, tables, theta });
    }

    // Method-independent references.
    let retrain_cfg = RetrainConfig::default();
    let k = cfg.k.unwrap_or(match cfg.task {
        Task::Cv => default_k(n),
        _ => 1,
    });
    let removed = if cfg.indices.is_empty() {
        sample_folds(n, k.min(n), 1, cfg.seed)?.remove(0)
    } else {
        cfg.indices.clone()
    };
    let scored: Vec<usize> = if cfg.indices.is_empty() { (0..n).collect() } else { cfg.indices.clone() };
    let mut reference = BTreeMap::new();
    let mut true_changes: Option<Vec<f64>> = None;
    if cfg.verify {
        match cfg.task {
            Task::Cv => {
                let e = exact_cv(&model, &head, &data, &cfg.reg, k, cfg.folds, cfg.seed, &theta, &retrain_cfg)?;
                reference.insert("exact_cv".to_string(), e.mean);
            }
            Task::Unlearn => {
                let w = WeightVector::leave_k_out(n, &removed)?;
                let r = retrain(&model, &head, &data, &w, &cfg.reg, &theta, &retrain_cfg)?;
                reference.insert("retrain_shift".to_string(), norm(&sub(&r, &theta)));
                true_changes = Some(r);
            }
            Task::Attribute => {
                let base_loss = mean_loss(&model, &head, &test, &theta, None)?;
                let changes = scored
                    .iter()
                    .map(|&i| {
                        let w = WeightVector::leave_one_out(n, i)?;
                        let r = retrain(&model, &head, &data, &w, &cfg.reg, &theta, &retrain_cfg)?;
                        Ok(mean_loss(&model, &head, &test, &r, None)? - base_loss)
                    })
                    .collect::<Result<Vec<_>>>()?;
                true_changes = Some(changes);
            }
            _ => {}
        }
    }

    let mut scores_by_method: Vec<Vec<f64>> = Vec::new();
    for kind in cfg.method.kinds() {
        model.counter().reset();
        let start = Instant::now();
        let icfg = InfluenceConfig::new(kind, cfg.reg)
            .with_solver(cfg.solver)
            .with_damping(cfg.damping)
            .with_weighting(cfg.weighting);
        let est = Estimator::new(&model, head, &data, &theta, icfg)?;
        let mut metrics = base.clone();
        metrics.extend(reference.clone());
        match cfg.task {
            Task::Train => unreachable!("handled above"),
            Task::Cv => {
                let a = acv(&est, k, cfg.folds, cfg.seed)?;
                metrics.insert("k".into(), k as f64);
                metrics.insert("folds".into(), cfg.folds as f64);
                metrics.insert("acv".into(), a.mean);
                metrics.insert("held_out_at_fit".into(), held_out_at_fit(&est, k, cfg.folds, cfg.seed)?.mean);
                if let Some(e) = reference.get("exact_cv") {
                    metrics.insert("acv_abs_error".into(), (a.mean - e).abs());
                }
            }
            Task::Unlearn => {
                let noise = match cfg.epsilon {
                    None => None,
                    Some(epsilon) => Some(NoiseRequest {
                        epsilon,
                        delta: cfg.delta.ok_or_else(|| Error::Usage("--epsilon needs --delta".into()))?,
                        constants: cfg
                            .constants
                            .clone()
                            .ok_or_else(|| Error::Usage("--epsilon needs --constants".into()))?,
                        seed: cfg.seed,
                    }),
                };
                let out = unlearn(&est, &UnlearnRequest { removed: removed.clone(), noise })?;
                metrics.insert("n_removed".into(), removed.len() as f64);
                metrics.insert("param_shift".into(), norm(&sub(&out.theta, &theta)));
                if let Some(c) = out.noise_scale {
                    metrics.insert("noise_scale".into(), c);
                }
                if let Some(r) = &true_changes {
                    metrics.insert("retrain_distance".into(), norm(&sub(&out.theta, r)));
                }
                tables.selected.push((kind.name().into(), removed.clone()));
            }
            Task::Attribute => {
                if test.is_empty() {
                    return Err(Error::Usage("attribution needs a test split (--test-fraction > 0)".into()));
                }
                let g = mean_grad(&model, &head, &test, &theta)?;
                let scores = est.removal_effects(&g, &scored)?;
                metrics.insert("max_score".into(), scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                metrics.insert("min_score".into(), scores.iter().cloned().fold(f64::INFINITY, f64::min));
                if let Some(truth) = &true_changes {
                    let agree = scores.iter().zip(truth).filter(|(s, t)| s.signum() == t.signum()).count();
                    metrics.insert("sign_agreement".into(), agree as f64 / scores.len() as f64);
                    if scores.len() >= 2 {
                        metrics.insert("spearman_vs_retrain".into(), spearman(&scores, truth)?);
                    }
                }
                tables.columns.push((kind.name().into(), scores.clone()));
                scores_by_method.push(scores);
            }
            Task::Fairness => {
                let out = fairness_pipeline(&est, &cfg.fairness)?;
                metrics.insert("metric_before".into(), out.metric_before);
                metrics.insert("metric_after".into(), out.metric_after);
                metrics.insert("performance_before".into(), out.perf_before);
                metrics.insert("performance_after".into(), out.perf_after);
                metrics.insert("n_removed".into(), out.selected.len() as f64);
                tables.columns.push((kind.name().into(), out.influence));
                tables.selected.push((kind.name().into(), out.selected));
            }
        }
        if est.auto_damping() > 0.0 {
            metrics.insert("auto_damping".into(), est.auto_damping());
        }
        timings.push(Timing { method: kind.name().into(), seconds: start.elapsed().as_secs_f64() });
        results.push(ExperimentResult {
            method: kind.name().into(),
            task: cfg.task,
            metrics,
            passes: model.counter().snapshot(),
            seed: cfg.seed,
            config: cfg.clone(),
        });
    }
    if scores_by_method.len() == 2 && scores_by_method[0].len() >= 2 {
        let rho = spearman(&scores_by_method[0], &scores_by_method[1])?;
        for r in &mut results {
            r.metrics.insert("spearman_fisher_hessian".into(), rho);
        }
    }
    tables.indices = if cfg.task == Task::Fairness { (0..n).collect() } else { scored };
    Ok(ExperimentRun { results, timings, tables, theta })
}

#[derive(Serialize, Deserialize)]
struct ResultFile {
    results: Vec<ExperimentResult>,
}

#[derive(Serialize)]
struct TimingFile<'a> {
    timings: &'a [Timing],
}

/// Writes `result.json`, `timing.json`, `theta.json`, `report.md` and, when
/// present, `influences.csv` and `selected.csv`.
pub fn write_outputs(run: &ExperimentRun, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let results = ResultFile { results: run.results.clone() };
    fs::write(out.join("result.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    fs::write(
        out.join("timing.json"),
        serde_json::to_string_pretty(&TimingFile { timings: &run.timings })? + "\n",
    )?;
    fs::write(out.join("theta.json"), serde_json::to_string(&run.theta)? + "\n")?;
    if !run.tables.columns.is_empty() {
        let mut w = csv::Writer::from_path(out.join("influences.csv"))?;
        let mut header = vec!["index".to_string()];
        header.extend(run.tables.columns.iter().map(|c| c.0.clone()));
        w.write_record(&header)?;
        for (row, idx) in run.tables.indices.iter().enumerate() {
            let mut rec = vec![idx.to_string()];
            rec.extend(run.tables.columns.iter().map(|c| format!("{:e}", c.1[row])));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    if !run.tables.selected.is_empty() {
        let mut w = csv::Writer::from_path(out.join("selected.csv"))?;
        w.write_record(["method", "index"])?;
        for (method, idx) in &run.tables.selected {
            for i in idx {
                w.write_record([method.as_str(), &i.to_string()])?;
            }
        }
        w.flush()?;
    }
    fs::write(out.join("report.md"), report(run))?;
    Ok(())
}

/// Markdown summary table: one row per method, one column per metric.
pub fn report(run: &ExperimentRun) -> String {
    let Some(first) = run.results.first() else {
        return String::new();
    };
    let keys: Vec<&String> = first.metrics.keys().collect();
    let mut s = format!("# {} ({})\n\n", first.task.name(), first.config.data.source);
    s.push_str("| method | fwd | rev | eval | seconds |");
    for k in &keys {
        s.push_str(&format!(" {k} |"));
    }
    s.push_str("\n|---|---|---|---|---|");
    s.push_str(&"---|".repeat(keys.len()));
    s.push('\n');
    for r in &run.results {
        let secs = run
            .timings
            .iter()
            .find(|t| t.method == r.method || (r.method == "train" && t.method == "fit"))
            .map(|t| format!("{:.3}", t.seconds))
            .unwrap_or_default();
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |",
            r.method, r.passes.forward_mode, r.passes.reverse_mode, r.passes.plain_forward, secs
        ));
        for k in &keys {
            s.push_str(&format!(" {} |", r.metrics.get(*k).map(|v| format!("{v:.6}")).unwrap_or_default()));
        }
        s.push('\n');
    }
    s
}

/// Reads the config snapshot of an existing `result.json`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let file: ResultFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.results
        .into_iter()
        .next()
        .map(|r| r.config)
        .ok_or_else(|| Error::InvalidInput(format!("{} has no results", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::fairness::FairnessMetric;

    pub(crate) fn small_config(task: Task) -> ExperimentConfig {
        ExperimentConfig {
            task,
            method: Method::Both,
            model: Architecture::linear(3, 2, true),
            head: Head::Categorical { classes: 2 },
            data: DataSpec {
                source: "synthetic:blobs:n=60,d=3,sep=1.5".into(),
                label: "y".into(),
                sensitive: None,
                categorical: vec![],
                standardize: true,
            },
            reg: Regularizer::L2(0.01),
            solver: SolverConfig::Dense,
            damping: 0.0,
            weighting: CurvatureWeighting::Full,
            seed: 3,
            optimizer: Optimizer::Full,
            train: TrainConfig::default(),
            test_fraction: 0.2,
            k: None,
            folds: 5,
            indices: vec![],
            epsilon: None,
            delta: None,
            constants: None,
            fairness: FairnessSpec::new(FairnessMetric::DemographicParity, 10).unwrap(),
            verify: false,
        }
    }

    #[test]
    fn config_round_trips_and_replays() {
        let cfg = small_config(Task::Cv);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&back).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.results.len(), 2);
        assert_eq!(a.results[0].method, "fisher");
        assert_eq!(a.results[1].method, "hessian");
    }

    #[test]
    fn model_and_head_specs() {
        let a = resolve_model("mlp:4,3:selu", 5, 2).unwrap();
        assert_eq!(a.num_params(), 5 * 4 + 4 + 4 * 3 + 3 + 3 * 2 + 2);
        assert!(resolve_model("mlp:x", 5, 2).is_err());
        assert_eq!(resolve_head("categorical:3").unwrap(), Head::Categorical { classes: 3 });
        assert_eq!(resolve_head("gaussian").unwrap(), Head::Gaussian);
        assert!("bogus".parse::<Task>().is_err());
    }
}
