//! Scenario configuration, report bundles and the validation battery.
//!
//! A scenario is one TOML file naming a model, a task, budgets and a master
//! seed. [`run_scenario`] is a pure function of the configuration: every
//! random stream is `derive_seed(master_seed, label, index)` and replica
//! results are gathered in index order before any aggregation.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::asymptotics::{
    clt_sigma, condition_diagnostics, crossing_moments, lyapunov, ser_f64, speed, AsymError, CltEstimate,
    CrossingMoments, RateEstimate, SpeedEstimate, SpeedEstimator, SERIES_TOL,
};
use crate::exitprob::{
    absorption_oracle_adaptive, compute_pi, left_exit, solve_eta, solve_eta_default, BurnIn, EtaSequence, MAX_TRUNCATION,
};
use crate::seeding::rng_for;
use crate::smallmat::{dot, SquareMat};
use crate::stats::{ks_standard_normal, ks_two_sample, lag1_autocorrelation, log_mean_exp, mean_stderr, sample_variance};
use crate::strip_env::{
    check_condition_c, persistent_walk_model, sample_window, EnvironmentModel, LayerTriple, ModelFile,
};
use crate::walker::{
    evfp_accumulate, extract_renewals, q_reference, renewals_are_valid, select_istar, simulate_growing, EvfpHistogram,
    IStarSelection, RenewalRecord, StartLaw, Stop, PI_MARGIN,
};

pub use crate::seeding::derive_seed;

/// Version of the JSON summary and CSV layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Step cap per excursion in the `Q` reference.
const EXCURSION_STEP_CAP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task {task} failed (model {model_hash}, master seed {master_seed}): {source}")]
    Task {
        task: &'static str,
        model_hash: String,
        master_seed: u64,
        #[source]
        source: AsymError,
    },
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classify,
    Speed,
    Moments,
    Lln,
    Clt,
    Renewal,
    Evfp,
    Validate,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Classify,
        Task::Speed,
        Task::Moments,
        Task::Lln,
        Task::Clt,
        Task::Renewal,
        Task::Evfp,
        Task::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Speed => "speed",
            Task::Moments => "moments",
            Task::Lln => "lln",
            Task::Clt => "clt",
            Task::Renewal => "renewal",
            Task::Evfp => "evfp",
            Task::Validate => "validate",
        }
    }

    /// Tasks that simulate or sum series rely on every structural condition.
    fn needs_conditions(self) -> bool {
        !matches!(self, Task::Classify | Task::Validate)
    }
}

impl std::str::FromStr for Task {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    #[default]
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            _ => Err(ExperimentError::Config(format!("unknown level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Independent walks for `lln`, `clt` hitting times and `evfp`.
    pub replicas: usize,
    /// Steps per walk for `lln`, `renewal`, and the start `n` of the `evfp`
    /// occupation window `[n, 2n)`.
    pub horizon: u64,
    pub chain_length: usize,
    pub lyapunov_replicas: usize,
    pub speed_estimator: SpeedEstimator,
    pub speed_samples: usize,
    /// Levels per replica in the CLT plug-in.
    pub clt_horizon: usize,
    pub clt_replicas: usize,
    pub lag_cap: Option<usize>,
    pub istar_budget: usize,
    pub guard: i64,
    pub radius: usize,
    pub excursions: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            replicas: 20,
            horizon: 100_000,
            chain_length: 10_000,
            lyapunov_replicas: 20,
            speed_estimator: SpeedEstimator::Ensemble,
            speed_samples: 2_000,
            clt_horizon: 2_000,
            clt_replicas: 200,
            lag_cap: None,
            istar_budget: 4_000,
            guard: 50,
            radius: 1,
            excursions: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative truncation tolerance for crossing-time series and `π`.
    pub series_tol: f64,
    /// Standard errors allowed between a walk average and its prediction.
    pub z_threshold: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            series_tol: SERIES_TOL,
            z_threshold: 3.0,
        }
    }
}

/// One scenario. Exactly one of `model`, `model_file` and `builtin_model`
/// names the environment law, except for `validate`, which uses none.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub task: Task,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin_model: Option<String>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl ScenarioConfig {
    pub fn new(task: Task, model: &EnvironmentModel, master_seed: u64) -> Self {
        ScenarioConfig {
            task,
            master_seed,
            output_dir: None,
            level: Level::Fast,
            model: Some(ModelFile::from(model)),
            model_file: None,
            builtin_model: None,
            budgets: Budgets::default(),
            tolerances: Tolerances::default(),
        }
    }

    /// Parses a TOML scenario; `task` overrides or supplies the task key.
    pub fn from_toml_str(text: &str, task: Option<Task>) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(t) = task {
            table.insert("task".into(), toml::Value::String(t.name().into()));
        }
        let config: ScenarioConfig = table.try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a scenario file; a relative `model_file` is taken relative to
    /// the scenario's directory.
    pub fn load(path: &Path, task: Option<Task>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text, task)?;
        if let (Some(f), Some(dir)) = (&config.model_file, path.parent()) {
            if f.is_relative() {
                config.model_file = Some(dir.join(f));
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let b = &self.budgets;
        let counts = [
            ("replicas", b.replicas),
            ("horizon", b.horizon as usize),
            ("chain_length", b.chain_length),
            ("lyapunov_replicas", b.lyapunov_replicas),
            ("speed_samples", b.speed_samples),
            ("clt_replicas", b.clt_replicas),
            ("istar_budget", b.istar_budget),
            ("guard", b.guard.max(0) as usize),
            ("radius", b.radius + 1),
            ("excursions", b.excursions),
            ("lag_cap", b.lag_cap.unwrap_or(1)),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ExperimentError::Config(format!("budget {name} must be positive")));
        }
        if b.clt_horizon < 2 {
            return Err(ExperimentError::Config("budget clt_horizon must be at least 2".into()));
        }
        if b.istar_budget < 2 {
            return Err(ExperimentError::Config("budget istar_budget must be at least 2".into()));
        }
        let t = &self.tolerances;
        if !(t.series_tol > 0.0) || !(t.z_threshold > 0.0) {
            return Err(ExperimentError::Config("tolerances must be positive".into()));
        }
        let sources = [self.model.is_some(), self.model_file.is_some(), self.builtin_model.is_some()];
        let n = sources.iter().filter(|s| **s).count();
        if self.task != Task::Validate && n != 1 {
            return Err(ExperimentError::Config(format!(
                "task {} needs exactly one of model, model_file, builtin_model ({n} given)",
                self.task.name()
            )));
        }
        Ok(())
    }

    pub fn resolve_model(&self) -> Result<EnvironmentModel, ExperimentError> {
        let cfg = |e: crate::strip_env::EnvError| ExperimentError::Config(e.to_string());
        if let Some(m) = &self.model {
            return m.clone().into_model().map_err(cfg);
        }
        if let Some(p) = &self.model_file {
            return EnvironmentModel::from_file(p).map_err(cfg);
        }
        if let Some(name) = &self.builtin_model {
            return builtin_model(name).ok_or_else(|| {
                ExperimentError::Config(format!("unknown builtin model {name:?}; known: {}", BUILTIN_MODELS.join(", ")))
            });
        }
        Err(ExperimentError::Config("no model given".into()))
    }
}

pub const BUILTIN_MODELS: [&str; 5] = ["scalar-biased", "scalar-two-point", "scalar-heavy-tail", "coupled-d2", "persistent-walk"];

/// Named reference models:
/// - `scalar-biased`: `d = 1`, `p = 2/3`, `q = 1/3`, `r = 0`;
/// - `scalar-two-point`: `d = 1`, `p ∈ {0.7, 0.8}` equally likely, `r = 0`;
/// - `scalar-heavy-tail`: `d = 1`, `p ∈ {0.35, 0.95}`, transient with
///   `E(q/p)² > 1`;
/// - `coupled-d2`: two-atom i.i.d. law on `d = 2` with full matrices;
/// - `persistent-walk`: the correlated walk on `ℤ` written as a strip.
pub fn builtin_model(name: &str) -> Option<EnvironmentModel> {
    match name {
        "scalar-biased" => Some(EnvironmentModel::homogeneous(LayerTriple::scalar(2.0 / 3.0, 0.0, 1.0 / 3.0).ok()?)),
        "scalar-two-point" => scalar_two_point(0.7, 0.8),
        "scalar-heavy-tail" => scalar_two_point(0.35, 0.95),
        "coupled-d2" => Some(coupled_d2()),
        "persistent-walk" => persistent_walk_model(0.8, 0.6).ok(),
        _ => None,
    }
}

fn scalar_two_point(p1: f64, p2: f64) -> Option<EnvironmentModel> {
    let atoms = vec![LayerTriple::scalar(p1, 0.0, 1.0 - p1).ok()?, LayerTriple::scalar(p2, 0.0, 1.0 - p2).ok()?];
    EnvironmentModel::iid(atoms, vec![0.5, 0.5]).ok()
}

fn coupled_d2() -> EnvironmentModel {
    let m = |rows: [[f64; 2]; 2]| SquareMat::from_rows(&[&rows[0], &rows[1]]).expect("2 x 2");
    let a = LayerTriple::new(
        m([[0.5, 0.15], [0.2, 0.45]]),
        m([[0.05, 0.05], [0.05, 0.05]]),
        m([[0.15, 0.1], [0.1, 0.15]]),
    )
    .expect("stochastic");
    let b = LayerTriple::new(
        m([[0.3, 0.1], [0.1, 0.25]]),
        m([[0.1, 0.1], [0.05, 0.1]]),
        m([[0.2, 0.2], [0.3, 0.2]]),
    )
    .expect("stochastic");
    EnvironmentModel::iid(vec![a, b], vec![0.7, 0.3]).expect("valid weights")
}

/// A value with its standard error and the budget that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    #[serde(serialize_with = "ser_f64")]
    pub value: f64,
    #[serde(serialize_with = "ser_f64")]
    pub stderr: f64,
    pub budget: String,
}

impl Estimate {
    fn new(value: f64, stderr: f64, budget: impl Into<String>) -> Self {
        Estimate {
            value,
            stderr,
            budget: budget.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFile {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub task: Task,
    pub summary: Value,
    pub files: Vec<DataFile>,
    /// False only for a validation run with failing rows.
    pub passed: bool,
}

impl ReportBundle {
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `summary.json` and the data files into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary_json())?;
        for f in &self.files {
            std::fs::write(dir.join(&f.name), &f.contents)?;
        }
        Ok(())
    }
}

struct Ctx {
    master_seed: u64,
    model_hash: String,
    streams: Vec<String>,
    files: Vec<DataFile>,
}

impl Ctx {
    fn seed(&mut self, label: &str) -> u64 {
        self.streams.push(label.to_string());
        derive_seed(self.master_seed, label, 0)
    }

    /// Adds a CSV file whose first line records the provenance of the run.
    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<(), AsymError> {
        let mut buf = format!(
            "# schema_version={SCHEMA_VERSION} master_seed={} model_hash={}\n",
            self.master_seed, self.model_hash
        )
        .into_bytes();
        write(&mut buf).map_err(|e| AsymError::Argument(format!("csv {name}: {e}")))?;
        self.files.push(DataFile {
            name: name.to_string(),
            contents: String::from_utf8(buf).expect("csv is utf-8"),
        });
        Ok(())
    }

    fn rows(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), AsymError> {
        self.csv(name, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        })
    }
}

/// Runs one scenario, writes the bundle when `output_dir` is set, and
/// returns it.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ReportBundle, ExperimentError> {
    config.validate()?;
    let (model, model_json) = if config.task == Task::Validate {
        (None, Value::Null)
    } else {
        let m = config.resolve_model()?;
        let j = json!({
            "hash": m.model_hash(),
            "kind": m.kind().name(),
            "d": m.d(),
            "atoms": m.support().len(),
            "encoding_note": m.encoding_note(),
            "definition": ModelFile::from(&m),
        });
        (Some(m), j)
    };
    let mut ctx = Ctx {
        master_seed: config.master_seed,
        model_hash: model.as_ref().map_or_else(|| "none".to_string(), |m| m.model_hash()),
        streams: Vec::new(),
        files: Vec::new(),
    };
    let wrap = |source: AsymError, hash: &str| ExperimentError::Task {
        task: config.task.name(),
        model_hash: hash.to_string(),
        master_seed: config.master_seed,
        source,
    };
    let mut passed = true;
    let results = match (&model, config.task) {
        (_, Task::Validate) => {
            let rows = validate_suite(config.level, config.master_seed);
            passed = rows.iter().all(|r| r.pass);
            ctx.rows(
                "validation.csv",
                &["id", "name", "pass", "achieved", "required", "inputs"],
                rows.iter().map(|r| {
                    vec![
                        r.id.to_string(),
                        r.name.clone(),
                        r.pass.to_string(),
                        r.achieved.clone(),
                        r.required.clone(),
                        r.inputs.clone(),
                    ]
                }),
            )
            .map_err(|e| wrap(e, "none"))?;
            json!({ "level": config.level, "all_pass": passed, "rows": rows })
        }
        (Some(m), task) => {
            if task.needs_conditions() {
                let report = check_condition_c(m);
                if !report.all_pass() {
                    return Err(wrap(AsymError::Rejected(report.failures.join("; ")), &ctx.model_hash));
                }
            }
            let hash = ctx.model_hash.clone();
            run_task(task, m, config, &mut ctx).map_err(|e| wrap(e, &hash))?
        }
        (None, _) => unreachable!("model resolved for every task but validate"),
    };
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "task": config.task,
        "master_seed": config.master_seed,
        "model": model_json,
        "budgets": config.budgets,
        "tolerances": config.tolerances,
        "streams": ctx.streams,
        "results": results,
        "files": ctx.files.iter().map(|f| f.name.clone()).collect::<Vec<_>>(),
    });
    let bundle = ReportBundle {
        task: config.task,
        summary,
        files: ctx.files,
        passed,
    };
    if let Some(dir) = &config.output_dir {
        bundle.write_to(dir)?;
    }
    Ok(bundle)
}

fn run_task(task: Task, model: &EnvironmentModel, config: &ScenarioConfig, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let b = &config.budgets;
    let tol = config.tolerances.series_tol;
    match task {
        Task::Classify => classify_task(model, b, ctx),
        Task::Speed => {
            let s = speed(model, b.speed_estimator, b.speed_samples, tol, ctx.seed("speed"))?;
            ctx.rows(
                "speed.csv",
                &["estimator", "samples", "v_p", "stderr", "mean_crossing", "mean_crossing_stderr"],
                [vec![
                    json!(s.estimator).as_str().unwrap_or_default().to_string(),
                    s.samples.to_string(),
                    s.v_p.to_string(),
                    s.stderr.to_string(),
                    s.mean_crossing.to_string(),
                    s.mean_crossing_stderr.to_string(),
                ]],
            )?;
            Ok(speed_json(&s))
        }
        Task::Moments => moments_task(model, tol, ctx),
        Task::Lln => lln_task(model, config, ctx),
        Task::Clt => clt_task(model, config, ctx),
        Task::Renewal => renewal_task(model, b, ctx),
        Task::Evfp => evfp_task(model, b, ctx),
        Task::Validate => unreachable!("handled by run_scenario"),
    }
}

fn speed_json(s: &SpeedEstimate) -> Value {
    let budget = format!("{} samples, {:?} estimator", s.samples, s.estimator).to_lowercase();
    json!({
        "v_p": Estimate::new(s.v_p, s.stderr, budget.clone()),
        "mean_crossing_time": Estimate::new(s.mean_crossing, s.mean_crossing_stderr, budget),
        "estimator": s.estimator,
    })
}

fn classify_task(model: &EnvironmentModel, b: &Budgets, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let cond = check_condition_c(model);
    let lyap = lyapunov(model, b.chain_length, b.lyapunov_replicas, ctx.seed("lyapunov"))?;
    let seq = solve_eta_default(&sample_window(model, -(PI_MARGIN), 64, ctx.seed("eta-window"))?)?;
    ctx.csv("eta_sequence.csv", |buf| seq.write_csv(buf))?;
    Ok(json!({
        "condition": cond,
        "lyapunov": Estimate::new(
            lyap.mean,
            lyap.stderr,
            format!("{} replicas x {} layers", lyap.replicas, lyap.chain_length),
        ),
        "degenerate_replicas": lyap.degenerate,
        "transience_verdict": lyap.verdict,
        "note": lyap.note,
    }))
}

/// Exit matrices on `[-L, 1]` with `L = 2^14 + 2`, enough for both the
/// series and the absorbing-chain oracle at layer 0.
fn moments_window_sequence(model: &EnvironmentModel, seed: u64) -> Result<EtaSequence, AsymError> {
    let window = sample_window(model, -(MAX_TRUNCATION as i64) - 2, 1, seed)?;
    Ok(solve_eta_default(&window)?)
}

fn moments_task(model: &EnvironmentModel, tol: f64, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let seq = moments_window_sequence(model, ctx.seed("moments-window"))?;
    let cm = crossing_moments(&seq, 0, tol)?;
    let oracle = absorption_oracle_adaptive(seq.window(), 1, 0)?;
    let pi = compute_pi(&seq, 0, tol)?;
    let d = model.d();
    let budget = format!("{} series terms", cm.truncation_depth);
    let rows: Vec<Vec<String>> = (0..d)
        .map(|i| {
            vec![
                (i + 1).to_string(),
                cm.u0[i].to_string(),
                cm.w0[i].to_string(),
                (cm.w0[i] - cm.u0[i] * cm.u0[i]).to_string(),
                oracle.mean_time[i].to_string(),
                oracle.second_moment_time[i].to_string(),
                pi.pi[i].to_string(),
            ]
        })
        .collect();
    ctx.rows("moments.csv", &["height", "u0", "w0", "variance", "oracle_u0", "oracle_w0", "pi"], rows)?;
    let dev_u = (0..d).map(|i| (cm.u0[i] - oracle.mean_time[i]).abs()).fold(0.0, f64::max);
    let dev_w = (0..d).map(|i| (cm.w0[i] - oracle.second_moment_time[i]).abs()).fold(0.0, f64::max);
    Ok(json!({
        "u0": cm.u0.iter().map(|&x| Estimate::new(x, cm.tail_bound, budget.clone())).collect::<Vec<_>>(),
        "w0": cm.w0.iter().map(|&x| Estimate::new(x, cm.tail_bound, budget.clone())).collect::<Vec<_>>(),
        "pi": pi.pi,
        "pi_mean_crossing": Estimate::new(dot(&pi.pi, &cm.u0), cm.tail_bound, budget.clone()),
        "pi_second_moment": Estimate::new(dot(&pi.pi, &cm.w0), cm.tail_bound, budget),
        "oracle_max_deviation_u0": dev_u,
        "oracle_max_deviation_w0": dev_w,
        "oracle_truncation_depth": oracle.truncation_depth,
        "window_seed": seq.window().seed(),
    }))
}

/// `ξ_n` of independent walks started from `π`, one environment each.
pub fn positions(model: &EnvironmentModel, steps: u64, replicas: usize, seed: u64) -> Result<Vec<i64>, AsymError> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut w = sample_window(model, -PI_MARGIN, 64, derive_seed(seed, "positions-env", k))?;
            let t = simulate_growing(&mut w, StartLaw::Pi, Stop::Horizon(steps), derive_seed(seed, "positions-walk", k))?;
            Ok(t.final_level())
        })
        .collect()
}

/// `T_level` of independent walks started from `π`; `step_cap` bounds each
/// walk.
pub fn hitting_times(model: &EnvironmentModel, level: i64, step_cap: u64, replicas: usize, seed: u64) -> Result<Vec<u64>, AsymError> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut w = sample_window(model, -PI_MARGIN, 64, derive_seed(seed, "hitting-env", k))?;
            let stop = Stop::LevelWithin { level, max_steps: step_cap };
            let t = simulate_growing(&mut w, StartLaw::Pi, stop, derive_seed(seed, "hitting-walk", k))?;
            t.hitting_time(level)
                .ok_or_else(|| AsymError::NotTransient(format!("level {level} not reached in {step_cap} steps")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlnRow {
    pub replica: usize,
    pub steps: u64,
    pub xi: i64,
    pub ratio: f64,
    /// `sqrt(σ_ξ² / n + se(v)²)`.
    pub combined_stderr: f64,
    pub z: f64,
}

/// `ξ_n / n` per replica against `v`, with the CLT scale and the error of
/// `v` combined in quadrature.
pub fn lln_rows(model: &EnvironmentModel, v: &SpeedEstimate, sigma2_xi: f64, steps: u64, replicas: usize, seed: u64) -> Result<Vec<LlnRow>, AsymError> {
    let xs = positions(model, steps, replicas, seed)?;
    let se = (sigma2_xi.max(0.0) / steps as f64 + v.stderr * v.stderr).sqrt();
    Ok(xs
        .into_iter()
        .enumerate()
        .map(|(k, xi)| {
            let ratio = xi as f64 / steps as f64;
            LlnRow {
                replica: k,
                steps,
                xi,
                ratio,
                combined_stderr: se,
                z: (ratio - v.v_p) / se,
            }
        })
        .collect())
}

fn clt_json(c: &CltEstimate) -> Value {
    let budget = format!("{} replicas x {} levels, lag cap {}", c.replicas, c.horizon, c.lag_cap);
    json!({
        "sigma2_t": Estimate::new(c.sigma2_t, c.sigma2_t_stderr, budget.clone()),
        "sigma2_xi": Estimate::new(c.sigma2_xi, c.sigma2_xi_stderr, budget),
        "nonpositive": c.nonpositive,
        "degenerate": c.degenerate,
    })
}

fn lln_task(model: &EnvironmentModel, config: &ScenarioConfig, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let b = &config.budgets;
    let v = speed(model, b.speed_estimator, b.speed_samples, config.tolerances.series_tol, ctx.seed("speed"))?;
    let clt = clt_sigma(model, v.v_p, b.clt_horizon, b.lag_cap, b.clt_replicas, ctx.seed("clt"))?;
    let rows = lln_rows(model, &v, clt.sigma2_xi, b.horizon, b.replicas, ctx.seed("lln"))?;
    ctx.rows(
        "lln.csv",
        &["replica", "steps", "xi", "ratio", "combined_stderr", "z"],
        rows.iter().map(|r| {
            vec![
                r.replica.to_string(),
                r.steps.to_string(),
                r.xi.to_string(),
                r.ratio.to_string(),
                r.combined_stderr.to_string(),
                r.z.to_string(),
            ]
        }),
    )?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let (m, se) = mean_stderr(&ratios);
    let within = rows.iter().filter(|r| r.z.abs() <= config.tolerances.z_threshold).count();
    Ok(json!({
        "speed": speed_json(&v),
        "clt": clt_json(&clt),
        "mean_ratio": Estimate::new(m, se, format!("{} replicas x {} steps", b.replicas, b.horizon)),
        "within_threshold": within,
        "replicas": rows.len(),
        "z_threshold": config.tolerances.z_threshold,
    }))
}

fn clt_task(model: &EnvironmentModel, config: &ScenarioConfig, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let b = &config.budgets;
    let v = speed(model, b.speed_estimator, b.speed_samples, config.tolerances.series_tol, ctx.seed("speed"))?;
    let clt = clt_sigma(model, v.v_p, b.clt_horizon, b.lag_cap, b.clt_replicas, ctx.seed("clt"))?;
    ctx.rows(
        "clt_lag_profile.csv",
        &["lag", "partial_sum"],
        clt.lag_profile.iter().enumerate().map(|(h, s)| vec![h.to_string(), s.to_string()]),
    )?;
    let n = b.clt_horizon as i64;
    let cap = (50.0 * n as f64 / v.v_p) as u64 + 100_000;
    let times = hitting_times(model, n, cap, b.replicas, ctx.seed("hitting"))?;
    let scaled: Vec<f64> = times.iter().map(|&t| (t as f64 - n as f64 / v.v_p) / (n as f64).sqrt()).collect();
    ctx.rows(
        "hitting_times.csv",
        &["replica", "level", "T", "scaled"],
        times.iter().zip(&scaled).enumerate().map(|(k, (t, z))| vec![k.to_string(), n.to_string(), t.to_string(), z.to_string()]),
    )?;
    let var = if scaled.len() > 1 { sample_variance(&scaled) } else { f64::NAN };
    let var_se = var * (2.0 / (scaled.len() as f64 - 1.0)).sqrt();
    let mut flags = Vec::new();
    if clt.nonpositive {
        flags.push("nonpositive plug-in variance");
    }
    if clt.degenerate {
        flags.push("degenerate crossing times");
    }
    Ok(json!({
        "speed": speed_json(&v),
        "clt": clt_json(&clt),
        "empirical_hitting_variance": Estimate::new(var, var_se, format!("{} replicas at level {n}", scaled.len())),
        "flags": flags,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenewalStats {
    pub renewals: usize,
    pub increments: usize,
    pub predicate_valid: bool,
    pub mean_dxi: Estimate,
    pub mean_drho: Estimate,
    /// `Σ Δξ / Σ Δρ`.
    #[serde(serialize_with = "ser_f64")]
    pub speed_ratio: f64,
    #[serde(serialize_with = "ser_f64")]
    pub lag1_dxi: f64,
    #[serde(serialize_with = "ser_f64")]
    pub lag1_drho: f64,
    /// First half against second half.
    #[serde(serialize_with = "ser_f64")]
    pub ks_p_dxi: f64,
    #[serde(serialize_with = "ser_f64")]
    pub ks_p_drho: f64,
}

pub fn renewal_stats(rec: &RenewalRecord, valid: bool) -> RenewalStats {
    let dxi: Vec<f64> = rec.increments.iter().map(|i| i.0 as f64).collect();
    let drho: Vec<f64> = rec.increments.iter().map(|i| i.1 as f64).collect();
    let budget = format!("{} increments", dxi.len());
    let (mx, sx) = mean_stderr(&dxi);
    let (mr, sr) = mean_stderr(&drho);
    let half = dxi.len() / 2;
    let ks = |xs: &[f64]| if half >= 2 { ks_two_sample(&xs[..half], &xs[half..]).1 } else { f64::NAN };
    RenewalStats {
        renewals: rec.renewals.len(),
        increments: dxi.len(),
        predicate_valid: valid,
        mean_dxi: Estimate::new(mx, sx, budget.clone()),
        mean_drho: Estimate::new(mr, sr, budget),
        speed_ratio: dxi.iter().sum::<f64>() / drho.iter().sum::<f64>(),
        lag1_dxi: lag1_autocorrelation(&dxi),
        lag1_drho: lag1_autocorrelation(&drho),
        ks_p_dxi: ks(&dxi),
        ks_p_drho: ks(&drho),
    }
}

/// Selects `i*`, runs one walk from `π` for `steps` steps and extracts its
/// renewals.
pub fn renewal_run(
    model: &EnvironmentModel,
    steps: u64,
    istar_budget: usize,
    guard: i64,
    seed: u64,
) -> Result<(IStarSelection, RenewalRecord, RenewalStats), AsymError> {
    let sel = select_istar(model, istar_budget, guard, derive_seed(seed, "istar", 0))?;
    let mut w = sample_window(model, -PI_MARGIN, 64, derive_seed(seed, "renewal-env", 0))?;
    let traj = simulate_growing(&mut w, StartLaw::Pi, Stop::Horizon(steps), derive_seed(seed, "renewal-walk", 0))?;
    let rec = extract_renewals(&traj, sel.i_star, guard);
    let valid = renewals_are_valid(&traj, &rec);
    let stats = renewal_stats(&rec, valid);
    Ok((sel, rec, stats))
}

fn renewal_task(model: &EnvironmentModel, b: &Budgets, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let (sel, rec, stats) = renewal_run(model, b.horizon, b.istar_budget, b.guard, ctx.seed("renewal"))?;
    ctx.csv("renewals.csv", |buf| rec.write_csv(buf))?;
    ctx.rows(
        "escape.csv",
        &["height", "escape", "stderr"],
        sel.escape.iter().zip(&sel.stderr).enumerate().map(|(i, (e, s))| vec![(i + 1).to_string(), e.to_string(), s.to_string()]),
    )?;
    Ok(json!({
        "i_star": sel.i_star + 1,
        "escape": sel.escape.iter().zip(&sel.stderr)
            .map(|(e, s)| Estimate::new(*e, *s, format!("{} walks, guard {}", sel.budget, sel.guard)))
            .collect::<Vec<_>>(),
        "steps": b.horizon,
        "statistics": stats,
    }))
}

/// Occupation counts over `[n, 2n)` of independent walks from `π`, merged
/// in replica order.
pub fn evfp_empirical(model: &EnvironmentModel, radius: usize, n: u64, replicas: usize, seed: u64) -> Result<EvfpHistogram, AsymError> {
    let hs = (0..replicas as u64)
        .into_par_iter()
        .map(|k| -> Result<EvfpHistogram, AsymError> {
            let mut w = sample_window(model, -PI_MARGIN, 64, derive_seed(seed, "evfp-env", k))?;
            let t = simulate_growing(&mut w, StartLaw::Pi, Stop::Horizon(2 * n), derive_seed(seed, "evfp-walk", k))?;
            let lo = t.xi.iter().copied().min().unwrap_or(0) - radius as i64;
            let hi = t.final_level().max(t.max_level()) + radius as i64 + 1;
            w.ensure_covers(lo, hi);
            Ok(evfp_accumulate(&t, &w, radius, n as usize..2 * n as usize)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hs.into_iter().fold(EvfpHistogram::new(radius), EvfpHistogram::merge))
}

fn evfp_task(model: &EnvironmentModel, b: &Budgets, ctx: &mut Ctx) -> Result<Value, AsymError> {
    let q = q_reference(model, b.radius, b.excursions, ctx.seed("q-reference"), EXCURSION_STEP_CAP)?;
    let h = evfp_empirical(model, b.radius, b.horizon, b.replicas, ctx.seed("evfp"))?;
    let tv = h.tv_distance(&q.histogram);
    ctx.csv("evfp_histogram.csv", |buf| h.write_csv(buf))?;
    ctx.csv("q_reference.csv", |buf| q.histogram.write_csv(buf))?;
    let both = h.clone().merge(q.histogram.clone());
    ctx.csv("signatures.csv", |buf| both.write_sidecar_csv(buf))?;
    Ok(json!({
        "radius": b.radius,
        "window": [b.horizon, 2 * b.horizon],
        "replicas": b.replicas,
        "excursions": q.replicas,
        "discarded_excursions": q.discarded,
        "empirical_counts": h.total,
        "reference_counts": q.histogram.total,
        "tv_distance": tv,
        "height_marginal": h.height_marginal(),
        "reference_height_marginal": q.histogram.height_marginal(),
    }))
}

// Validation battery.

pub const CRITERIA: [&str; 11] = [
    "exit-matrix oracle equivalence",
    "fixed-point uniqueness",
    "scalar closed forms",
    "law of large numbers",
    "hitting-time CLT",
    "variance transfer",
    "renewal independence",
    "environment seen from the walker",
    "left-exit decay",
    "condition diagnostics",
    "moment sanity",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub id: usize,
    pub name: String,
    pub pass: bool,
    pub achieved: String,
    pub required: String,
    pub inputs: String,
    /// Wall-clock time; left out of serialized output.
    #[serde(skip)]
    pub seconds: f64,
}

impl std::fmt::Display for ValidationRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: achieved {}; required {}; inputs {} ({:.1} s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.achieved,
            self.required,
            self.inputs,
            self.seconds
        )
    }
}

/// Budgets per level; thresholds are the same at both levels.
struct Scale {
    oracle_windows: usize,
    ensemble_draws: usize,
    lln_steps: u64,
    lln_speed_samples: usize,
    clt_levels: usize,
    clt_replicas: usize,
    variance_steps: u64,
    renewal_steps: u64,
    excursions: usize,
    left_exit_replicas: usize,
    pass_model_replicas: usize,
    fail_model_n_max: usize,
    fail_model_replicas: usize,
}

impl Scale {
    fn of(level: Level) -> Self {
        match level {
            Level::Fast => Scale {
                oracle_windows: 200,
                ensemble_draws: 20_000,
                lln_steps: 100_000,
                lln_speed_samples: 4_000,
                clt_levels: 2_000,
                clt_replicas: 1_000,
                variance_steps: 2_000,
                renewal_steps: 200_000,
                excursions: 20_000,
                left_exit_replicas: 500,
                pass_model_replicas: 1_000,
                fail_model_n_max: 10,
                fail_model_replicas: 20_000,
            },
            Level::Full => Scale {
                oracle_windows: 200,
                ensemble_draws: 100_000,
                lln_steps: 1_000_000,
                lln_speed_samples: 20_000,
                clt_levels: 10_000,
                clt_replicas: 1_000,
                variance_steps: 10_000,
                renewal_steps: 1_000_000,
                excursions: 100_000,
                left_exit_replicas: 2_000,
                pass_model_replicas: 2_000,
                fail_model_n_max: 12,
                fail_model_replicas: 100_000,
            },
        }
    }
}

struct Suite {
    seed: u64,
    scale: Scale,
    coupled: EnvironmentModel,
    reference: OnceLock<Result<(SpeedEstimate, CltEstimate), String>>,
}

struct Outcome {
    pass: bool,
    achieved: String,
    required: String,
    inputs: String,
}

impl Suite {
    fn stream(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }

    /// Speed and CLT plug-in of the coupled model, shared by the walk
    /// criteria.
    fn reference(&self) -> Result<&(SpeedEstimate, CltEstimate), String> {
        self.reference
            .get_or_init(|| {
                let s = &self.scale;
                let v = speed(&self.coupled, SpeedEstimator::Ensemble, s.lln_speed_samples, SERIES_TOL, self.stream("ref-speed"))
                    .map_err(|e| e.to_string())?;
                let c = clt_sigma(&self.coupled, v.v_p, s.clt_levels, None, s.clt_replicas, self.stream("ref-clt"))
                    .map_err(|e| e.to_string())?;
                Ok((v, c))
            })
            .as_ref()
            .map_err(Clone::clone)
    }
}

/// Rows of random letters: each row puts mass `p ∈ [0.35, 0.65]` on moving
/// up and a smaller mass on moving down, so every model drifts right.
fn random_letter(rng: &mut ChaCha8Rng, d: usize) -> LayerTriple {
    let mut m = [SquareMat::zeros(d), SquareMat::zeros(d), SquareMat::zeros(d)];
    for i in 0..d {
        let pm: f64 = rng.gen_range(0.35..0.65);
        let qm = rng.gen_range(0.1..(0.75 * pm).min(1.0 - pm - 0.02));
        for (k, mass) in [pm, 1.0 - pm - qm, qm].into_iter().enumerate() {
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            for j in 0..d {
                m[k][(i, j)] = mass * w[j] / s;
            }
        }
    }
    let [p, r, q] = m;
    LayerTriple::new(p, r, q).expect("rows sum to one")
}

/// An i.i.d. law on one to three random letters.
pub fn random_model(rng: &mut ChaCha8Rng, d: usize) -> EnvironmentModel {
    let k = rng.gen_range(1..=3);
    let atoms = (0..k).map(|_| random_letter(rng, d)).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    EnvironmentModel::iid(atoms, w.iter().map(|x| x / s).collect()).expect("valid weights")
}

fn fmt_err(e: impl std::fmt::Display) -> Outcome {
    Outcome {
        pass: false,
        achieved: format!("error: {e}"),
        required: String::new(),
        inputs: String::new(),
    }
}

fn oracle_equivalence(s: &Suite) -> Outcome {
    let n = s.scale.oracle_windows;
    let layers = [0i64, 10, 40];
    let devs: Result<Vec<f64>, String> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let d = 1 + (k % 4) as usize;
            let model = random_model(&mut rng_for(s.seed, "oracle-model", k), d);
            let window = sample_window(&model, -(MAX_TRUNCATION as i64) - 2, 48, derive_seed(s.seed, "oracle-env", k))
                .map_err(|e| e.to_string())?;
            let seq = solve_eta_default(&window).map_err(|e| e.to_string())?;
            let mut worst = 0.0f64;
            for &m in &layers {
                let oracle = absorption_oracle_adaptive(&window, m + 1, m).map_err(|e| format!("window {k}: {e}"))?;
                let eta = &seq.record(m).map_err(|e| e.to_string())?.eta;
                worst = worst.max(eta.max_abs_diff(&oracle.exit));
            }
            Ok(worst)
        })
        .collect();
    match devs {
        Err(e) => fmt_err(e),
        Ok(devs) => {
            let worst = devs.iter().copied().fold(0.0, f64::max);
            Outcome {
                pass: worst <= 1e-8,
                achieved: format!("max |eta - oracle| = {worst:.3e}"),
                required: "<= 1e-8".into(),
                inputs: format!("{n} random i.i.d. windows, d = 1..4, layers {layers:?}"),
            }
        }
    }
}

fn random_stochastic(rng: &mut ChaCha8Rng, d: usize) -> SquareMat {
    let mut m = SquareMat::zeros(d);
    for i in 0..d {
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = w.iter().sum();
        for j in 0..d {
            m[(i, j)] = w[j] / s;
        }
    }
    m
}

fn fixed_point_uniqueness(s: &Suite) -> Outcome {
    let n = 50u64;
    let res: Result<Vec<(f64, bool)>, String> = (0..n)
        .into_par_iter()
        .map(|k| {
            let d = 1 + (k % 4) as usize;
            let mut rng = rng_for(s.seed, "uniqueness-model", k);
            let model = random_model(&mut rng, d);
            let other = random_stochastic(&mut rng, d);
            let window = sample_window(&model, -4096, 64, derive_seed(s.seed, "uniqueness-env", k)).map_err(|e| e.to_string())?;
            let a = solve_eta(&window, BurnIn::Adaptive, &SquareMat::uniform_stochastic(d)).map_err(|e| e.to_string())?;
            let b = solve_eta(&window, BurnIn::Adaptive, &other).map_err(|e| e.to_string())?;
            let from = a.first_index().max(b.first_index());
            let mut worst = 0.0f64;
            for m in from..=a.last_index() {
                let (ra, rb) = (a.record(m).map_err(|e| e.to_string())?, b.record(m).map_err(|e| e.to_string())?);
                worst = worst.max(ra.eta.max_abs_diff(&rb.eta));
            }
            Ok((worst, a.burn_in_certified() && b.burn_in_certified()))
        })
        .collect();
    match res {
        Err(e) => fmt_err(e),
        Ok(v) => {
            let worst = v.iter().map(|x| x.0).fold(0.0, f64::max);
            let certified = v.iter().filter(|x| x.1).count();
            Outcome {
                pass: worst <= 1e-10,
                achieved: format!("max deviation {worst:.3e}; {certified}/{n} burn-ins certified"),
                required: "<= 1e-10 after adaptive burn-in".into(),
                inputs: format!("{n} random windows [-4096, 64], uniform vs random stochastic seed matrix"),
            }
        }
    }
}

fn scalar_closed_forms(s: &Suite) -> Outcome {
    let run = || -> Result<Outcome, AsymError> {
        let biased = builtin_model("scalar-biased").expect("builtin");
        let lyap = lyapunov(&biased, 1_000, 4, s.stream("closed-lyapunov"))?;
        let v = speed(&biased, SpeedEstimator::Ensemble, 16, SERIES_TOL, s.stream("closed-speed"))?;
        let seq = moments_window_sequence(&biased, s.stream("closed-moments"))?;
        let cm: CrossingMoments = crossing_moments(&seq, 0, SERIES_TOL)?;
        let two = builtin_model("scalar-two-point").expect("builtin");
        let v2 = speed(&two, SpeedEstimator::Ensemble, s.scale.ensemble_draws, SERIES_TOL, s.stream("closed-two-point"))?;
        let dl = (lyap.mean + 2f64.ln()).abs();
        let dv = (v.v_p - 1.0 / 3.0).abs();
        let du = (cm.u0[0] - 3.0).abs();
        let dw = (cm.w0[0] - 33.0).abs();
        let exact2 = 37.0 / 75.0;
        let dv2 = (v2.v_p - exact2).abs();
        Ok(Outcome {
            pass: dl <= 1e-12 && dv <= 1e-12 && du <= 1e-9 && dw <= 1e-9 && dv2 <= 1e-3,
            achieved: format!(
                "|lambda + ln 2| = {dl:.1e}, |v - 1/3| = {dv:.1e}, |u0 - 3| = {du:.1e}, |w0 - 33| = {dw:.1e}, two-point v = {:.6} (se {:.1e}, |dev| {dv2:.1e})",
                v2.v_p, v2.stderr
            ),
            required: "1e-12, 1e-12, 1e-9, 1e-9; two-point |v - 37/75| <= 1e-3".into(),
            inputs: format!(
                "homogeneous p = 2/3, q = 1/3; i.i.d. p in {{0.7, 0.8}} with {} ensemble draws",
                s.scale.ensemble_draws
            ),
        })
    };
    run().unwrap_or_else(fmt_err)
}

fn law_of_large_numbers(s: &Suite) -> Outcome {
    let (v, clt) = match s.reference() {
        Ok(r) => r,
        Err(e) => return fmt_err(e),
    };
    let steps = s.scale.lln_steps;
    match lln_rows(&s.coupled, v, clt.sigma2_xi, steps, 20, s.stream("lln")) {
        Err(e) => fmt_err(e),
        Ok(rows) => {
            let within = rows.iter().filter(|r| r.z.abs() <= 3.0).count();
            let worst = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
            Outcome {
                pass: within >= 18,
                achieved: format!("{within}/20 seeds within 3 se (max |z| {worst:.2}); v = {:.5} +- {:.1e}", v.v_p, v.stderr),
                required: ">= 18 of 20 seeds with |xi_n/n - v| <= 3 combined se".into(),
                inputs: format!("coupled d = 2 model, n = {steps}, v from {} ensemble draws", v.samples),
            }
        }
    }
}

fn hitting_time_clt(s: &Suite) -> Outcome {
    let run = || -> Result<Outcome, AsymError> {
        let n = s.scale.clt_levels as i64;
        let reps = s.scale.clt_replicas;
        let biased = builtin_model("scalar-biased").expect("builtin");
        let t1 = hitting_times(&biased, n, 200 * n as u64, reps, s.stream("clt-scalar"))?;
        let z: Vec<f64> = t1.iter().map(|&t| (t as f64 - 3.0 * n as f64) / (24.0 * n as f64).sqrt()).collect();
        let (ks_d, ks_p) = ks_standard_normal(&z);
        let (v, clt) = s.reference().map_err(AsymError::Argument)?;
        let cap = (50.0 * n as f64 / v.v_p) as u64 + 100_000;
        let t2 = hitting_times(&s.coupled, n, cap, reps, s.stream("clt-coupled"))?;
        let scaled: Vec<f64> = t2.iter().map(|&t| (t as f64 - n as f64 / v.v_p) / (n as f64).sqrt()).collect();
        let emp = sample_variance(&scaled);
        let rel = (emp / clt.sigma2_t - 1.0).abs();
        Ok(Outcome {
            pass: ks_p > 0.01 && rel <= 0.15,
            achieved: format!(
                "scalar KS D = {ks_d:.4}, p = {ks_p:.3}; coupled Var = {emp:.2} vs sigma2 = {:.2} +- {:.2} (rel {rel:.3})",
                clt.sigma2_t, clt.sigma2_t_stderr
            ),
            required: "KS p > 0.01; relative deviation <= 0.15".into(),
            inputs: format!("n = {n}, {reps} replicas each; plug-in with {} replicas x {} levels", clt.replicas, clt.horizon),
        })
    };
    run().unwrap_or_else(fmt_err)
}

fn variance_transfer(s: &Suite) -> Outcome {
    let run = || -> Result<Outcome, AsymError> {
        let (v, clt) = s.reference().map_err(AsymError::Argument)?;
        let n = s.scale.variance_steps;
        let reps = s.scale.clt_replicas;
        let xs = positions(&s.coupled, n, reps, s.stream("variance-transfer"))?;
        let scaled: Vec<f64> = xs.iter().map(|&x| (x as f64 - n as f64 * v.v_p) / (n as f64).sqrt()).collect();
        let emp = sample_variance(&scaled);
        let rel = (emp / clt.sigma2_xi - 1.0).abs();
        Ok(Outcome {
            pass: rel <= 0.15,
            achieved: format!("Var = {emp:.4} vs sigma2 v^3 = {:.4} (rel {rel:.3})", clt.sigma2_xi),
            required: "relative deviation <= 0.15".into(),
            inputs: format!("coupled d = 2 model, n = {n} steps, {reps} replicas"),
        })
    };
    run().unwrap_or_else(fmt_err)
}

fn renewal_independence(s: &Suite) -> Outcome {
    let steps = s.scale.renewal_steps;
    match renewal_run(&s.coupled, steps, 4_000, 50, s.stream("renewal")) {
        Err(e) => fmt_err(e),
        Ok((sel, _, st)) => {
            let k = st.increments as f64;
            let bound = 3.0 / k.sqrt();
            let pass = st.increments >= 20
                && st.predicate_valid
                && st.lag1_dxi.abs() <= bound
                && st.lag1_drho.abs() <= bound
                && st.ks_p_dxi > 0.01
                && st.ks_p_drho > 0.01;
            Outcome {
                pass,
                achieved: format!(
                    "K = {}, lag-1 ({:.4}, {:.4}), KS p ({:.3}, {:.3}), predicate re-scan {}",
                    st.increments,
                    st.lag1_dxi,
                    st.lag1_drho,
                    st.ks_p_dxi,
                    st.ks_p_drho,
                    if st.predicate_valid { "ok" } else { "failed" }
                ),
                required: format!("|lag-1| <= 3/sqrt(K) = {bound:.4}; KS p > 0.01 for d_xi and d_rho"),
                inputs: format!("coupled d = 2 model, {steps} steps, i* = {}, guard 50", sel.i_star + 1),
            }
        }
    }
}

fn environment_from_walker(s: &Suite) -> Outcome {
    let run = || -> Result<Outcome, AsymError> {
        let q = q_reference(&s.coupled, 1, s.scale.excursions, s.stream("evfp-reference"), EXCURSION_STEP_CAP)?;
        let top = 10_000u64;
        let replicas = (q.histogram.total as usize).div_ceil(top as usize).max(1);
        let tv = [100u64, 1_000, top]
            .into_iter()
            .map(|n| Ok(evfp_empirical(&s.coupled, 1, n, replicas, s.stream("evfp-walks"))?.tv_distance(&q.histogram)))
            .collect::<Result<Vec<f64>, AsymError>>()?;
        Ok(Outcome {
            pass: tv[2] <= 0.05 && tv[0] > tv[1] && tv[1] > tv[2],
            achieved: format!("TV at n = 1e2, 1e3, 1e4: {:.4}, {:.4}, {:.4}", tv[0], tv[1], tv[2]),
            required: "TV(1e4) <= 0.05 and strictly decreasing".into(),
            inputs: format!(
                "coupled d = 2 model, radius 1, {} excursions ({} discarded), {replicas} walks per n over [n, 2n)",
                q.replicas, q.discarded
            ),
        })
    };
    run().unwrap_or_else(fmt_err)
}

fn left_exit_decay(s: &Suite) -> Outcome {
    let n_max = 20usize;
    let reps = s.scale.left_exit_replicas;
    let rows: Result<Vec<Vec<f64>>, String> = (0..reps as u64)
        .into_par_iter()
        .map(|k| {
            let w = sample_window(&s.coupled, -(n_max as i64) - 1, 4096, derive_seed(s.seed, "left-exit", k)).map_err(|e| e.to_string())?;
            let le = left_exit(&w, 0, n_max).map_err(|e| e.to_string())?;
            let mut prod = SquareMat::identity(2);
            Ok(le
                .chain
                .iter()
                .map(|m| {
                    prod = prod.mul(m);
                    prod.norm().ln()
                })
                .collect())
        })
        .collect();
    match rows {
        Err(e) => fmt_err(e),
        Ok(rows) => {
            let logs = (0..n_max).map(|j| log_mean_exp(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
            let rate = RateEstimate::from_log_means(logs);
            Outcome {
                pass: rate.pass,
                achieved: format!("slope {:.4} +- {:.4}", rate.rate, rate.stderr),
                required: "slope + 3 se < 0".into(),
                inputs: format!("coupled d = 2 model, n = 1..{n_max}, {reps} environments"),
            }
        }
    }
}

/// Exact verdict for a scalar i.i.d. law: the first and second moment rates
/// are `ln E ρ` and `ln E ρ²` with `ρ = q/p`; the contraction term vanishes.
fn scalar_exact_pass(model: &EnvironmentModel) -> bool {
    let w = model.stationary();
    let moment = |k: i32| -> f64 {
        model
            .support()
            .iter()
            .zip(w)
            .map(|(t, wi)| wi * (t.q()[(0, 0)] / t.p()[(0, 0)]).powi(k))
            .sum()
    };
    moment(1) < 1.0 && moment(2) < 1.0
}

fn condition_diagnostics_row(s: &Suite) -> Outcome {
    let run = || -> Result<Outcome, AsymError> {
        let pass_model = condition_diagnostics(&s.coupled, 20, s.scale.pass_model_replicas, s.stream("diag-pass"))?;
        let heavy = builtin_model("scalar-heavy-tail").expect("builtin");
        let fail_model = condition_diagnostics(&heavy, s.scale.fail_model_n_max, s.scale.fail_model_replicas, s.stream("diag-fail"))?;
        let mild = scalar_two_point(0.51, 0.9).expect("valid");
        let mild_replicas = 10 * s.scale.pass_model_replicas;
        let mild_diag = condition_diagnostics(&mild, s.scale.fail_model_n_max, mild_replicas, s.stream("diag-mild"))?;
        let ok = pass_model.all_pass()
            && !fail_model.second_moment.pass
            && fail_model.all_pass() == scalar_exact_pass(&heavy)
            && mild_diag.all_pass() == scalar_exact_pass(&mild);
        let r = |d: &RateEstimate| format!("{:.3}", d.rate);
        Ok(Outcome {
            pass: ok,
            achieved: format!(
                "coupled rates ({}, {}, {}) all_pass {}; p in {{0.35, 0.95}} second-moment rate {} pass {}; p in {{0.51, 0.9}} all_pass {} (exact {})",
                r(&pass_model.first_moment),
                r(&pass_model.second_moment),
                r(&pass_model.contraction),
                pass_model.all_pass(),
                r(&fail_model.second_moment),
                fail_model.second_moment.pass,
                mild_diag.all_pass(),
                scalar_exact_pass(&mild)
            ),
            required: "coupled model passes all; heavy-tail model fails the second-moment rate; scalar verdicts match exact moments".into(),
            inputs: format!(
                "coupled d = 2 with n_max 20 x {} replicas; heavy-tail scalar with n_max {} x {} replicas; mild scalar with {mild_replicas} replicas",
                s.scale.pass_model_replicas, s.scale.fail_model_n_max, s.scale.fail_model_replicas
            ),
        })
    };
    run().unwrap_or_else(fmt_err)
}

fn moment_sanity(s: &Suite) -> Outcome {
    let n = 500u64;
    let res: Result<Vec<(f64, f64)>, String> = (0..n)
        .into_par_iter()
        .map(|k| {
            let d = 1 + (k % 4) as usize;
            let model = random_model(&mut rng_for(s.seed, "moments-model", k), d);
            let w = sample_window(&model, -2048, 1, derive_seed(s.seed, "moments-env", k)).map_err(|e| e.to_string())?;
            let seq = solve_eta_default(&w).map_err(|e| e.to_string())?;
            let cm = crossing_moments(&seq, 0, SERIES_TOL).map_err(|e| format!("input {k}: {e}"))?;
            let ratio = cm.u0.iter().zip(&cm.w0).map(|(u, w)| w / (u * u)).fold(f64::INFINITY, f64::min);
            let umin = cm.u0.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((ratio, umin))
        })
        .collect();
    match res {
        Err(e) => fmt_err(e),
        Ok(v) => {
            let ratio = v.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
            let umin = v.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            Outcome {
                pass: ratio >= 1.0 - 1e-12 && umin >= 1.0 - 1e-12,
                achieved: format!("min w0/u0^2 = {ratio:.6}, min u0 = {umin:.6}"),
                required: "w0 >= u0^2 and u0 >= 1 entrywise (relative rounding 1e-12)".into(),
                inputs: format!("{n} random i.i.d. windows [-2048, 1], d = 1..4"),
            }
        }
    }
}

type Check = fn(&Suite) -> Outcome;

const CHECKS: [Check; 11] = [
    oracle_equivalence,
    fixed_point_uniqueness,
    scalar_closed_forms,
    law_of_large_numbers,
    hitting_time_clt,
    variance_transfer,
    renewal_independence,
    environment_from_walker,
    left_exit_decay,
    condition_diagnostics_row,
    moment_sanity,
];

fn suite(level: Level, master_seed: u64) -> Suite {
    Suite {
        seed: master_seed,
        scale: Scale::of(level),
        coupled: coupled_d2(),
        reference: OnceLock::new(),
    }
}

fn run_check(s: &Suite, id: usize) -> ValidationRow {
    let start = Instant::now();
    let o = CHECKS[id - 1](s);
    ValidationRow {
        id,
        name: CRITERIA[id - 1].to_string(),
        pass: o.pass,
        achieved: o.achieved,
        required: o.required,
        inputs: o.inputs,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// One criterion on its own; `id` runs from 1 to 11.
pub fn run_criterion(id: usize, level: Level, master_seed: u64) -> ValidationRow {
    assert!((1..=CRITERIA.len()).contains(&id), "criterion {id} out of range");
    run_check(&suite(level, master_seed), id)
}

/// Every criterion in order; `on_row` sees each row as soon as it is done.
pub fn validate_suite_with(level: Level, master_seed: u64, mut on_row: impl FnMut(&ValidationRow)) -> Vec<ValidationRow> {
    let s = suite(level, master_seed);
    (1..=CRITERIA.len())
        .map(|id| {
            let row = run_check(&s, id);
            on_row(&row);
            row
        })
        .collect()
}

pub fn validate_suite(level: Level, master_seed: u64) -> Vec<ValidationRow> {
    validate_suite_with(level, master_seed, |_| {})
}
