//! Configuration-driven Monte Carlo experiments.
//!
//! Every run draws one scenario and feeds the identical scenario to each
//! method, so method comparisons are paired. All randomness is derived from
//! the master seed, which makes every output byte reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{centralized_gibbs_step, PooledMeasurements};
use crate::ep::{
    run_ep_timestep, CavityPolicy, CommScheme, EpConfig, GlobalPolicy, IterationDiagnostic, Schedule,
    TimestepInput,
};
use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::gibbs::GibbsConfig;
use crate::metrics::{aggregate, gospa, Aggregate, GospaConfig, RunMetrics};
use crate::model::{predict_prior, ModelParams, Scenario};
use crate::network::CommEvent;
use crate::rng::derive_seed;

pub const RESULTS_SCHEMA: &str = "# eptrack results schema v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// EP with full exchange of sites.
    Dep,
    /// EP with a single flooding round per iteration.
    DepF,
    /// EP with flooding until every node agrees.
    DepFc,
    /// Centralised Gibbs with the given total number of sweeps.
    CGibbs(usize),
}

impl Method {
    fn tag(self) -> u64 {
        match self {
            Method::Dep => 1,
            Method::DepF => 2,
            Method::DepFc => 3,
            Method::CGibbs(n) => 1000 + n as u64,
        }
    }

    fn scheme(self) -> Option<CommScheme> {
        match self {
            Method::Dep => Some(CommScheme::FullExchange),
            Method::DepF => Some(CommScheme::FloodOnce),
            Method::DepFc => Some(CommScheme::FloodConsensus),
            Method::CGibbs(_) => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Dep => write!(f, "DEP"),
            Method::DepF => write!(f, "DEP-F"),
            Method::DepFc => write!(f, "DEP-FC"),
            Method::CGibbs(n) => write!(f, "C-Gibbs{n}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "DEP" => Ok(Method::Dep),
            "DEP-F" => Ok(Method::DepF),
            "DEP-FC" => Ok(Method::DepFc),
            _ => s
                .strip_prefix("C-Gibbs")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(Method::CGibbs)
                .ok_or_else(|| format!("unknown method `{s}` (expected DEP, DEP-F, DEP-FC or C-Gibbs<sweeps>)")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    runs: usize,
    steps: usize,
    seed: u64,
    methods: Vec<String>,
    #[serde(default)]
    write_scenarios: bool,
    #[serde(default)]
    record_timing: bool,
    #[serde(default)]
    diagnostics: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGibbs {
    #[serde(default = "default_sweeps")]
    total_sweeps: usize,
    #[serde(default = "default_burn_in")]
    burn_in: usize,
    #[serde(default = "default_burn_in")]
    cgibbs_burn_in: usize,
}

fn default_sweeps() -> usize {
    60
}

fn default_burn_in() -> usize {
    10
}

impl Default for RawGibbs {
    fn default() -> Self {
        Self {
            total_sweeps: default_sweeps(),
            burn_in: default_burn_in(),
            cgibbs_burn_in: default_burn_in(),
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawEp {
    max_iterations: Option<usize>,
    damping: Option<f64>,
    invalid_cavity: Option<CavityPolicy>,
    indefinite_global: Option<GlobalPolicy>,
    schedule: Option<Schedule>,
    #[serde(default)]
    method_max_iterations: BTreeMap<String, usize>,
}

impl RawEp {
    fn base(&self) -> EpConfig {
        let d = EpConfig::default();
        EpConfig {
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            damping: self.damping.unwrap_or(d.damping),
            invalid_cavity: self.invalid_cavity.unwrap_or(d.invalid_cavity),
            indefinite_global: self.indefinite_global.unwrap_or(d.indefinite_global),
            schedule: self.schedule.unwrap_or(d.schedule),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: RawExperiment,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    gibbs: RawGibbs,
    #[serde(default)]
    ep: RawEp,
    #[serde(default)]
    gospa: GospaConfig,
    output: Option<RawOutput>,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub model: ModelParams,
    /// Sweep settings for the per-sensor samplers (seed is derived per use).
    pub gibbs: GibbsConfig,
    pub cgibbs_burn_in: usize,
    pub ep: EpConfig,
    pub method_max_iterations: BTreeMap<Method, usize>,
    pub gospa: GospaConfig,
    pub output_dir: PathBuf,
    pub write_scenarios: bool,
    /// Wall-clock timing breaks byte-for-byte reproducibility, so it is opt-in.
    pub record_timing: bool,
    pub diagnostics: bool,
}

/// Preset model with any `[model]` keys laid over it.
fn resolve_model(table: &toml::Table) -> Result<ModelParams> {
    let preset = match table.get("preset") {
        None => None,
        Some(toml::Value::String(name)) => Some(
            ModelParams::preset(name)
                .ok_or_else(|| Error::config("model.preset", format!("unknown preset `{name}`")))?,
        ),
        Some(_) => return Err(Error::config("model.preset", "must be a string")),
    };
    let mut merged = match preset {
        Some(p) => toml::Table::try_from(&p).map_err(|e| Error::config("model", e.to_string()))?,
        None => toml::Table::new(),
    };
    for (key, value) in table {
        if key != "preset" {
            merged.insert(key.clone(), value.clone());
        }
    }
    let params: ModelParams = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("model", e.message().to_string()))?;
    params.validate()?;
    Ok(params)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        let model = resolve_model(&raw.model)?;

        let methods = raw
            .experiment
            .methods
            .iter()
            .map(|m| m.parse::<Method>().map_err(|e| Error::config("experiment.methods", e)))
            .collect::<Result<Vec<_>>>()?;
        let method_max_iterations = raw
            .ep
            .method_max_iterations
            .iter()
            .map(|(name, &iters)| {
                let path = format!("ep.method_max_iterations.{name}");
                let method = name.parse::<Method>().map_err(|e| Error::config(&path, e))?;
                if method.scheme().is_none() {
                    return Err(Error::config(path, "only EP methods take an iteration count"));
                }
                if iters == 0 {
                    return Err(Error::config(path, "must be at least 1"));
                }
                Ok((method, iters))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;

        let cfg = Self {
            runs: raw.experiment.runs,
            steps: raw.experiment.steps,
            seed: raw.experiment.seed,
            methods,
            model,
            gibbs: GibbsConfig {
                total_sweeps: raw.gibbs.total_sweeps,
                burn_in: raw.gibbs.burn_in,
                seed: 0,
            },
            cgibbs_burn_in: raw.gibbs.cgibbs_burn_in,
            ep: raw.ep.base(),
            method_max_iterations,
            gospa: raw.gospa,
            output_dir: raw.output.map_or_else(|| PathBuf::from("results"), |o| o.dir),
            write_scenarios: raw.experiment.write_scenarios,
            record_timing: raw.experiment.record_timing,
            diagnostics: raw.experiment.diagnostics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("experiment.runs", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("experiment.steps", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("experiment.methods", "must list at least one method"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config("experiment.methods", format!("`{m}` is listed twice")));
            }
            if let Method::CGibbs(n) = m {
                if *n <= self.cgibbs_burn_in {
                    return Err(Error::config(
                        "gibbs.cgibbs_burn_in",
                        format!("must be below the sweep count of `{m}`"),
                    ));
                }
            }
        }
        self.gibbs.validate()?;
        self.ep.validate()?;
        self.gospa.validate()?;
        self.model.validate()
    }

    pub fn max_iterations(&self, method: Method) -> usize {
        self.method_max_iterations
            .get(&method)
            .copied()
            .unwrap_or(self.ep.max_iterations)
    }

    pub fn scenario_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, &[0, run as u64])
    }

    pub fn scenario(&self, run: usize) -> Result<Scenario> {
        Scenario::generate(&self.model, self.steps, self.scenario_seed(run))
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub run: usize,
    pub method: String,
    pub step: usize,
    pub sensor: usize,
    pub gospa: f64,
    pub loc: f64,
    pub missed: f64,
    #[serde(rename = "false")]
    pub false_targets: f64,
    pub ci: usize,
    pub wall_ms: f64,
}

/// Everything one method produced on one scenario.
#[derive(Debug, Clone, Default)]
pub struct MethodRun {
    pub records: Vec<ResultsRecord>,
    /// Communication rounds per step.
    pub ci: Vec<usize>,
    pub diagnostics: Vec<IterationDiagnostic>,
    pub comm: Vec<CommEvent>,
}

impl MethodRun {
    pub fn metrics(&self) -> RunMetrics {
        RunMetrics {
            gospa: self.records.iter().map(|r| r.gospa).collect(),
            ci: self.ci.clone(),
        }
    }
}

fn positions(beliefs: &[GaussianBelief]) -> Vec<[f64; 2]> {
    beliefs.iter().map(|b| [b.mean[0], b.mean[2]]).collect()
}

/// Tracks `scenario` with `method` and scores every sensor at every step.
pub fn run_method(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    method: Method,
    run: usize,
) -> Result<MethodRun> {
    let dynamics = scenario.params.dynamics();
    let sensors = scenario.params.sensors();
    let num_sensors = sensors.len();
    let method_seed = derive_seed(cfg.seed, &[1, run as u64, method.tag()]);
    let ep = EpConfig {
        max_iterations: cfg.max_iterations(method),
        ..cfg.ep
    };
    let mut posteriors = vec![scenario.initial_prior(); num_sensors];
    let mut out = MethodRun::default();

    for step in 0..scenario.steps {
        let started = Instant::now();
        let gibbs_seed = derive_seed(method_seed, &[step as u64]);
        let ci = match method.scheme() {
            Some(scheme) => {
                let priors: Vec<_> = posteriors.iter().map(|p| predict_prior(p, &dynamics)).collect();
                let graph = scenario.topology.graph(step);
                let input = TimestepInput {
                    step,
                    priors: &priors,
                    measurements: &scenario.measurements[step],
                    sensors: &sensors,
                    graph: &graph,
                };
                let result = run_ep_timestep(&input, scheme, &ep, &cfg.gibbs.with_seed(gibbs_seed))?;
                posteriors = result.posteriors;
                if cfg.diagnostics {
                    out.diagnostics.extend(result.diagnostics);
                    out.comm.extend(result.comm);
                }
                result.ci
            }
            None => {
                let Method::CGibbs(total_sweeps) = method else {
                    unreachable!("EP methods have a scheme")
                };
                let gibbs = GibbsConfig::new(total_sweeps, cfg.cgibbs_burn_in, gibbs_seed)?;
                let prior = predict_prior(&posteriors[0], &dynamics);
                let pooled = PooledMeasurements::from_sets(&scenario.measurements[step]);
                let post = centralized_gibbs_step(&prior, &pooled, &sensors, &gibbs)?;
                posteriors = vec![post; num_sensors];
                0
            }
        };
        let wall_ms = if cfg.record_timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        out.ci.push(ci);
        let truth = scenario.truth_positions(step);
        for (sensor, post) in posteriors.iter().enumerate() {
            let g = gospa(&positions(post), &truth, &cfg.gospa);
            out.records.push(ResultsRecord {
                run,
                method: method.to_string(),
                step: step + 1,
                sensor,
                gospa: g.value,
                loc: g.localisation,
                missed: g.missed,
                false_targets: g.false_targets,
                ci,
                wall_ms,
            });
        }
    }
    Ok(out)
}

/// Per-method aggregate as written to the summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean_gospa: f64,
    pub std_gospa: f64,
    pub mean_ci: f64,
    pub runs: usize,
    /// Runs dropped after a numerical failure.
    pub aborted_runs: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub records: Vec<ResultsRecord>,
    pub summary: BTreeMap<String, MethodSummary>,
    pub diagnostics: Vec<(usize, Method, IterationDiagnostic)>,
    pub comm: Vec<(usize, Method, CommEvent)>,
    pub scenarios: Vec<Scenario>,
}

struct RunOutcome {
    scenario: Scenario,
    methods: Vec<(Method, std::result::Result<MethodRun, Error>)>,
}

fn summarise(per_method: Vec<(Method, Vec<RunMetrics>, Vec<usize>)>) -> Result<BTreeMap<String, MethodSummary>> {
    per_method
        .into_iter()
        .map(|(method, runs, aborted_runs)| {
            let agg = if runs.is_empty() {
                Aggregate {
                    mean_gospa: f64::NAN,
                    std_gospa: f64::NAN,
                    mean_ci: f64::NAN,
                    runs: 0,
                }
            } else {
                aggregate(&runs)?
            };
            Ok((
                method.to_string(),
                MethodSummary {
                    mean_gospa: agg.mean_gospa,
                    std_gospa: agg.std_gospa,
                    mean_ci: agg.mean_ci,
                    runs: agg.runs,
                    aborted_runs,
                },
            ))
        })
        .collect()
}

/// Runs every method on every scenario. Numerical failures drop that (run, method) pair.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let runs = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let scenario = cfg.scenario(run)?;
            let methods = cfg
                .methods
                .iter()
                .map(|&m| (m, run_method(cfg, &scenario, m, run)))
                .collect();
            Ok(RunOutcome { scenario, methods })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outcome = ExperimentOutcome::default();
    let mut per_method: Vec<(Method, Vec<RunMetrics>, Vec<usize>)> =
        cfg.methods.iter().map(|&m| (m, Vec::new(), Vec::new())).collect();
    for (run, run_outcome) in runs.into_iter().enumerate() {
        for (i, (method, result)) in run_outcome.methods.into_iter().enumerate() {
            match result {
                Ok(mr) => {
                    per_method[i].1.push(mr.metrics());
                    outcome.diagnostics.extend(mr.diagnostics.into_iter().map(|d| (run, method, d)));
                    outcome.comm.extend(mr.comm.into_iter().map(|c| (run, method, c)));
                    outcome.records.extend(mr.records);
                }
                Err(e) if e.is_numerical() => per_method[i].2.push(run),
                Err(e) => return Err(e),
            }
        }
        if cfg.write_scenarios {
            outcome.scenarios.push(run_outcome.scenario);
        }
    }
    outcome.summary = summarise(per_method)?;
    Ok(outcome)
}

pub fn write_results_csv<W: Write>(mut writer: W, records: &[ResultsRecord]) -> Result<()> {
    writeln!(writer, "{RESULTS_SCHEMA}")?;
    let mut csv = csv::Writer::from_writer(writer);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultsRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Serialize)]
struct DiagnosticRow {
    run: usize,
    method: String,
    step: usize,
    iteration: usize,
    sensor: usize,
    site_norm: f64,
    cavity_valid: bool,
    step_scale: f64,
    identity_residual: f64,
}

#[derive(Serialize)]
struct CommRow {
    run: usize,
    method: String,
    step: usize,
    iteration: usize,
    round: usize,
    sender: usize,
    receiver: usize,
    payload_reals: usize,
}

/// Writes `results.csv`, `summary.json` and the optional extras into `dir`.
pub fn write_outputs(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let results = std::io::BufWriter::new(std::fs::File::create(dir.join("results.csv"))?);
    write_results_csv(results, &outcome.records)?;

    let mut summary = serde_json::to_string_pretty(&outcome.summary)?;
    summary.push('\n');
    std::fs::write(dir.join("summary.json"), summary)?;

    if !outcome.diagnostics.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
        for (run, method, d) in &outcome.diagnostics {
            w.serialize(DiagnosticRow {
                run: *run,
                method: method.to_string(),
                step: d.step + 1,
                iteration: d.iteration,
                sensor: d.sensor,
                site_norm: d.site_norm,
                cavity_valid: d.cavity_valid,
                step_scale: d.step_scale,
                identity_residual: d.identity_residual,
            })?;
        }
        w.flush()?;
    }
    if !outcome.comm.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("comm.csv"))?;
        for (run, method, c) in &outcome.comm {
            w.serialize(CommRow {
                run: *run,
                method: method.to_string(),
                step: c.step + 1,
                iteration: c.iteration,
                round: c.round,
                sender: c.sender,
                receiver: c.receiver,
                payload_reals: c.payload_reals,
            })?;
        }
        w.flush()?;
    }
    if !outcome.scenarios.is_empty() {
        let scen_dir = dir.join("scenarios");
        std::fs::create_dir_all(&scen_dir)?;
        for (run, s) in outcome.scenarios.iter().enumerate() {
            s.save(&scen_dir.join(format!("run{run:03}.json")))?;
        }
    }
    Ok(())
}

/// Aggregates a results table per method, in order of first appearance.
pub fn summarize_records(records: &[ResultsRecord]) -> Result<Vec<(String, Aggregate)>> {
    let mut order: Vec<String> = Vec::new();
    // method -> run -> (gospa values, ci per step)
    let mut grouped: BTreeMap<&str, BTreeMap<usize, (Vec<f64>, BTreeMap<usize, usize>)>> = BTreeMap::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        let entry = grouped
            .entry(r.method.as_str())
            .or_default()
            .entry(r.run)
            .or_default();
        entry.0.push(r.gospa);
        entry.1.insert(r.step, r.ci);
    }
    order
        .iter()
        .map(|m| {
            let runs: Vec<RunMetrics> = grouped[m.as_str()]
                .values()
                .map(|(g, ci)| RunMetrics {
                    gospa: g.clone(),
                    ci: ci.values().copied().collect(),
                })
                .collect();
            Ok((m.clone(), aggregate(&runs)?))
        })
        .collect()
}

/// Plain-text table with one row per method.
pub fn format_summary_table(rows: &[(String, Aggregate)]) -> String {
    let mut out = format!("{:<12} {:>18} {:>8} {:>6}\n", "Method", "Mean GOSPA (sd)", "CI", "Runs");
    for (method, a) in rows {
        let gospa = format!("{:.1} ± {:.1}", a.mean_gospa, a.std_gospa);
        out.push_str(&format!("{method:<12} {gospa:>18} {:>8} {:>6}\n", format_ci(a.mean_ci), a.runs));
    }
    out
}

fn format_ci(ci: f64) -> String {
    if ci == 0.0 {
        "-".to_string()
    } else if ci.fract() == 0.0 {
        format!("{ci:.0}")
    } else {
        format!("{ci:.2}")
    }
}
