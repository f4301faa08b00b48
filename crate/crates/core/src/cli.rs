//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{
    format_summary_table, read_results_csv, run_experiment, summarize_records, write_outputs, ExperimentConfig,
};
use crate::metrics::{gospa, GospaConfig};
use crate::model::{ModelParams, Scenario};

#[derive(Debug, Parser)]
#[command(name = "eptrack", version, about = "Distributed EP multi-sensor tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate one scenario and write it as JSON.
    Simulate {
        /// Experiment config supplying the model and step count.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model preset used when no config is given.
        #[arg(long, default_value = "dataset1")]
        preset: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo run index whose scenario is generated.
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Output directory; the file is named `scenario.json`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Execute an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// GOSPA of stored position estimates against a scenario's truth.
    Score {
        #[arg(long)]
        scenario: PathBuf,
        /// CSV with columns step,sensor,x,y (steps start at 1).
        #[arg(long)]
        estimates: PathBuf,
        /// Output directory for `scores.csv`; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        order: f64,
        #[arg(long, default_value_t = 50.0)]
        cutoff: f64,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
    },
    /// Aggregate a results CSV into a per-method table.
    Summarize {
        /// A results CSV, or a directory containing `results.csv`.
        input: PathBuf,
        /// Also write the table to `<out>/summary.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Deserialize)]
struct EstimateRow {
    step: usize,
    sensor: usize,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    step: usize,
    sensor: usize,
    gospa: f64,
    loc: f64,
    missed: f64,
    #[serde(rename = "false")]
    false_targets: f64,
}

fn simulate(
    config: Option<&Path>,
    preset: &str,
    steps: usize,
    seed: Option<u64>,
    run: usize,
    out: &Path,
) -> Result<PathBuf> {
    let scenario = match config {
        Some(path) => {
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.scenario(run)?
        }
        None => {
            let params = ModelParams::preset(preset)
                .ok_or_else(|| Error::config("--preset", format!("unknown preset `{preset}`")))?;
            Scenario::generate(&params, steps, seed.unwrap_or(0))?
        }
    };
    std::fs::create_dir_all(out)?;
    let path = out.join("scenario.json");
    scenario.save(&path)?;
    Ok(path)
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let outcome = run_experiment(&cfg)?;
    write_outputs(&cfg.output_dir, &outcome)?;
    let rows = summarize_records(&outcome.records)?;
    write!(stdout, "{}", format_summary_table(&rows))?;
    for (method, s) in &outcome.summary {
        if !s.aborted_runs.is_empty() {
            writeln!(stdout, "{method}: runs {:?} aborted on numerical failure", s.aborted_runs)?;
        }
    }
    writeln!(stdout, "results written to {}", cfg.output_dir.display())?;
    Ok(())
}

fn score(scenario: &Path, estimates: &Path, out: Option<&Path>, cfg: &GospaConfig, stdout: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let scenario = Scenario::load(scenario)?;
    let num_sensors = scenario.params.num_sensors;
    let mut points: BTreeMap<(usize, usize), Vec<[f64; 2]>> = BTreeMap::new();
    for row in csv::Reader::from_path(estimates)?.deserialize() {
        let row: EstimateRow = row?;
        if row.step == 0 || row.step > scenario.steps || row.sensor >= num_sensors {
            return Err(Error::EmptyInput("estimates refer to a step or sensor outside the scenario"));
        }
        points.entry((row.step, row.sensor)).or_default().push([row.x, row.y]);
    }
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for step in 1..=scenario.steps {
            let truth = scenario.truth_positions(step - 1);
            for sensor in 0..num_sensors {
                let est = points.get(&(step, sensor)).map_or(&[][..], |v| v.as_slice());
                let g = gospa(est, &truth, cfg);
                w.serialize(ScoreRow {
                    step,
                    sensor,
                    gospa: g.value,
                    loc: g.localisation,
                    missed: g.missed,
                    false_targets: g.false_targets,
                })?;
            }
        }
        w.flush()?;
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("scores.csv"), buf)?;
        }
        None => stdout.write_all(&buf)?,
    }
    Ok(())
}

fn summarize(input: &Path, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let path = if input.is_dir() {
        input.join("results.csv")
    } else {
        input.to_path_buf()
    };
    let records = read_results_csv(&path)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("results file has no rows"));
    }
    let table = format_summary_table(&summarize_records(&records)?);
    write!(stdout, "{table}")?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.txt"), &table)?;
    }
    Ok(())
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            preset,
            steps,
            seed,
            run,
            out,
        } => {
            let path = simulate(config.as_deref(), &preset, steps, seed, run, &out)?;
            writeln!(stdout, "scenario written to {}", path.display())?;
            Ok(())
        }
        Command::Run { config, seed, out } => run(&config, seed, out, stdout),
        Command::Score {
            scenario,
            estimates,
            out,
            order,
            cutoff,
            alpha,
        } => {
            let cfg = GospaConfig {
                p: order,
                c: cutoff,
                alpha,
            };
            score(&scenario, &estimates, out.as_deref(), &cfg, stdout)
        }
        Command::Summarize { input, out } => summarize(&input, out.as_deref(), stdout),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn cli_main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}

pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    cli_main_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
