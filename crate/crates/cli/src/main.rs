//! `cclab`: generate telemetry, train the classifier, run closed-loop
//! experiments, compare reports and replay decision logs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed check
//! (replay mismatch, training divergence).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cclab::config::{parse_override, RunConfig};
use cclab::controller::{read_decision_log_file, replay, write_decision_log_file};
use cclab::experiment::{
    evaluate_checkpoint, generate_dataset, load_dataset, run_experiment, train_pipeline, write_dataset, Predictor,
    PredictorKind,
};
use cclab::metrics::{compare, median, Comparison, ExperimentReport};
use cclab::nn::checkpoint::{write_atomic, Checkpoint};
use cclab::telemetry::write_csv_file;
use cclab::training::Evaluation;
use cclab::CongestionLevel;
use clap::{Parser, Subcommand};

const OVERRIDE_HELP: &str = "\
Any setting can be overridden with a dotted --key=value argument, for example
  --seed=7 --sim.buffer_packets=80 --data.scenarios='[\"high\"]' --paths.run_id=exp1
Values are read as TOML literals and fall back to plain strings.";

#[derive(Parser, Debug)]
#[command(name = "cclab", version, about = "IoT gateway congestion-control lab", after_help = OVERRIDE_HELP)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate every configured scenario without a controller and write labeled telemetry.
    GenData,
    /// Train the classifier on the generated telemetry and write a checkpoint.
    Train,
    /// Score the checkpoint on the held-out test windows.
    Evaluate,
    /// Run the closed loop for every scenario and paired seed.
    RunExperiment {
        /// Congestion predictor driving the controller.
        #[arg(long, default_value = "lstm", value_parser = parse_kind)]
        predictor: PredictorKind,
    },
    /// Pair two sets of experiment reports by scenario and seed and print the deltas.
    Compare {
        /// Baseline report file, or a directory of report files.
        baseline: PathBuf,
        /// Candidate report file, or a directory of report files.
        candidate: PathBuf,
        /// Also write the paired rows as CSV.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Recompute the actions of a decision log from its scores and check them.
    Replay {
        /// Decision log CSV.
        log: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<PredictorKind, String> {
    s.parse().map_err(|e: cclab::Error| e.to_string())
}

/// A command that ran but whose check failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

type Overrides = Vec<(String, String)>;

/// Splits dotted `--key=value` overrides (and `--seed=N`) from clap's arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg
            .strip_prefix("--")
            .and_then(|body| body.split_once('='))
            .is_some_and(|(key, _)| key.contains('.') || key == "seed");
        if is_override {
            overrides.push(parse_override(&arg)?);
        } else {
            rest.push(arg);
        }
    }
    Ok((rest, overrides))
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let failed_check = e.downcast_ref::<CheckFailed>().is_some()
                || matches!(e.downcast_ref::<cclab::Error>(), Some(cclab::Error::Diverged { .. }));
            ExitCode::from(if failed_check { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let load = || -> Result<RunConfig> {
        Ok(RunConfig::load(cli.config.as_deref(), overrides)?)
    };
    match cli.command {
        Command::GenData => gen_data(&load()?),
        Command::Train => train(&load()?),
        Command::Evaluate => evaluate(&load()?),
        Command::RunExperiment { predictor } => run_experiment_cmd(&load()?, predictor),
        Command::Compare {
            baseline,
            candidate,
            output,
        } => compare_cmd(&baseline, &candidate, output.as_deref()),
        Command::Replay { log } => replay_cmd(&log),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Saves the resolved configuration as `<run>/config/<command>.toml`.
fn snapshot_config(config: &RunConfig, command: &str) -> Result<()> {
    let dir = config.paths.run_dir().join("config");
    create_dir(&dir)?;
    let text = format!("# digest {}\n{}", config.digest()?, config.to_toml()?);
    write_atomic(&dir.join(format!("{command}.toml")), text.as_bytes())?;
    Ok(())
}

fn gen_data(config: &RunConfig) -> Result<()> {
    snapshot_config(config, "gen-data")?;
    let series = generate_dataset(config)?;
    let dir = config.paths.dataset_dir();
    let paths = write_dataset(&series, &dir)?;
    let records: usize = series.iter().map(|s| s.records.len()).sum();
    let mut counts = [0usize; 3];
    for r in series.iter().flat_map(|s| &s.records) {
        counts[r.label.index()] += 1;
    }
    println!("wrote {} files ({records} records) to {}", paths.len(), dir.display());
    for level in CongestionLevel::ALL {
        println!("  {level:<6} {}", counts[level.index()]);
    }
    Ok(())
}

fn load_series(config: &RunConfig) -> Result<Vec<Vec<cclab::TelemetryRecord>>> {
    let dir = config.paths.dataset_dir();
    load_dataset(&dir).with_context(|| format!("loading telemetry from {} (run gen-data first)", dir.display()))
}

fn print_evaluation(label: &str, e: &Evaluation) {
    println!("{label}: {} windows, accuracy {:.4}, loss {:.4}", e.count, e.accuracy, e.loss);
    println!("  confusion (rows actual, columns predicted: low medium high)");
    for level in CongestionLevel::ALL {
        let row = e.confusion[level.index()];
        println!("  {level:<6} {:>6} {:>6} {:>6}", row[0], row[1], row[2]);
    }
}

fn train(config: &RunConfig) -> Result<()> {
    snapshot_config(config, "train")?;
    let series = load_series(config)?;
    let outcome = train_pipeline(&series, config, |e| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  val acc {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        );
    })?;
    let path = config.paths.checkpoint();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    outcome.checkpoint.save(&path)?;
    let report_dir = config.paths.run_dir().join("report");
    create_dir(&report_dir)?;
    outcome.report.save(report_dir.join("training.csv"))?;
    println!(
        "stopped at epoch {} (best {}, validation loss {:.4}); checkpoint {}",
        outcome.report.stopping_epoch,
        outcome.report.best_epoch,
        outcome.report.best_val_loss,
        path.display()
    );
    if let Some(test) = &outcome.test {
        print_evaluation("test", test);
    }
    Ok(())
}

fn load_checkpoint(config: &RunConfig) -> Result<Checkpoint> {
    let path = config.paths.checkpoint();
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {} (run train first)", path.display()))
}

fn evaluate(config: &RunConfig) -> Result<()> {
    let checkpoint = load_checkpoint(config)?;
    let series = load_series(config)?;
    let evaluation = evaluate_checkpoint(&series, config, &checkpoint)?;
    print_evaluation("test", &evaluation);
    Ok(())
}

fn run_experiment_cmd(config: &RunConfig, kind: PredictorKind) -> Result<()> {
    let checkpoint = match kind {
        PredictorKind::Lstm => Some(load_checkpoint(config)?),
        _ => None,
    };
    let predictor = Predictor::build(kind, config, checkpoint)?;
    snapshot_config(config, &format!("run-experiment-{kind}"))?;
    let runs = run_experiment(config, &predictor)?;
    let run_dir = config.paths.run_dir();
    let [telemetry_dir, decisions_dir, report_dir] =
        ["telemetry", "decisions", "report"].map(|d| run_dir.join(d).join(kind.as_str()));
    for dir in [&telemetry_dir, &decisions_dir, &report_dir] {
        create_dir(dir)?;
    }
    let mut summary = String::from(
        "scenario,run,seed,offered_load,loss_rate,mean_delay_ms,mean_throughput_kbps,throttled,shaping_intervals,qos_intervals\n",
    );
    for r in &runs {
        let stem = format!("{}_{:03}", r.report.scenario, r.report.run);
        write_csv_file(telemetry_dir.join(format!("{stem}.csv")), &r.output.telemetry)?;
        write_decision_log_file(decisions_dir.join(format!("{stem}.csv")), &r.decisions)?;
        r.report.save(report_dir.join(format!("{stem}.toml")))?;
        let mut series = Vec::new();
        r.report.write_series_csv(&mut series)?;
        write_atomic(&report_dir.join(format!("{stem}_series.csv")), &series)?;
        let s = &r.report.summary;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{}",
            r.report.scenario,
            r.report.run,
            r.report.seed,
            r.report.offered_load,
            s.loss_rate,
            s.mean_delay_ms,
            s.mean_throughput_kbps,
            s.throttled,
            s.shaping_intervals,
            s.qos_intervals
        );
    }
    write_atomic(&report_dir.join("summary.csv"), summary.as_bytes())?;

    println!("{kind}: {} runs, reports in {}", runs.len(), report_dir.display());
    let mut by_scenario: BTreeMap<&str, Vec<&ExperimentReport>> = BTreeMap::new();
    for r in &runs {
        by_scenario.entry(&r.report.scenario).or_default().push(&r.report);
    }
    println!("  scenario  load  median loss  median delay ms  median throughput kbps");
    for (scenario, reports) in by_scenario {
        let med = |f: fn(&ExperimentReport) -> f64| median(&reports.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(0.0);
        println!(
            "  {scenario:<8} {:>5.2} {:>12.4} {:>16.1} {:>23.1}",
            reports[0].offered_load,
            med(|r| r.summary.loss_rate),
            med(|r| r.summary.mean_delay_ms),
            med(|r| r.summary.mean_throughput_kbps)
        );
    }
    Ok(())
}

/// A report file, or every `*.toml` report directly inside a directory.
fn load_reports(path: &Path) -> Result<Vec<ExperimentReport>> {
    if path.is_file() {
        return Ok(vec![ExperimentReport::load(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no report files in {}", path.display());
    }
    files
        .iter()
        .map(|f| ExperimentReport::load(f).with_context(|| format!("reading {}", f.display())))
        .collect()
}

fn compare_cmd(baseline: &Path, candidate: &Path, output: Option<&Path>) -> Result<()> {
    let baseline = load_reports(baseline)?;
    let candidate = load_reports(candidate)?;
    let key = |r: &ExperimentReport| (r.scenario.clone(), r.seed);
    let mut pending: BTreeMap<_, &ExperimentReport> = candidate.iter().map(|r| (key(r), r)).collect();
    let mut pairs: Vec<(&ExperimentReport, &ExperimentReport, Comparison)> = Vec::new();
    for b in &baseline {
        let c = match (baseline.len(), candidate.len()) {
            (1, 1) => &candidate[0],
            _ => pending
                .remove(&key(b))
                .with_context(|| format!("no candidate report for scenario {} seed {}", b.scenario, b.seed))?,
        };
        pairs.push((b, c, compare(b, c)?));
    }
    if baseline.len() > 1 || candidate.len() > 1 {
        if let Some(((scenario, seed), _)) = pending.into_iter().next() {
            bail!("no baseline report for scenario {scenario} seed {seed}");
        }
    }

    let mut csv = String::from(
        "scenario,seed,offered_load,baseline,candidate,baseline_loss_rate,candidate_loss_rate,\
         baseline_mean_delay_ms,candidate_mean_delay_ms,baseline_throughput_kbps,candidate_throughput_kbps,\
         delta_loss_rate,delta_mean_delay_ms,delta_throughput_kbps,relative_loss_change\n",
    );
    println!("  scenario  seed                  d_loss   d_delay_ms  d_throughput_kbps  rel_loss");
    for (b, c, d) in &pairs {
        println!(
            "  {:<8} {:<20} {:>8.4} {:>12.1} {:>18.2} {:>9.3}",
            d.scenario, d.seed, d.delta_loss_rate, d.delta_mean_delay_ms, d.delta_throughput_kbps, d.relative_loss_change
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            d.scenario,
            d.seed,
            b.offered_load,
            d.baseline,
            d.candidate,
            b.summary.loss_rate,
            c.summary.loss_rate,
            b.summary.mean_delay_ms,
            c.summary.mean_delay_ms,
            b.summary.mean_throughput_kbps,
            c.summary.mean_throughput_kbps,
            d.delta_loss_rate,
            d.delta_mean_delay_ms,
            d.delta_throughput_kbps,
            d.relative_loss_change
        );
    }
    let mut by_scenario: BTreeMap<&str, Vec<&Comparison>> = BTreeMap::new();
    for (_, _, d) in &pairs {
        by_scenario.entry(&d.scenario).or_default().push(d);
    }
    println!("  median per scenario:");
    for (scenario, ds) in by_scenario {
        let med = |f: fn(&Comparison) -> f64| median(&ds.iter().map(|d| f(d)).collect::<Vec<_>>()).unwrap_or(0.0);
        println!(
            "  {scenario:<8} {:<20} {:>8.4} {:>12.1} {:>18.2} {:>9.3}",
            format!("({} pairs)", ds.len()),
            med(|d| d.delta_loss_rate),
            med(|d| d.delta_mean_delay_ms),
            med(|d| d.delta_throughput_kbps),
            med(|d| d.relative_loss_change)
        );
    }
    if let Some(path) = output {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}

fn replay_cmd(log: &Path) -> Result<()> {
    let records = read_decision_log_file(log)?;
    let outcome = replay(&records);
    for (r, recomputed) in records.iter().zip(&outcome.recomputed) {
        let score = r.score.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
        let mark = if *recomputed == r.action { "ok" } else { "MISMATCH" };
        println!("  t={:<8} score {score:<8} recorded {:<15} recomputed {:<15} {mark}", r.time_s, r.action, recomputed);
    }
    println!(
        "{} rows checked, {} match, {} mismatch",
        outcome.checked,
        outcome.checked - outcome.mismatches.len(),
        outcome.mismatches.len()
    );
    if !outcome.is_consistent() {
        return Err(CheckFailed(format!("{} recorded actions differ from the policy", outcome.mismatches.len())).into());
    }
    Ok(())
}
