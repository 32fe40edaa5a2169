//! End-to-end pipelines: dataset generation, training and paired
//! closed-loop experiments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::RunConfig;
use crate::controller::{Controller, DecisionRecord, LstmPredictor, ScorePredictor};
use crate::error::{Error, Result};
use crate::fls::FlsPredictor;
use crate::metrics::{aggregate, ExperimentReport, IntervalMetrics};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{init_parameters, LstmClassifier};
use crate::seed::derive_seed;
use crate::sim::{run, run_with_hook, Scenario, SimOutput};
use crate::telemetry::{
    ingest_csv, split_dataset, window_raw, write_csv_file, DatasetSplit, Feature, NormalizationStats,
    SequenceSample, TelemetryRecord,
};
use crate::training::{evaluate, train_with_progress, EpochRecord, Evaluation, TrainingReport};
use crate::ControlAction;

/// Traffic seed of an uncontrolled dataset run.
pub fn generation_seed(master: u64, scenario: Scenario, run: usize) -> u64 {
    derive_seed(master, &format!("gen/{scenario}/{run}"))
}

/// Traffic seed of a closed-loop run; it does not depend on the predictor.
pub fn experiment_seed(master: u64, scenario: Scenario, run: usize) -> u64 {
    derive_seed(master, &format!("experiment/{scenario}/{run}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSeries {
    pub scenario: Scenario,
    pub run: usize,
    pub records: Vec<TelemetryRecord>,
}

impl GeneratedSeries {
    pub fn file_name(&self) -> String {
        dataset_file_name(self.scenario, self.run)
    }
}

pub fn dataset_file_name(scenario: Scenario, run: usize) -> String {
    format!("{scenario}_{run:03}.csv")
}

/// Runs the simulator without a controller for every configured scenario
/// and run.
pub fn generate_dataset(config: &RunConfig) -> Result<Vec<GeneratedSeries>> {
    config.validate()?;
    let mut series = Vec::new();
    for &scenario in &config.data.scenarios {
        for r in 0..config.data.runs_per_scenario {
            let sim = config.sim_for(scenario, generation_seed(config.seed, scenario, r));
            series.push(GeneratedSeries {
                scenario,
                run: r,
                records: run(&sim)?.telemetry,
            });
        }
    }
    Ok(series)
}

/// Writes one telemetry CSV per series into `dir` and returns the paths.
pub fn write_dataset(series: &[GeneratedSeries], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    series
        .iter()
        .map(|s| {
            let path = dir.join(s.file_name());
            write_csv_file(&path, &s.records)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.csv` in `dir`, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Vec<TelemetryRecord>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    if paths.is_empty() {
        return Err(Error::Empty("telemetry csv files"));
    }
    paths.sort();
    paths.iter().map(ingest_csv).collect()
}

/// Normalized windows split into train/validation/test, with the
/// normalization fitted on the training windows only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit<SequenceSample>,
    pub stats: NormalizationStats,
}

/// Unnormalized windows of every series, split under the master seed.
fn raw_split(
    series: &[Vec<TelemetryRecord>],
    config: &RunConfig,
    window: usize,
    features: &[Feature],
) -> Result<DatasetSplit<SequenceSample>> {
    let mut samples = Vec::new();
    for records in series {
        samples.extend(window_raw(records, window, features)?);
    }
    split_dataset(
        samples,
        config.data.split,
        derive_seed(config.seed, "data/split"),
        config.data.chronological,
    )
}

fn normalize_split(split: &mut DatasetSplit<SequenceSample>, stats: &NormalizationStats) {
    for sample in split.train.iter_mut().chain(&mut split.validation).chain(&mut split.test) {
        stats.apply(sample);
    }
}

pub fn prepare_data(series: &[Vec<TelemetryRecord>], config: &RunConfig) -> Result<PreparedData> {
    let features = &config.data.features;
    let mut split = raw_split(series, config, config.model.window, features)?;
    let stats = NormalizationStats::fit_samples(&split.train, features)?;
    normalize_split(&mut split, &stats);
    Ok(PreparedData { split, stats })
}

/// Scores a checkpoint on the test split of `series`, normalized with the
/// checkpoint's own statistics. Falls back to every window when the
/// configured split leaves no test samples.
pub fn evaluate_checkpoint(
    series: &[Vec<TelemetryRecord>],
    config: &RunConfig,
    checkpoint: &Checkpoint,
) -> Result<Evaluation> {
    let stats = &checkpoint.stats;
    let mut split = raw_split(series, config, checkpoint.model.config.window, stats.features())?;
    normalize_split(&mut split, stats);
    if split.test.is_empty() {
        let all: Vec<SequenceSample> = split.train.into_iter().chain(split.validation).collect();
        return evaluate(&checkpoint.model, &all);
    }
    evaluate(&checkpoint.model, &split.test)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainingReport,
    /// Held-out test evaluation; `None` when the test split is empty.
    pub test: Option<Evaluation>,
}

pub fn initial_model(config: &RunConfig) -> Result<LstmClassifier> {
    init_parameters(config.model, derive_seed(config.seed, "model/init"))
}

/// Windows, splits, normalizes and trains; `progress` sees every epoch.
pub fn train_pipeline(
    series: &[Vec<TelemetryRecord>],
    config: &RunConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let data = prepare_data(series, config)?;
    let (model, report) = train_with_progress(initial_model(config)?, &data.split, &config.training_config(), progress)?;
    let test = if data.split.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.split.test)?)
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, data.stats)?,
        report,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    None,
    Lstm,
    Fls,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [PredictorKind::None, PredictorKind::Lstm, PredictorKind::Fls];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::None => "none",
            PredictorKind::Lstm => "lstm",
            PredictorKind::Fls => "fls",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown predictor `{s}` (expected lstm, fls or none)")))
    }
}

/// A ready-to-run controller scoring function.
#[derive(Debug, Clone)]
pub enum Predictor {
    None,
    Lstm(LstmPredictor),
    Fls(FlsPredictor),
}

impl Predictor {
    /// Builds the predictor; the LSTM variant needs a checkpoint whose
    /// features match `config.data.features`.
    pub fn build(kind: PredictorKind, config: &RunConfig, checkpoint: Option<Checkpoint>) -> Result<Self> {
        match kind {
            PredictorKind::None => Ok(Predictor::None),
            PredictorKind::Fls => Ok(Predictor::Fls(FlsPredictor::new(config.fls.clone())?)),
            PredictorKind::Lstm => {
                let checkpoint = checkpoint.ok_or_else(|| {
                    Error::InvalidArgument("the lstm predictor needs a trained checkpoint".into())
                })?;
                if checkpoint.stats.features() != config.data.features.as_slice() {
                    return Err(Error::Shape(format!(
                        "checkpoint features {:?} differ from configured features {:?}",
                        checkpoint.stats.features(),
                        config.data.features
                    )));
                }
                Ok(Predictor::Lstm(LstmPredictor::from_checkpoint(checkpoint, config.policy.weights)?))
            }
        }
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::None => PredictorKind::None,
            Predictor::Lstm(_) => PredictorKind::Lstm,
            Predictor::Fls(_) => PredictorKind::Fls,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub report: ExperimentReport,
    pub decisions: Vec<DecisionRecord>,
    pub output: SimOutput,
}

fn controlled<P: ScorePredictor>(
    config: &RunConfig,
    sim: &crate::sim::SimConfig,
    predictor: P,
) -> Result<(SimOutput, Vec<DecisionRecord>)> {
    let mut controller = Controller::new(predictor, config.policy);
    let output = run_with_hook(sim, Some(&mut |record: &TelemetryRecord| controller.step(record)))?;
    Ok((output, controller.log))
}

/// One closed-loop run of `scenario` under the traffic of paired run `run`.
pub fn run_closed_loop(
    config: &RunConfig,
    scenario: Scenario,
    run: usize,
    predictor: &Predictor,
) -> Result<ClosedLoopRun> {
    let seed = experiment_seed(config.seed, scenario, run);
    let sim = config.sim_for(scenario, seed);
    let (output, decisions) = match predictor {
        Predictor::Lstm(p) => controlled(config, &sim, p.clone())?,
        Predictor::Fls(p) => controlled(config, &sim, p.clone())?,
        Predictor::None => {
            let mut log = Vec::new();
            let output = run_with_hook(
                &sim,
                Some(&mut |record: &TelemetryRecord| {
                    log.push(DecisionRecord {
                        time_s: record.timestamp_s,
                        score: None,
                        threshold: config.policy.threshold,
                        action: ControlAction::None,
                        throughput_kbps: record.throughput_kbps,
                        predictor: PredictorKind::None.to_string(),
                    });
                    Ok(ControlAction::None)
                }),
            )?;
            (output, log)
        }
    };
    let intervals = output
        .intervals
        .iter()
        .map(IntervalMetrics::from_counters)
        .collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport {
        scenario: scenario.to_string(),
        predictor: predictor.kind().to_string(),
        seed,
        master_seed: config.seed,
        run,
        offered_load: sim.offered_load(),
        config_digest: config.digest()?,
        summary: aggregate(&intervals)?,
        intervals,
    };
    Ok(ClosedLoopRun {
        report,
        decisions,
        output,
    })
}

/// Every configured scenario × paired run, scenario-major.
pub fn run_experiment(config: &RunConfig, predictor: &Predictor) -> Result<Vec<ClosedLoopRun>> {
    config.validate()?;
    let mut runs = Vec::new();
    for &scenario in &config.experiment.scenarios {
        for r in 0..config.experiment.runs {
            runs.push(run_closed_loop(config, scenario, r, predictor)?);
        }
    }
    Ok(runs)
}
