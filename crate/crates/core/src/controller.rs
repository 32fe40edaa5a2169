//! Threshold policy turning class probabilities into shaping / QoS actions.
//!
//! The three-class output is collapsed into an expected congestion level,
//! `score = Σ w_k · P(k)` with weights `(0, 0.5, 1)` by default. Below the
//! threshold nothing is done; at or above it the controller shapes traffic
//! while the score is rising (or on first trigger) and switches to priority
//! scheduling once it starts to fall.

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{predict_proba, LstmClassifier};
use crate::telemetry::{NormalizationStats, TelemetryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ControlAction {
    #[default]
    None,
    TrafficShaping,
    QoSAdjustment,
}

impl ControlAction {
    pub const ALL: [ControlAction; 3] = [Self::None, Self::TrafficShaping, Self::QoSAdjustment];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "None",
            Self::TrafficShaping => "TrafficShaping",
            Self::QoSAdjustment => "QoSAdjustment",
        }
    }
}

impl fmt::Display for ControlAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for ControlAction {
    type Err = Error;

    /// Accepts the canonical names as well as spaced forms such as
    /// "Traffic shaping" or "QoS adjustment", case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !c.is_whitespace() && *c != '_').collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "none" => Ok(Self::None),
            "trafficshaping" | "shaping" => Ok(Self::TrafficShaping),
            "qosadjustment" | "qos" => Ok(Self::QoSAdjustment),
            _ => Err(Error::InvalidArgument(format!("unknown control action `{s}`"))),
        }
    }
}

pub const DEFAULT_WEIGHTS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub threshold: f64,
    pub control_interval_s: f64,
    /// Score weights for (Low, Medium, High).
    pub weights: [f64; 3],
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            control_interval_s: 10.0,
            weights: DEFAULT_WEIGHTS,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("policy.threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.control_interval_s > 0.0) {
            return Err(Error::Config("policy.control_interval_s must be positive".into()));
        }
        let w = self.weights;
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) || w[0] > w[1] || w[1] > w[2] {
            return Err(Error::Config(format!("policy.weights {w:?} must be non-decreasing in [0, 1]")));
        }
        Ok(())
    }
}

/// Expected congestion level under the default weights.
pub fn congestion_score(probabilities: &[f64]) -> f64 {
    weighted_score(probabilities, &DEFAULT_WEIGHTS)
}

pub fn weighted_score(probabilities: &[f64], weights: &[f64; 3]) -> f64 {
    probabilities.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>().clamp(0.0, 1.0)
}

pub fn decide(score: f64, previous: Option<f64>, threshold: f64) -> ControlAction {
    if score < threshold {
        ControlAction::None
    } else {
        match previous {
            Some(prev) if score < prev => ControlAction::QoSAdjustment,
            _ => ControlAction::TrafficShaping,
        }
    }
}

/// Anything that maps a trailing window of telemetry to a score in `[0, 1]`.
pub trait ScorePredictor {
    /// Records needed before a score can be produced.
    fn required_history(&self) -> usize;
    /// Scores the last `required_history()` records of `window`.
    fn score(&self, window: &[TelemetryRecord]) -> Result<f64>;
    fn id(&self) -> &str;
}

/// The trained classifier with the normalization it was fitted under.
#[derive(Debug, Clone)]
pub struct LstmPredictor {
    pub model: LstmClassifier,
    pub stats: NormalizationStats,
    pub weights: [f64; 3],
}

impl LstmPredictor {
    pub fn new(model: LstmClassifier, stats: NormalizationStats, weights: [f64; 3]) -> Result<Self> {
        if stats.len() != model.config.features {
            return Err(Error::Shape(format!(
                "model reads {} features but the normalization covers {}",
                model.config.features,
                stats.len()
            )));
        }
        Ok(Self { model, stats, weights })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, weights: [f64; 3]) -> Result<Self> {
        Self::new(checkpoint.model, checkpoint.stats, weights)
    }

    pub fn probabilities(&self, window: &[TelemetryRecord]) -> Result<Vec<f64>> {
        let t = self.model.config.window;
        if window.len() < t {
            return Err(Error::SeriesTooShort {
                len: window.len(),
                required: t,
            });
        }
        let inputs = self.stats.window_matrix(&window[window.len() - t..]);
        Ok(predict_proba(&self.model, inputs.view())?.to_vec())
    }
}

impl ScorePredictor for LstmPredictor {
    fn required_history(&self) -> usize {
        self.model.config.window
    }

    fn score(&self, window: &[TelemetryRecord]) -> Result<f64> {
        Ok(weighted_score(&self.probabilities(window)?, &self.weights))
    }

    fn id(&self) -> &str {
        "lstm"
    }
}

/// Rolling window plus the last issued score.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub previous: Option<f64>,
    pub window: VecDeque<TelemetryRecord>,
    pub capacity: usize,
}

impl ControllerState {
    pub fn new(capacity: usize) -> Self {
        Self {
            previous: None,
            window: VecDeque::with_capacity(capacity),
            capacity,
        }
    }
}

/// One row of the decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub time_s: f64,
    /// Absent while the controller is warming up.
    pub score: Option<f64>,
    pub threshold: f64,
    pub action: ControlAction,
    pub throughput_kbps: f64,
    pub predictor: String,
}

/// Pushes `record` into the window and, once it is full, scores it and
/// decides. Warm-up steps return `None` without a score.
pub fn control_step<P: ScorePredictor + ?Sized>(
    predictor: &P,
    policy: &PolicyConfig,
    state: &mut ControllerState,
    record: &TelemetryRecord,
) -> Result<(ControlAction, Option<f64>)> {
    if state.window.len() == state.capacity {
        state.window.pop_front();
    }
    state.window.push_back(record.clone());
    if state.window.len() < predictor.required_history() {
        return Ok((ControlAction::None, None));
    }
    let score = predictor.score(state.window.make_contiguous())?;
    let action = decide(score, state.previous, policy.threshold);
    state.previous = Some(score);
    Ok((action, Some(score)))
}

/// A predictor, its policy and state, plus the decisions made so far.
pub struct Controller<P> {
    pub predictor: P,
    pub policy: PolicyConfig,
    pub state: ControllerState,
    pub log: Vec<DecisionRecord>,
}

impl<P: ScorePredictor> Controller<P> {
    pub fn new(predictor: P, policy: PolicyConfig) -> Self {
        let capacity = predictor.required_history().max(1);
        Self {
            predictor,
            policy,
            state: ControllerState::new(capacity),
            log: Vec::new(),
        }
    }

    pub fn step(&mut self, record: &TelemetryRecord) -> Result<ControlAction> {
        let (action, score) = control_step(&self.predictor, &self.policy, &mut self.state, record)?;
        self.log.push(DecisionRecord {
            time_s: record.timestamp_s,
            score,
            threshold: self.policy.threshold,
            action,
            throughput_kbps: record.throughput_kbps,
            predictor: self.predictor.id().to_string(),
        });
        Ok(action)
    }
}

pub const DECISION_LOG_HEADER: [&str; 6] = ["time_s", "score", "threshold", "action", "throughput_kbps", "predictor"];

pub fn write_decision_log<W: Write>(out: W, records: &[DecisionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidArgument(format!("writing decision log: {e}"));
    w.write_record(DECISION_LOG_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.time_s.to_string(),
            r.score.map(|s| s.to_string()).unwrap_or_default(),
            r.threshold.to_string(),
            r.action.to_string(),
            r.throughput_kbps.to_string(),
            r.predictor.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("writing decision log: {e}")))
}

pub fn write_decision_log_file(path: impl AsRef<Path>, records: &[DecisionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_decision_log(std::io::BufWriter::new(file), records)
}

/// Reads a decision log. The `predictor` column is optional; scores may be
/// empty (warm-up rows).
pub fn read_decision_log<R: Read>(input: R, origin: &Path) -> Result<Vec<DecisionRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let bad = |line: u64, message: String| Error::MalformedRow {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != DECISION_LOG_HEADER[..5] && names != DECISION_LOG_HEADER {
        return Err(bad(1, format!("unexpected header `{}`", names.join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != names.len() {
            return Err(bad(line, format!("expected {} fields, found {}", names.len(), row.len())));
        }
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(line, format!("bad {} `{}`", names[k], &row[k])))
        };
        let score = if row[1].is_empty() { None } else { Some(num(1)?) };
        out.push(DecisionRecord {
            time_s: num(0)?,
            score,
            threshold: num(2)?,
            action: row[3].parse().map_err(|e: Error| bad(line, e.to_string()))?,
            throughput_kbps: num(4)?,
            predictor: row.get(5).unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

pub fn read_decision_log_file(path: impl AsRef<Path>) -> Result<Vec<DecisionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_decision_log(file, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub row: usize,
    pub time_s: f64,
    pub recorded: ControlAction,
    pub recomputed: ControlAction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayOutcome {
    pub checked: usize,
    pub recomputed: Vec<ControlAction>,
    pub mismatches: Vec<ReplayMismatch>,
}

impl ReplayOutcome {
    pub fn is_consistent(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-runs [`decide`] over the logged scores in order. Rows without a score
/// are warm-up rows and must show `None`.
pub fn replay(records: &[DecisionRecord]) -> ReplayOutcome {
    let mut outcome = ReplayOutcome::default();
    let mut previous = None;
    for (row, r) in records.iter().enumerate() {
        let action = match r.score {
            Some(score) => {
                let a = decide(score, previous, r.threshold);
                previous = Some(score);
                a
            }
            None => ControlAction::None,
        };
        outcome.checked += 1;
        outcome.recomputed.push(action);
        if action != r.action {
            outcome.mismatches.push(ReplayMismatch {
                row,
                time_s: r.time_s,
                recorded: r.action,
                recomputed: action,
            });
        }
    }
    outcome
}
