//! Mini-batch training with cross-entropy, BPTT, Adam, dropout between the
//! recurrent layers and early stopping on validation loss.

mod adam;
mod backward;
pub mod dropout;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward_batch, predict_batch, predict_class, DropoutMasks, LstmClassifier};
use crate::seed::rng_for;
use crate::telemetry::{CongestionLevel, DatasetSplit, SequenceSample};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::{backward, batch_loss, clip_global_norm, finite_difference_gradient};
pub use dropout::{apply_dropout, dropout_mask};

/// Probability floor inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Shuffle and dropout seed; set from the master seed, never read from files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            max_epochs: 90,
            batch_size: 32,
            patience: 10,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch size and patience must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip norm must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn cross_entropy(probabilities: &[f64], target: &[f64]) -> f64 {
    -probabilities
        .iter()
        .zip(target)
        .map(|(&p, &y)| if y == 0.0 { 0.0 } else { y * p.max(LOG_FLOOR).ln() })
        .sum::<f64>()
}

/// Mean cross-entropy over the rows of `B × classes` arrays.
pub fn cross_entropy_batch(probabilities: &Array2<f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = probabilities
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(p, y)| cross_entropy(p.as_slice().expect("row-major"), &y.to_vec()))
        .sum();
    total / probabilities.nrows() as f64
}

/// Stacks samples into a `B × T × F` input tensor and `B × 3` targets.
pub fn stack_samples<'a>(samples: impl IntoIterator<Item = &'a SequenceSample>) -> Result<(Array3<f64>, Array2<f64>)> {
    let samples: Vec<&SequenceSample> = samples.into_iter().collect();
    let first = samples.first().ok_or(Error::Empty("samples"))?;
    let (t, f) = first.inputs.dim();
    let mut inputs = Array3::zeros((samples.len(), t, f));
    let mut targets = Array2::zeros((samples.len(), 3));
    for (b, s) in samples.iter().enumerate() {
        if s.inputs.dim() != (t, f) {
            return Err(Error::Shape(format!("sample {b} is {:?}, expected ({t}, {f})", s.inputs.dim())));
        }
        inputs.index_axis_mut(ndarray::Axis(0), b).assign(&s.inputs);
        for k in 0..3 {
            targets[[b, k]] = s.target[k];
        }
    }
    Ok((inputs, targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

const REPORT_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy";

impl TrainingReport {
    pub fn stopped_early(&self, max_epochs: usize) -> bool {
        self.stopping_epoch < max_epochs
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
        }
        let _ = write!(
            out,
            "\n[summary]\nstopping_epoch = {}\nbest_epoch = {}\nbest_val_loss = {:e}\n",
            self.stopping_epoch, self.best_epoch, self.best_val_loss
        );
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::MalformedRow {
            path: "training report".into(),
            line: line as u64 + 1,
            message: msg.into(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, REPORT_HEADER)) => {}
            _ => return Err(bad(0, "missing report header")),
        }
        let mut epochs = Vec::new();
        let (mut stopping, mut best, mut best_loss) = (None, None, None);
        let mut in_summary = false;
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "[summary]" {
                in_summary = true;
                continue;
            }
            if in_summary {
                let (key, value) = line.split_once('=').ok_or_else(|| bad(n, "expected key = value"))?;
                let value = value.trim();
                match key.trim() {
                    "stopping_epoch" => stopping = value.parse().ok(),
                    "best_epoch" => best = value.parse().ok(),
                    "best_val_loss" => best_loss = value.parse().ok(),
                    _ => return Err(bad(n, "unknown summary key")),
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let parsed = (|| -> Option<EpochRecord> {
                let [e, tl, vl, va] = fields.as_slice() else { return None };
                Some(EpochRecord {
                    epoch: e.parse().ok()?,
                    train_loss: tl.parse().ok()?,
                    val_loss: vl.parse().ok()?,
                    val_accuracy: va.parse().ok()?,
                })
            })();
            epochs.push(parsed.ok_or_else(|| bad(n, "expected four numeric fields"))?);
        }
        match (stopping, best, best_loss) {
            (Some(stopping_epoch), Some(best_epoch), Some(best_val_loss)) => Ok(Self {
                epochs,
                stopping_epoch,
                best_epoch,
                best_val_loss,
            }),
            _ => Err(bad(0, "incomplete summary block")),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::nn::checkpoint::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }
}

/// Accuracy, per-class precision/recall and the confusion matrix
/// (`confusion[actual][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub confusion: [[usize; 3]; 3],
}

impl Evaluation {
    /// Share of the most frequent actual class.
    pub fn majority_fraction(&self) -> f64 {
        let max = self.confusion.iter().map(|row| row.iter().sum::<usize>()).max().unwrap_or(0);
        max as f64 / self.count as f64
    }
}

pub fn evaluate(model: &LstmClassifier, samples: &[SequenceSample]) -> Result<Evaluation> {
    let (inputs, targets) = stack_samples(samples)?;
    let probs = predict_batch(model, inputs.view())?;
    let loss = cross_entropy_batch(&probs, targets.view());
    let mut confusion = [[0usize; 3]; 3];
    for (p, s) in probs.rows().into_iter().zip(samples) {
        let predicted = predict_class(p.as_slice().expect("row-major"));
        confusion[s.label().index()][predicted.index()] += 1;
    }
    let count = samples.len();
    let correct: usize = (0..3).map(|k| confusion[k][k]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = std::array::from_fn(|k| ratio(confusion[k][k], (0..3).map(|a| confusion[a][k]).sum()));
    let recall = std::array::from_fn(|k| ratio(confusion[k][k], confusion[k].iter().sum()));
    Ok(Evaluation {
        count,
        accuracy: correct as f64 / count as f64,
        loss,
        precision,
        recall,
        confusion,
    })
}

/// Trains from `initial` and returns the parameters of the epoch with the
/// lowest validation loss.
pub fn train(
    initial: LstmClassifier,
    splits: &DatasetSplit<SequenceSample>,
    config: &TrainingConfig,
) -> Result<(LstmClassifier, TrainingReport)> {
    train_with_progress(initial, splits, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    initial: LstmClassifier,
    splits: &DatasetSplit<SequenceSample>,
    config: &TrainingConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(LstmClassifier, TrainingReport)> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if splits.validation.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let (train_x, train_y) = stack_samples(&splits.train)?;
    let mut model = initial;
    let use_masks = model.config.layers > 1 && model.config.dropout > 0.0;
    let mut shuffle_rng = rng_for(config.seed, "training/shuffle");
    let mut dropout_rng = rng_for(config.seed, "training/dropout");
    let mut adam = AdamState::new(&model.params, config.adam);

    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut epochs = Vec::new();
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs = train_x.select(ndarray::Axis(0), chunk);
            let targets = train_y.select(ndarray::Axis(0), chunk);
            let masks = use_masks.then(|| DropoutMasks::draw(&model.config, chunk.len(), &mut dropout_rng));
            let trace = forward_batch(&model, inputs.view(), masks.as_ref())?;
            let loss = cross_entropy_batch(&trace.probabilities, targets.view());
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("training loss {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let mut grads = backward(&model, &trace, targets.view())?;
            if config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, config.clip_norm);
            }
            adam_step(&mut model.params, &grads, &mut adam, config.learning_rate).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let validation = evaluate(&model, &splits.validation)?;
        if !validation.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {}", validation.loss),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / splits.train.len() as f64,
            val_loss: validation.loss,
            val_accuracy: validation.accuracy,
        };
        progress(&record);
        epochs.push(record);
        if validation.loss < best.2 {
            best = (model.clone(), epoch, validation.loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let report = TrainingReport {
        stopping_epoch: epochs.len(),
        best_epoch: best.1,
        best_val_loss: best.2,
        epochs,
    };
    Ok((best.0, report))
}

/// Fraction of samples whose label is `level`.
pub fn class_fraction(samples: &[SequenceSample], level: CongestionLevel) -> f64 {
    samples.iter().filter(|s| s.label() == level).count() as f64 / samples.len().max(1) as f64
}
