//! Stacked LSTM classifier: gate equations, recurrent layers and a dense
//! softmax head.
//!
//! Each layer keeps its four gate matrices stacked into one `4H × (H + D)`
//! array in the order input, forget, candidate, output, so a time step for a
//! whole batch is a single matrix product against the concatenated
//! `[h_{t-1}, x_t]` rows. [`LstmLayerParameters::gate_weights`] exposes the
//! individual `H × (H + D)` blocks.

pub mod checkpoint;
mod forward;
mod lstm;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::telemetry::CongestionLevel;

pub use forward::{forward, forward_batch, predict_batch, predict_proba, DropoutMasks, ForwardTrace, Mode};
pub use lstm::{lstm_step, GateRecord, LayerStep};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub features: usize,
    pub classes: usize,
    /// Time steps per input window.
    pub window: usize,
    /// Dropout applied to the outputs of every layer but the last.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            features: 5,
            classes: 3,
            window: 10,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.features == 0 || self.window == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (layers {}, hidden {}, features {}, window {})",
                self.layers, self.hidden, self.features, self.window
            )));
        }
        if self.classes != CongestionLevel::ALL.len() {
            return Err(Error::Config(format!(
                "the classifier head has {} classes, expected {}",
                self.classes,
                CongestionLevel::ALL.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.features
        } else {
            self.hidden
        }
    }
}

/// Closed-form number of trainable scalars.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let h = config.hidden;
    let lstm: usize = (0..config.layers)
        .map(|l| 4 * (h * (h + config.layer_input_width(l)) + h))
        .sum();
    Ok(lstm + config.classes * h + config.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Candidate,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Candidate, Gate::Output];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Candidate => "c",
            Gate::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParameters {
    pub(crate) weights: Array2<f64>,
    pub(crate) bias: Array1<f64>,
}

impl LstmLayerParameters {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            weights: Array2::zeros((4 * hidden, hidden + input)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Builds a layer from per-gate `H × (H + D)` matrices and `H` biases,
    /// in [`Gate::ALL`] order.
    pub fn from_gates(weights: [Array2<f64>; 4], biases: [Array1<f64>; 4]) -> Result<Self> {
        let (h, width) = weights[0].dim();
        if width <= h {
            return Err(Error::Shape(format!("gate matrix {h}x{width} has no input columns")));
        }
        let mut layer = Self::zeros(h, width - h);
        for gate in Gate::ALL {
            let (w, b) = (&weights[gate.index()], &biases[gate.index()]);
            if w.dim() != (h, width) || b.len() != h {
                return Err(Error::Shape(format!(
                    "gate {} has shape {:?} / bias {}, expected ({h}, {width}) / {h}",
                    gate.short_name(),
                    w.dim(),
                    b.len()
                )));
            }
            layer.gate_weights_mut(gate).assign(w);
            layer.gate_bias_mut(gate).assign(b);
        }
        Ok(layer)
    }

    pub fn hidden(&self) -> usize {
        self.bias.len() / 4
    }

    pub fn input_width(&self) -> usize {
        self.weights.ncols() - self.hidden()
    }

    pub fn gate_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        let h = self.hidden();
        self.weights.slice(s![gate.index() * h..(gate.index() + 1) * h, ..])
    }

    pub fn gate_weights_mut(&mut self, gate: Gate) -> ArrayViewMut2<'_, f64> {
        let h = self.hidden();
        self.weights
            .slice_mut(s![gate.index() * h..(gate.index() + 1) * h, ..])
    }

    pub fn gate_bias(&self, gate: Gate) -> ArrayView1<'_, f64> {
        let h = self.hidden();
        self.bias.slice(s![gate.index() * h..(gate.index() + 1) * h])
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> ArrayViewMut1<'_, f64> {
        let h = self.hidden();
        self.bias.slice_mut(s![gate.index() * h..(gate.index() + 1) * h])
    }

    /// All four gates stacked, `4H × (H + D)`.
    pub fn stacked_weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn stacked_bias(&self) -> &Array1<f64> {
        &self.bias
    }
}

/// Recurrent state `(h_t, C_t)` of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmLayerState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParameters {
    /// `classes × H`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseParameters {
    pub fn zeros(classes: usize, hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, hidden)),
            bias: Array1::zeros(classes),
        }
    }
}

/// Every trainable tensor of the classifier. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LstmLayerParameters>,
    pub dense: DenseParameters,
}

pub type Gradients = Parameters;

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.layers)
                .map(|l| LstmLayerParameters::zeros(config.hidden, config.layer_input_width(l)))
                .collect(),
            dense: DenseParameters::zeros(config.classes, config.hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParameters::zeros(l.hidden(), l.input_width()))
                .collect(),
            dense: DenseParameters::zeros(self.dense.weights.nrows(), self.dense.weights.ncols()),
        }
    }

    /// Flat views of every tensor in a fixed order: per layer weights then
    /// bias, then dense weights and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &self.layers {
            out.push(layer.weights.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.dense.weights.as_slice().expect("standard layout"));
        out.push(self.dense.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &mut self.layers {
            out.push(layer.weights.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.dense.weights.as_slice_mut().expect("standard layout"));
        out.push(self.dense.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar at flat coordinate `index` (same order as [`Parameters::tensors`]).
    pub fn get(&self, mut index: usize) -> Option<f64> {
        for t in self.tensors() {
            if index < t.len() {
                return Some(t[index]);
            }
            index -= t.len();
        }
        None
    }

    pub fn set(&mut self, mut index: usize, value: f64) -> bool {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return true;
            }
            index -= t.len();
        }
        false
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn matches(&self, config: &ModelConfig) -> bool {
        self.layers.len() == config.layers
            && self.layers.iter().enumerate().all(|(l, p)| {
                p.hidden() == config.hidden && p.input_width() == config.layer_input_width(l)
            })
            && self.dense.weights.dim() == (config.classes, config.hidden)
            && self.dense.bias.len() == config.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmClassifier {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl LstmClassifier {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(Error::Shape("parameters do not match the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Parameters::zeros(&config),
            config,
        })
    }
}

/// Xavier-uniform weights per gate matrix, zero biases except the forget
/// gate (1.0). Deterministic under `seed`.
pub fn init_parameters(config: ModelConfig, seed: u64) -> Result<LstmClassifier> {
    let mut model = LstmClassifier::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    for (l, layer) in model.params.layers.iter_mut().enumerate() {
        let fan_in = h + config.layer_input_width(l);
        let limit = (6.0 / (fan_in + h) as f64).sqrt();
        for gate in Gate::ALL {
            layer
                .gate_weights_mut(gate)
                .mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        layer.gate_bias_mut(Gate::Forget).fill(1.0);
    }
    let limit = (6.0 / (h + config.classes) as f64).sqrt();
    model
        .params
        .dense
        .weights
        .mapv_inplace(|_| rng.random_range(-limit..limit));
    Ok(model)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    softmax_rows(&logits.to_owned().insert_axis(ndarray::Axis(0))).row(0).to_owned()
}

pub fn dense_softmax(dense: &DenseParameters, h: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if dense.weights.ncols() != h.len() {
        return Err(Error::Shape(format!(
            "dense head expects {} inputs, got {}",
            dense.weights.ncols(),
            h.len()
        )));
    }
    Ok(softmax((dense.weights.dot(&h) + &dense.bias).view()))
}

/// Argmax over class probabilities; ties resolve toward the more congested
/// level.
pub fn predict_class(probabilities: &[f64]) -> CongestionLevel {
    let mut best = probabilities.len() - 1;
    for k in (0..best).rev() {
        if probabilities[k] > probabilities[best] {
            best = k;
        }
    }
    CongestionLevel::from_index(best).unwrap_or(CongestionLevel::High)
}
