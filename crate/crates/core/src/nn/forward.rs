use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::lstm::{step_batch, LayerStep};
use super::{softmax_rows, LstmClassifier, ModelConfig};
use crate::error::{Error, Result};
use crate::telemetry::SequenceSample;
use crate::training::dropout::dropout_mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Inverted-dropout masks between stacked layers: `masks[l][t]` scales the
/// output of layer `l` at step `t` before layer `l + 1` reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub masks: Vec<Vec<Array2<f64>>>,
}

impl DropoutMasks {
    pub fn draw<R: Rng + ?Sized>(config: &ModelConfig, batch: usize, rng: &mut R) -> Self {
        let masks = (0..config.layers.saturating_sub(1))
            .map(|_| {
                (0..config.window)
                    .map(|_| dropout_mask((batch, config.hidden), config.dropout, rng))
                    .collect()
            })
            .collect();
        Self { masks }
    }

    fn check(&self, config: &ModelConfig, batch: usize) -> Result<()> {
        let ok = self.masks.len() == config.layers.saturating_sub(1)
            && self.masks.iter().all(|per_step| {
                per_step.len() == config.window
                    && per_step.iter().all(|m| m.dim() == (batch, config.hidden))
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("dropout masks do not match the model".into()))
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `steps[t][layer]`
    pub steps: Vec<Vec<LayerStep>>,
    pub masks: Option<DropoutMasks>,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.probabilities.nrows()
    }

    /// Final-step hidden state of the top layer, `B × H`.
    pub fn top_hidden(&self) -> ArrayView2<'_, f64> {
        self.steps
            .last()
            .and_then(|layers| layers.last())
            .map(|s| s.hidden.view())
            .expect("non-empty trace")
    }
}

/// Batched forward pass over `inputs` shaped `B × T × F`, starting from zero
/// state. With `masks`, every non-top layer output is multiplied by its mask.
pub fn forward_batch(
    model: &LstmClassifier,
    inputs: ArrayView3<'_, f64>,
    masks: Option<&DropoutMasks>,
) -> Result<ForwardTrace> {
    let config = &model.config;
    let (batch, window, features) = inputs.dim();
    if window != config.window || features != config.features {
        return Err(Error::Shape(format!(
            "input window {window}x{features}, model expects {}x{}",
            config.window, config.features
        )));
    }
    if let Some(m) = masks {
        m.check(config, batch)?;
    }

    let h = config.hidden;
    let zeros = Array2::<f64>::zeros((batch, h));
    let mut steps: Vec<Vec<LayerStep>> = Vec::with_capacity(window);
    for t in 0..window {
        let mut layers: Vec<LayerStep> = Vec::with_capacity(config.layers);
        for (l, params) in model.params.layers.iter().enumerate() {
            let (h_prev, c_prev) = match t {
                0 => (zeros.view(), zeros.view()),
                _ => (steps[t - 1][l].hidden.view(), steps[t - 1][l].cell.view()),
            };
            let step = if l == 0 {
                step_batch(params, h_prev, c_prev, inputs.index_axis(Axis(1), t))
            } else {
                let below = &layers[l - 1].hidden;
                match masks {
                    Some(m) => {
                        let dropped = below * &m.masks[l - 1][t];
                        step_batch(params, h_prev, c_prev, dropped.view())
                    }
                    None => step_batch(params, h_prev, c_prev, below.view()),
                }
            };
            layers.push(step);
        }
        steps.push(layers);
    }

    let top = &steps[window - 1][config.layers - 1].hidden;
    let mut logits = top.dot(&model.params.dense.weights.t());
    logits += &model.params.dense.bias;
    let probabilities = softmax_rows(&logits);
    Ok(ForwardTrace {
        steps,
        masks: masks.cloned(),
        logits,
        probabilities,
    })
}

/// Single-sample forward pass. Train mode draws fresh dropout masks from
/// `rng`; inference mode never touches it.
pub fn forward<R: Rng + ?Sized>(
    model: &LstmClassifier,
    sample: &SequenceSample,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array1<f64>, ForwardTrace)> {
    let masks = match mode {
        Mode::Train if model.config.layers > 1 => Some(DropoutMasks::draw(&model.config, 1, rng)),
        _ => None,
    };
    let trace = forward_batch(
        model,
        sample.inputs.view().insert_axis(Axis(0)),
        masks.as_ref(),
    )?;
    Ok((trace.probabilities.row(0).to_owned(), trace))
}

/// Inference-mode class probabilities for one `T × F` window.
pub fn predict_proba(model: &LstmClassifier, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let trace = forward_batch(model, inputs.insert_axis(Axis(0)), None)?;
    Ok(trace.probabilities.row(0).to_owned())
}

/// Inference-mode probabilities for `B × T × F` inputs, `B × classes`.
pub fn predict_batch(model: &LstmClassifier, inputs: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    const CHUNK: usize = 256;
    let batch = inputs.dim().0;
    let mut out = Array2::zeros((batch, model.config.classes));
    let mut start = 0;
    while start < batch {
        let end = (start + CHUNK).min(batch);
        let trace = forward_batch(model, inputs.slice(s![start..end, .., ..]), None)?;
        out.slice_mut(s![start..end, ..]).assign(&trace.probabilities);
        start = end;
    }
    Ok(out)
}
