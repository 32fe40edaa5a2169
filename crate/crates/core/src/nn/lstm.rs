use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{sigmoid, LstmLayerParameters, LstmLayerState};
use crate::error::{Error, Result};

/// Activations of one layer at one time step for a batch (`B` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    /// `[h_{t-1}, x_t]`, `B × (H + D)`.
    pub concat: Array2<f64>,
    pub input_gate: Array2<f64>,
    pub forget_gate: Array2<f64>,
    pub candidate: Array2<f64>,
    pub output_gate: Array2<f64>,
    pub cell: Array2<f64>,
    pub tanh_cell: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl LayerStep {
    /// The layer input `x_t` as seen by the gates (after any dropout).
    pub fn input(&self) -> ArrayView2<'_, f64> {
        let h = self.hidden.ncols();
        self.concat.slice(s![.., h..])
    }
}

/// Gate values of a single-sample step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub input: Array1<f64>,
    pub forget: Array1<f64>,
    pub candidate: Array1<f64>,
    pub output: Array1<f64>,
}

pub(crate) fn step_batch(
    params: &LstmLayerParameters,
    h_prev: ArrayView2<'_, f64>,
    c_prev: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> LayerStep {
    let h = params.hidden();
    let batch = x.nrows();
    let mut concat = Array2::zeros((batch, h + x.ncols()));
    concat.slice_mut(s![.., ..h]).assign(&h_prev);
    concat.slice_mut(s![.., h..]).assign(&x);

    let mut z = concat.dot(&params.weights.t());
    z += &params.bias;

    let input_gate = z.slice(s![.., 0..h]).mapv(sigmoid);
    let forget_gate = z.slice(s![.., h..2 * h]).mapv(sigmoid);
    let candidate = z.slice(s![.., 2 * h..3 * h]).mapv(f64::tanh);
    let output_gate = z.slice(s![.., 3 * h..4 * h]).mapv(sigmoid);

    let cell = &forget_gate * &c_prev + &input_gate * &candidate;
    let tanh_cell = cell.mapv(f64::tanh);
    let hidden = &output_gate * &tanh_cell;

    LayerStep {
        concat,
        input_gate,
        forget_gate,
        candidate,
        output_gate,
        cell,
        tanh_cell,
        hidden,
    }
}

/// One recurrent step for a single sample.
pub fn lstm_step(
    params: &LstmLayerParameters,
    state: &LstmLayerState,
    x: ArrayView1<'_, f64>,
) -> Result<(LstmLayerState, GateRecord)> {
    let h = params.hidden();
    if state.h.len() != h || state.c.len() != h || x.len() != params.input_width() {
        return Err(Error::Shape(format!(
            "layer H={h} D={} got state ({}, {}) and input {}",
            params.input_width(),
            state.h.len(),
            state.c.len(),
            x.len()
        )));
    }
    let step = step_batch(
        params,
        state.h.view().insert_axis(Axis(0)),
        state.c.view().insert_axis(Axis(0)),
        x.insert_axis(Axis(0)),
    );
    let row = |a: &Array2<f64>| a.row(0).to_owned();
    Ok((
        LstmLayerState {
            h: row(&step.hidden),
            c: row(&step.cell),
        },
        GateRecord {
            input: row(&step.input_gate),
            forget: row(&step.forget_gate),
            candidate: row(&step.candidate),
            output: row(&step.output_gate),
        },
    ))
}
