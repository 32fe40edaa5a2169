use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::nn::{forward_batch, DropoutMasks, ForwardTrace, Gradients, LstmClassifier};

use super::cross_entropy_batch;

/// Analytic gradients of the batch-mean cross-entropy with respect to every
/// parameter, by backpropagation through time. `targets` is `B × classes`.
pub fn backward(model: &LstmClassifier, trace: &ForwardTrace, targets: ArrayView2<'_, f64>) -> Result<Gradients> {
    let config = &model.config;
    let batch = trace.batch_size();
    if trace.len() != config.window
        || trace.steps.iter().any(|layers| layers.len() != config.layers)
        || targets.dim() != (batch, config.classes)
        || trace.steps[0][0].hidden.ncols() != config.hidden
    {
        return Err(Error::Shape("trace does not match the model or targets".into()));
    }
    let h = config.hidden;
    let mut grads = model.params.zeros_like();

    let dlogits = (&trace.probabilities - &targets) / batch as f64;
    grads.dense.weights = dlogits.t().dot(&trace.top_hidden());
    grads.dense.bias = dlogits.sum_axis(Axis(0));
    let dh_top = dlogits.dot(&model.params.dense.weights);

    let zeros = Array2::<f64>::zeros((batch, h));
    let mut dh_next = vec![zeros.clone(); config.layers];
    let mut dc_next = vec![zeros.clone(); config.layers];

    for t in (0..config.window).rev() {
        // Gradient reaching the current layer's h_t from the layer above.
        let mut from_above: Option<Array2<f64>> = (t + 1 == config.window).then(|| dh_top.clone());
        for l in (0..config.layers).rev() {
            let step = &trace.steps[t][l];
            let params = &model.params.layers[l];
            let mut dh = std::mem::replace(&mut dh_next[l], zeros.clone());
            if let Some(extra) = from_above.take() {
                dh += &extra;
            }
            let c_prev = if t == 0 { zeros.view() } else { trace.steps[t - 1][l].cell.view() };

            let d_out = &dh * &step.tanh_cell;
            let mut dc = &dh * &step.output_gate * &step.tanh_cell.mapv(|v| 1.0 - v * v);
            dc += &dc_next[l];
            let d_in = &dc * &step.candidate;
            let d_forget = &dc * &c_prev;
            let d_cand = &dc * &step.input_gate;
            dc_next[l] = &dc * &step.forget_gate;

            let mut dz = Array2::<f64>::zeros((batch, 4 * h));
            dz.slice_mut(s![.., 0..h])
                .assign(&(&d_in * &step.input_gate.mapv(|g| g * (1.0 - g))));
            dz.slice_mut(s![.., h..2 * h])
                .assign(&(&d_forget * &step.forget_gate.mapv(|g| g * (1.0 - g))));
            dz.slice_mut(s![.., 2 * h..3 * h])
                .assign(&(&d_cand * &step.candidate.mapv(|g| 1.0 - g * g)));
            dz.slice_mut(s![.., 3 * h..4 * h])
                .assign(&(&d_out * &step.output_gate.mapv(|g| g * (1.0 - g))));

            let layer_grads = &mut grads.layers[l];
            ndarray::linalg::general_mat_mul(1.0, &dz.t(), &step.concat, 1.0, &mut layer_grads.weights);
            layer_grads.bias += &dz.sum_axis(Axis(0));

            let dconcat = dz.dot(&params.weights);
            dh_next[l] = dconcat.slice(s![.., ..h]).to_owned();
            if l > 0 {
                let mut dx = dconcat.slice(s![.., h..]).to_owned();
                if let Some(masks) = &trace.masks {
                    dx *= &masks.masks[l - 1][t];
                }
                from_above = Some(dx);
            }
        }
    }
    Ok(grads)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Batch-mean cross-entropy of a forward pass with the given (frozen) masks.
pub fn batch_loss(
    model: &LstmClassifier,
    inputs: ArrayView3<'_, f64>,
    targets: ArrayView2<'_, f64>,
    masks: Option<&DropoutMasks>,
) -> Result<f64> {
    let trace = forward_batch(model, inputs, masks)?;
    Ok(cross_entropy_batch(&trace.probabilities, targets))
}

/// Central difference `(L(θ + ε e_i) − L(θ − ε e_i)) / 2ε` at flat
/// coordinate `index`, masks held fixed for both evaluations.
pub fn finite_difference_gradient(
    model: &LstmClassifier,
    inputs: ArrayView3<'_, f64>,
    targets: ArrayView2<'_, f64>,
    masks: Option<&DropoutMasks>,
    index: usize,
    epsilon: f64,
) -> Result<f64> {
    let theta = model
        .params
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("coordinate {index} out of range")))?;
    let mut probe = model.clone();
    probe.params.set(index, theta + epsilon);
    let plus = batch_loss(&probe, inputs, targets, masks)?;
    probe.params.set(index, theta - epsilon);
    let minus = batch_loss(&probe, inputs, targets, masks)?;
    Ok((plus - minus) / (2.0 * epsilon))
}
