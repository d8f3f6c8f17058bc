use crate::tensor::{Tape, Tensor, REL_ERROR_FLOOR};

use super::{forward, GradScope, GraphBatch, ModelError, ModelParams, Mode};

/// Worst finite-difference disagreement for one named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn loss_value(
    params: &ModelParams,
    batch: &GraphBatch,
    tasks: &[usize],
    target: &Tensor,
    mask: &[bool],
    mode: Mode,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, batch, tasks, mode, GradScope::None)?;
    let loss = tape
        .masked_mse(out.predictions, target, mask)?
        .ok_or(ModelError::EmptyBatch)?;
    Ok(tape.value(loss).item()?)
}

/// Compare tape gradients of the masked MSE loss with central differences
/// for every element of every trainable array. Relative errors use the same
/// floored denominator as [`crate::tensor::grad_check`].
pub fn check_loss_gradients(
    params: &ModelParams,
    batch: &GraphBatch,
    tasks: &[usize],
    target: &Tensor,
    mask: &[bool],
    mode: Mode,
    h: f64,
) -> Result<Vec<ParamGradCheck>, ModelError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, batch, tasks, mode, GradScope::All)?;
    let loss = tape
        .masked_mse(out.predictions, target, mask)?
        .ok_or(ModelError::EmptyBatch)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = out
        .param_vars
        .iter()
        .zip(params.trainable())
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let names = params.trainable_names();
    let mut work = params.clone();
    let mut report = Vec::with_capacity(names.len());
    for (i, name) in names.into_iter().enumerate() {
        let len = analytic[i].len();
        let mut worst = 0.0f64;
        for j in 0..len {
            let x0 = work.trainable()[i].data()[j];
            work.trainable_mut()[i].data_mut()[j] = x0 + h;
            let up = loss_value(&work, batch, tasks, target, mask, mode)?;
            work.trainable_mut()[i].data_mut()[j] = x0 - h;
            let down = loss_value(&work, batch, tasks, target, mask, mode)?;
            work.trainable_mut()[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.push(ParamGradCheck {
            name,
            max_rel_error: worst,
            checked: len,
        });
    }
    Ok(report)
}
