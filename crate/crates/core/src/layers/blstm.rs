//! Bidirectional wrapper over the LSTM cell.
//!
//! The forward direction reads x_1..x_T, the backward direction reads
//! x_T..x_1. `blstm_context` emits the fixed-size concatenation of the two
//! terminal states, forward half first; `blstm_sequence` emits the aligned
//! per-timestep concatenation used to feed a second recurrent layer.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::lstm::{lstm_backward, lstm_forward, LstmParams, LstmSeqCache};

#[derive(Debug, Clone)]
pub struct BlstmCache<F = f32> {
    fwd: LstmSeqCache<F>,
    bwd: LstmSeqCache<F>,
    steps: usize,
    cell_dim: usize,
}

fn check_directions<F: Scalar>(fwd: &LstmParams<F>, bwd: &LstmParams<F>) -> Result<()> {
    if fwd.cell_dim() != bwd.cell_dim() {
        return Err(Error::Config(format!(
            "blstm direction cell_dim mismatch: forward {} vs backward {}",
            fwd.cell_dim(),
            bwd.cell_dim()
        )));
    }
    if fwd.in_dim() != bwd.in_dim() {
        return Err(Error::Config(format!(
            "blstm direction in_dim mismatch: forward {} vs backward {}",
            fwd.in_dim(),
            bwd.in_dim()
        )));
    }
    Ok(())
}

/// Scans the sequence in both directions and concatenates the two terminal
/// hidden states along the feature axis: [h_T of the forward pass ; final
/// state of the backward pass]. Output is batch x 2*cell_dim.
pub fn blstm_context<F: Scalar>(
    fwd: &LstmParams<F>,
    bwd: &LstmParams<F>,
    sequence: &[Tensor<F>],
) -> Result<(Tensor<F>, BlstmCache<F>)> {
    check_directions(fwd, bwd)?;
    let (fwd_h, fwd_cache) = lstm_forward(fwd, sequence)?;
    let reversed: Vec<Tensor<F>> = sequence.iter().rev().cloned().collect();
    let (bwd_h, bwd_cache) = lstm_forward(bwd, &reversed)?;
    let context = Tensor::concat_cols(fwd_h.last().unwrap(), bwd_h.last().unwrap())?;
    Ok((
        context,
        BlstmCache {
            fwd: fwd_cache,
            bwd: bwd_cache,
            steps: sequence.len(),
            cell_dim: fwd.cell_dim(),
        },
    ))
}

/// Gradients of `blstm_context`: splits the context gradient into its two
/// halves, runs BPTT per direction, and merges the per-timestep input
/// gradients back into original sequence order.
pub fn blstm_context_backward<F: Scalar>(
    fwd: &LstmParams<F>,
    bwd: &LstmParams<F>,
    cache: &BlstmCache<F>,
    grad_context: &Tensor<F>,
) -> Result<(LstmParams<F>, LstmParams<F>, Vec<Tensor<F>>)> {
    let cell = cache.cell_dim;
    if grad_context.cols() != 2 * cell {
        return Err(Error::Shape(format!(
            "context gradient must have width {}, got {}",
            2 * cell,
            grad_context.cols()
        )));
    }
    let batch = grad_context.rows();
    let grad_fwd_terminal = grad_context.slice_cols(0, cell)?;
    let grad_bwd_terminal = grad_context.slice_cols(cell, cell)?;

    let zero = Tensor::zeros(batch, cell);
    let mut grad_h_fwd = vec![zero.clone(); cache.steps];
    *grad_h_fwd.last_mut().unwrap() = grad_fwd_terminal;
    let mut grad_h_bwd = vec![zero; cache.steps];
    *grad_h_bwd.last_mut().unwrap() = grad_bwd_terminal;

    let (grads_fwd, grad_x_fwd) = lstm_backward(fwd, &cache.fwd, &grad_h_fwd)?;
    let (grads_bwd, grad_x_bwd) = lstm_backward(bwd, &cache.bwd, &grad_h_bwd)?;

    let mut grad_x = Vec::with_capacity(cache.steps);
    for t in 0..cache.steps {
        grad_x.push(grad_x_fwd[t].add(&grad_x_bwd[cache.steps - 1 - t])?);
    }
    Ok((grads_fwd, grads_bwd, grad_x))
}

/// Per-timestep bidirectional outputs: position t carries [h_t of the
/// forward scan ; the backward-scan state that has consumed x_T..x_t].
pub fn blstm_sequence<F: Scalar>(
    fwd: &LstmParams<F>,
    bwd: &LstmParams<F>,
    sequence: &[Tensor<F>],
) -> Result<(Vec<Tensor<F>>, BlstmCache<F>)> {
    check_directions(fwd, bwd)?;
    let (fwd_h, fwd_cache) = lstm_forward(fwd, sequence)?;
    let reversed: Vec<Tensor<F>> = sequence.iter().rev().cloned().collect();
    let (bwd_h, bwd_cache) = lstm_forward(bwd, &reversed)?;
    let steps = sequence.len();
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        outputs.push(Tensor::concat_cols(&fwd_h[t], &bwd_h[steps - 1 - t])?);
    }
    Ok((
        outputs,
        BlstmCache {
            fwd: fwd_cache,
            bwd: bwd_cache,
            steps,
            cell_dim: fwd.cell_dim(),
        },
    ))
}

/// Gradients of `blstm_sequence` given a gradient per aligned output.
pub fn blstm_sequence_backward<F: Scalar>(
    fwd: &LstmParams<F>,
    bwd: &LstmParams<F>,
    cache: &BlstmCache<F>,
    grad_outputs: &[Tensor<F>],
) -> Result<(LstmParams<F>, LstmParams<F>, Vec<Tensor<F>>)> {
    if grad_outputs.len() != cache.steps {
        return Err(Error::Shape(format!(
            "expected {} output gradients, got {}",
            cache.steps,
            grad_outputs.len()
        )));
    }
    let cell = cache.cell_dim;
    let steps = cache.steps;
    let mut grad_h_fwd = Vec::with_capacity(steps);
    let mut grad_h_bwd = vec![Tensor::zeros(0, 0); steps];
    for (t, g) in grad_outputs.iter().enumerate() {
        grad_h_fwd.push(g.slice_cols(0, cell)?);
        grad_h_bwd[steps - 1 - t] = g.slice_cols(cell, cell)?;
    }
    let (grads_fwd, grad_x_fwd) = lstm_backward(fwd, &cache.fwd, &grad_h_fwd)?;
    let (grads_bwd, grad_x_bwd) = lstm_backward(bwd, &cache.bwd, &grad_h_bwd)?;
    let mut grad_x = Vec::with_capacity(steps);
    for t in 0..steps {
        grad_x.push(grad_x_fwd[t].add(&grad_x_bwd[steps - 1 - t])?);
    }
    Ok((grads_fwd, grads_bwd, grad_x))
}
