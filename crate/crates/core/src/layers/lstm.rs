//! Bias-free LSTM cell with cell-activation clipping, iterated forward over
//! a sequence, and exact backpropagation through time.
//!
//! The recurrence, in row-vector convention (inputs are batch x in_dim,
//! weights in_dim x cell or cell x cell):
//!
//!   i_t = sigmoid(x_t W_xi + h_{t-1} W_hi)
//!   f_t = sigmoid(x_t W_xf + h_{t-1} W_hf)
//!   c_t = clamp(f_t * c_{t-1} + i_t * tanh(x_t W_xc + h_{t-1} W_hc), clip)
//!   o_t = sigmoid(x_t W_xo + h_{t-1} W_ho)
//!   h_t = o_t * tanh(c_t)
//!
//! There are no bias terms and no peephole connections. The clamp keeps the
//! stored cell state inside [-cell_clip, cell_clip]; its backward rule is a
//! hard subgradient (identity inside the interval, zero outside).

use crate::error::{Error, Result};
use crate::tensor::{clip, sigmoid, tanh_op, Scalar, Tensor};

pub const DEFAULT_CELL_CLIP: f64 = 3.0;

/// The eight weight matrices of the cell. No biases, no peepholes.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<F = f32> {
    pub w_xi: Tensor<F>,
    pub w_hi: Tensor<F>,
    pub w_xf: Tensor<F>,
    pub w_hf: Tensor<F>,
    pub w_xc: Tensor<F>,
    pub w_hc: Tensor<F>,
    pub w_xo: Tensor<F>,
    pub w_ho: Tensor<F>,
    pub cell_clip: F,
}

impl<F: Scalar> LstmParams<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_xi: Tensor<F>,
        w_hi: Tensor<F>,
        w_xf: Tensor<F>,
        w_hf: Tensor<F>,
        w_xc: Tensor<F>,
        w_hc: Tensor<F>,
        w_xo: Tensor<F>,
        w_ho: Tensor<F>,
        cell_clip: F,
    ) -> Result<Self> {
        let (in_dim, cell) = w_xi.shape();
        for (name, m, rows, cols) in [
            ("w_hi", &w_hi, cell, cell),
            ("w_xf", &w_xf, in_dim, cell),
            ("w_hf", &w_hf, cell, cell),
            ("w_xc", &w_xc, in_dim, cell),
            ("w_hc", &w_hc, cell, cell),
            ("w_xo", &w_xo, in_dim, cell),
            ("w_ho", &w_ho, cell, cell),
        ] {
            if m.shape() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "lstm {name} must be {rows}x{cols}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if !(cell_clip > F::zero()) {
            return Err(Error::Config(format!(
                "cell_clip must be positive, got {cell_clip}"
            )));
        }
        Ok(Self {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xc,
            w_hc,
            w_xo,
            w_ho,
            cell_clip,
        })
    }

    pub fn zeros(in_dim: usize, cell_dim: usize) -> Self {
        Self {
            w_xi: Tensor::zeros(in_dim, cell_dim),
            w_hi: Tensor::zeros(cell_dim, cell_dim),
            w_xf: Tensor::zeros(in_dim, cell_dim),
            w_hf: Tensor::zeros(cell_dim, cell_dim),
            w_xc: Tensor::zeros(in_dim, cell_dim),
            w_hc: Tensor::zeros(cell_dim, cell_dim),
            w_xo: Tensor::zeros(in_dim, cell_dim),
            w_ho: Tensor::zeros(cell_dim, cell_dim),
            cell_clip: F::from_f64(DEFAULT_CELL_CLIP),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_xi.rows()
    }

    pub fn cell_dim(&self) -> usize {
        self.w_xi.cols()
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|(_, m)| m.len()).sum()
    }

    /// The matrices in their canonical order.
    pub fn matrices(&self) -> [(&'static str, &Tensor<F>); 8] {
        [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("w_xc", &self.w_xc),
            ("w_hc", &self.w_hc),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 8] {
        [
            ("w_xi", &mut self.w_xi),
            ("w_hi", &mut self.w_hi),
            ("w_xf", &mut self.w_xf),
            ("w_hf", &mut self.w_hf),
            ("w_xc", &mut self.w_xc),
            ("w_hc", &mut self.w_hc),
            ("w_xo", &mut self.w_xo),
            ("w_ho", &mut self.w_ho),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.in_dim(), self.cell_dim());
        z.cell_clip = self.cell_clip;
        z
    }

    pub fn to_precision<G: Scalar>(&self) -> LstmParams<G> {
        LstmParams {
            w_xi: self.w_xi.to_precision(),
            w_hi: self.w_hi.to_precision(),
            w_xf: self.w_xf.to_precision(),
            w_hf: self.w_hf.to_precision(),
            w_xc: self.w_xc.to_precision(),
            w_hc: self.w_hc.to_precision(),
            w_xo: self.w_xo.to_precision(),
            w_ho: self.w_ho.to_precision(),
            cell_clip: G::from_f64(self.cell_clip.as_f64()),
        }
    }
}

/// Hidden and cell state after a step; batch x cell_dim each.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStepState<F = f32> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
}

impl<F: Scalar> LstmStepState<F> {
    pub fn zeros(batch: usize, cell_dim: usize) -> Self {
        Self {
            h: Tensor::zeros(batch, cell_dim),
            c: Tensor::zeros(batch, cell_dim),
        }
    }
}

/// Everything the backward pass needs from one step.
#[derive(Debug, Clone)]
pub struct LstmStepCache<F = f32> {
    pub x: Tensor<F>,
    pub h_prev: Tensor<F>,
    pub c_prev: Tensor<F>,
    pub input_gate: Tensor<F>,
    pub forget_gate: Tensor<F>,
    pub candidate: Tensor<F>,
    pub output_gate: Tensor<F>,
    /// cell state before clipping, for the hard-clip subgradient
    pub c_raw: Tensor<F>,
    pub tanh_c: Tensor<F>,
}

pub type LstmSeqCache<F = f32> = Vec<LstmStepCache<F>>;

/// One recurrence step from `prev`; clipping is applied to the cell state
/// before it reaches the output gate product.
pub fn lstm_step<F: Scalar>(
    params: &LstmParams<F>,
    x_t: &Tensor<F>,
    prev: &LstmStepState<F>,
) -> Result<(LstmStepState<F>, LstmStepCache<F>)> {
    if x_t.cols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "lstm_step expected input width {}, got {}x{}",
            params.in_dim(),
            x_t.rows(),
            x_t.cols()
        )));
    }
    let (batch, cell) = (x_t.rows(), params.cell_dim());
    if prev.h.shape() != (batch, cell) || prev.c.shape() != (batch, cell) {
        return Err(Error::Shape(format!(
            "lstm_step expected state {batch}x{cell}, got h {}x{} c {}x{}",
            prev.h.rows(),
            prev.h.cols(),
            prev.c.rows(),
            prev.c.cols()
        )));
    }

    let gate = |wx: &Tensor<F>, wh: &Tensor<F>| -> Result<Tensor<F>> {
        x_t.matmul(wx)?.add(&prev.h.matmul(wh)?)
    };
    let input_gate = sigmoid(&gate(&params.w_xi, &params.w_hi)?);
    let forget_gate = sigmoid(&gate(&params.w_xf, &params.w_hf)?);
    let candidate = tanh_op(&gate(&params.w_xc, &params.w_hc)?);
    let c_raw = forget_gate
        .hadamard(&prev.c)?
        .add(&input_gate.hadamard(&candidate)?)?;
    let c = clip(&c_raw, params.cell_clip)?;
    let output_gate = sigmoid(&gate(&params.w_xo, &params.w_ho)?);
    let tanh_c = tanh_op(&c);
    let h = output_gate.hadamard(&tanh_c)?;

    Ok((
        LstmStepState { h, c },
        LstmStepCache {
            x: x_t.clone(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            input_gate,
            forget_gate,
            candidate,
            output_gate,
            c_raw,
            tanh_c,
        },
    ))
}

/// Iterated `lstm_step` from a zero initial state; returns every hidden
/// state h_1..h_T.
pub fn lstm_forward<F: Scalar>(
    params: &LstmParams<F>,
    sequence: &[Tensor<F>],
) -> Result<(Vec<Tensor<F>>, LstmSeqCache<F>)> {
    let first = sequence
        .first()
        .ok_or_else(|| Error::Input("lstm_forward requires a nonempty sequence".to_string()))?;
    let batch = first.rows();
    let mut state = LstmStepState::zeros(batch, params.cell_dim());
    let mut hidden = Vec::with_capacity(sequence.len());
    let mut caches = Vec::with_capacity(sequence.len());
    for x_t in sequence {
        let (next, cache) = lstm_step(params, x_t, &state)?;
        hidden.push(next.h.clone());
        caches.push(cache);
        state = next;
    }
    Ok((hidden, caches))
}

/// Exact BPTT. `grad_h[t]` is the loss gradient arriving at h_{t+1} from
/// outside the recurrence; positions with no external gradient get zero
/// tensors. Returns parameter gradients in LstmParams shape and the input
/// gradient per timestep.
pub fn lstm_backward<F: Scalar>(
    params: &LstmParams<F>,
    caches: &[LstmStepCache<F>],
    grad_h: &[Tensor<F>],
) -> Result<(LstmParams<F>, Vec<Tensor<F>>)> {
    if caches.len() != grad_h.len() {
        return Err(Error::Shape(format!(
            "lstm_backward got {} caches but {} hidden gradients",
            caches.len(),
            grad_h.len()
        )));
    }
    if caches.is_empty() {
        return Err(Error::Input(
            "lstm_backward requires at least one step".to_string(),
        ));
    }
    let one = F::one();
    let limit = params.cell_clip;
    let mut grads = params.zeros_like();
    let mut grad_x = vec![Tensor::zeros(0, 0); caches.len()];

    let batch = caches[0].x.rows();
    let cell = params.cell_dim();
    let mut dh_carry = Tensor::zeros(batch, cell);
    let mut dc_carry = Tensor::zeros(batch, cell);

    for (t, cache) in caches.iter().enumerate().rev() {
        let dh = grad_h[t].add(&dh_carry)?;
        // through h = o * tanh(c)
        let do_pre = dh
            .hadamard(&cache.tanh_c)?
            .zip_map(&cache.output_gate, |g, o| g * o * (one - o))?;
        let dc_clipped = dh
            .hadamard(&cache.output_gate)?
            .zip_map(&cache.tanh_c, |g, th| g * (one - th * th))?
            .add(&dc_carry)?;
        // hard-clip subgradient: zero where forward clipping was active
        let dc = dc_clipped.zip_map(&cache.c_raw, |g, raw| {
            if raw.abs() <= limit {
                g
            } else {
                F::zero()
            }
        })?;
        let di_pre = dc
            .hadamard(&cache.candidate)?
            .zip_map(&cache.input_gate, |g, i| g * i * (one - i))?;
        let df_pre = dc
            .hadamard(&cache.c_prev)?
            .zip_map(&cache.forget_gate, |g, f| g * f * (one - f))?;
        let dg_pre = dc
            .hadamard(&cache.input_gate)?
            .zip_map(&cache.candidate, |g, cand| g * (one - cand * cand))?;

        grads.w_xi.add_assign_scaled(&cache.x.matmul_at_b(&di_pre)?, one)?;
        grads.w_hi.add_assign_scaled(&cache.h_prev.matmul_at_b(&di_pre)?, one)?;
        grads.w_xf.add_assign_scaled(&cache.x.matmul_at_b(&df_pre)?, one)?;
        grads.w_hf.add_assign_scaled(&cache.h_prev.matmul_at_b(&df_pre)?, one)?;
        grads.w_xc.add_assign_scaled(&cache.x.matmul_at_b(&dg_pre)?, one)?;
        grads.w_hc.add_assign_scaled(&cache.h_prev.matmul_at_b(&dg_pre)?, one)?;
        grads.w_xo.add_assign_scaled(&cache.x.matmul_at_b(&do_pre)?, one)?;
        grads.w_ho.add_assign_scaled(&cache.h_prev.matmul_at_b(&do_pre)?, one)?;

        let mut dx = di_pre.matmul_a_bt(&params.w_xi)?;
        dx.add_assign_scaled(&df_pre.matmul_a_bt(&params.w_xf)?, one)?;
        dx.add_assign_scaled(&dg_pre.matmul_a_bt(&params.w_xc)?, one)?;
        dx.add_assign_scaled(&do_pre.matmul_a_bt(&params.w_xo)?, one)?;
        grad_x[t] = dx;

        let mut dh_prev = di_pre.matmul_a_bt(&params.w_hi)?;
        dh_prev.add_assign_scaled(&df_pre.matmul_a_bt(&params.w_hf)?, one)?;
        dh_prev.add_assign_scaled(&dg_pre.matmul_a_bt(&params.w_hc)?, one)?;
        dh_prev.add_assign_scaled(&do_pre.matmul_a_bt(&params.w_ho)?, one)?;
        dh_carry = dh_prev;
        dc_carry = dc.hadamard(&cache.forget_gate)?;
    }

    Ok((grads, grad_x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(w: f64) -> LstmParams<f64> {
        LstmParams::new(
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            Tensor::filled(1, 1, w),
            3.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_zero_state_fixed_point() {
        let params = LstmParams::<f64>::zeros(3, 2);
        let x = Tensor::filled(2, 3, 1.5);
        let prev = LstmStepState::zeros(2, 2);
        let (next, _) = lstm_step(&params, &x, &prev).unwrap();
        assert_eq!(next.h, Tensor::zeros(2, 2));
        assert_eq!(next.c, Tensor::zeros(2, 2));
    }

    #[test]
    fn no_bias_pathway_exists() {
        // shifting the input of a zero-weight cell cannot move h
        let params = LstmParams::<f64>::zeros(2, 2);
        for shift in [0.0, 1.0, -3.5, 100.0] {
            let x = Tensor::filled(1, 2, shift);
            let (hs, _) = lstm_forward(&params, &[x.clone(), x]).unwrap();
            for h in hs {
                assert_eq!(h, Tensor::zeros(1, 2));
            }
        }
    }

    #[test]
    fn scalar_all_ones_matches_frozen_oracle_values() {
        // frozen from the standalone straight-line script
        let params = scalar_params(1.0);
        let x = Tensor::filled(1, 1, 1.0);
        let (next, _) = lstm_step(&params, &x, &LstmStepState::zeros(1, 1)).unwrap();
        assert!((next.c.get(0, 0) - 0.5567699411459397).abs() < 1e-3);
        assert!((next.h.get(0, 0) - 0.36960635293570576).abs() < 1e-3);
    }

    #[test]
    fn forward_t1_equals_single_step() {
        let params = scalar_params(0.7);
        let x = Tensor::filled(1, 1, -0.4);
        let (step, _) = lstm_step(&params, &x, &LstmStepState::zeros(1, 1)).unwrap();
        let (hs, _) = lstm_forward(&params, &[x]).unwrap();
        assert_eq!(hs.len(), 1);
        assert_eq!(hs[0], step.h);
    }

    #[test]
    fn forward_t3_matches_iterated_oracle() {
        // frozen from the standalone straight-line script at T=3
        let params = scalar_params(1.0);
        let xs = vec![
            Tensor::filled(1, 1, 1.0),
            Tensor::filled(1, 1, 1.0),
            Tensor::filled(1, 1, 1.0),
        ];
        let (hs, _) = lstm_forward(&params, &xs).unwrap();
        let expected = [0.36960635293570576, 0.6505352232008134, 0.7887658277404594];
        for (h, e) in hs.iter().zip(expected) {
            assert!((h.get(0, 0) - e).abs() < 1e-5, "{} vs {e}", h.get(0, 0));
        }
    }

    #[test]
    fn cell_clip_engages_exactly_at_limit() {
        let params = scalar_params(10.0);
        let xs: Vec<Tensor<f64>> = (0..6).map(|_| Tensor::filled(1, 1, 1.0)).collect();
        let (_, caches) = lstm_forward(&params, &xs).unwrap();
        let last = caches.last().unwrap();
        assert!(last.c_raw.get(0, 0) > 3.0);
        let (state, _) = lstm_step(
            &params,
            &xs[0],
            &LstmStepState {
                h: Tensor::filled(1, 1, 0.9),
                c: Tensor::filled(1, 1, 2.9),
            },
        )
        .unwrap();
        assert_eq!(state.c.get(0, 0), 3.0);
    }

    #[test]
    fn clip_bound_holds_after_every_step() {
        let mut state = LstmStepState::zeros(1, 1);
        let params = scalar_params(5.0);
        for _ in 0..10 {
            let x = Tensor::filled(1, 1, 2.0);
            let (next, _) = lstm_step(&params, &x, &state).unwrap();
            assert!(next.c.get(0, 0).abs() <= 3.0);
            state = next;
        }
    }

    #[test]
    fn zero_weight_sequence_gives_zero_hidden() {
        let params = LstmParams::<f32>::zeros(2, 3);
        let xs: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::filled(2, 2, 0.8)).collect();
        let (hs, _) = lstm_forward(&params, &xs).unwrap();
        for h in hs {
            assert_eq!(h, Tensor::zeros(2, 3));
        }
    }

    #[test]
    fn empty_sequence_is_input_error() {
        let params = LstmParams::<f32>::zeros(2, 3);
        let err = lstm_forward(&params, &[]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn zero_grad_h_gives_zero_grads() {
        let params = scalar_params(0.8);
        let xs = vec![Tensor::filled(1, 1, 0.5), Tensor::filled(1, 1, -0.5)];
        let (_, caches) = lstm_forward(&params, &xs).unwrap();
        let zeros = vec![Tensor::zeros(1, 1), Tensor::zeros(1, 1)];
        let (grads, grad_x) = lstm_backward(&params, &caches, &zeros).unwrap();
        for (_, m) in grads.matrices() {
            assert_eq!(*m, Tensor::zeros(1, 1));
        }
        for g in grad_x {
            assert_eq!(g, Tensor::zeros(1, 1));
        }
    }

    #[test]
    fn backward_length_mismatch_is_shape_error() {
        let params = scalar_params(0.8);
        let xs = vec![Tensor::filled(1, 1, 0.5)];
        let (_, caches) = lstm_forward(&params, &xs).unwrap();
        let err = lstm_backward(&params, &caches, &[]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
