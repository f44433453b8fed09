//! Gradient extraction, finite-difference verification, and AdamW.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Builds a scalar loss on the tape from registered parameter vars.
pub trait LossFn: Fn(&mut Tape, &[VarId]) -> VarId {}
impl<F: Fn(&mut Tape, &[VarId]) -> VarId> LossFn for F {}

/// Loss value and exact reverse-mode gradients for every parameter.
///
/// Parameters with no path to the loss get a zero gradient of matching
/// shape. A non-finite loss is rejected, naming the first tape node that
/// produced a non-finite value.
pub fn grad(loss_fn: impl LossFn, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &ids);
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        let culprit = tape
            .first_non_finite()
            .map(|(i, op)| format!("node #{i} ({op})"))
            .unwrap_or_else(|| "loss node".to_string());
        return Err(Error::Training {
            iteration: 0,
            message: format!("non-finite loss ({loss_value}); first offending primitive: {culprit}"),
        });
    }
    tape.backward(loss);
    let grads = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((loss_value, grads))
}

/// Loss evaluated with no gradient bookkeeping.
pub fn eval_loss(loss_fn: impl LossFn, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = loss_fn(&mut tape, &ids);
    tape.value(loss).data()[0]
}

/// Central-difference check of the analytic gradient.
///
/// Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-12)`
/// over every coordinate of every parameter.
pub fn finite_diff_check(loss_fn: impl LossFn, params: &[Tensor], step: f64) -> Result<f64> {
    assert!(step > 0.0);
    let (_, analytic) = grad(&loss_fn, params)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval_loss(&loss_fn, &work);
            work[pi].data_mut()[ci] = orig - step;
            let down = eval_loss(&loss_fn, &work);
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// AdamW state: decoupled weight decay, bias-corrected moments, optional
/// linear warmup of the learning rate.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup before `lr` is reached; 0 disables warmup.
    pub warmup_steps: usize,
    pub step_count: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            step_count: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    fn effective_lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// One AdamW update, in place. Decay is applied to the parameter before
/// the Adam step, decoupled from the gradient.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Training {
                iteration: state.step_count,
                message: format!("non-finite gradient in parameter {i}"),
            });
        }
    }
    let lr = state.effective_lr(state.step_count);
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let decay = 1.0 - lr * state.weight_decay;
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *pv *= decay;
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_loss(tape: &mut Tape, params: &[VarId]) -> VarId {
        // sum of squares via x^T x
        let x = params[0];
        let xt = tape.transpose(x);
        tape.matmul(xt, x)
    }

    #[test]
    fn grad_of_square() {
        let p = vec![Tensor::from_vec(1, 1, vec![3.0])];
        let (loss, grads) = grad(quad_loss, &p).unwrap();
        assert!((loss - 9.0).abs() < 1e-12);
        assert!((grads[0].data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let p = vec![Tensor::from_vec(1, 2, vec![1.0, 2.0])];
        let f = |tape: &mut Tape, _params: &[VarId]| {
            let c = tape.param(Tensor::from_vec(1, 1, vec![5.0]));
            tape.scale(c, 1.0)
        };
        let (_, grads) = grad(f, &p).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_on_quadratic_is_tiny() {
        let p = vec![Tensor::from_vec(3, 1, vec![0.5, -1.2, 2.0])];
        let err = finite_diff_check(quad_loss, &p, 1e-4).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params_unchanged() {
        let mut p0 = Tensor::from_vec(1, 2, vec![1.5, -0.5]);
        let grads = vec![Tensor::zeros(1, 2)];
        let mut state = OptimizerState::new(std::slice::from_ref(&p0), 1e-3);
        state.weight_decay = 0.0;
        adamw_step(&mut [&mut p0], &grads, &mut state).unwrap();
        assert_eq!(p0.data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        let mut p0 = Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let grads = vec![Tensor::from_vec(1, 3, vec![0.3, -2.0, 1e-3])];
        let mut state = OptimizerState::new(std::slice::from_ref(&p0), 0.01);
        state.weight_decay = 0.0;
        adamw_step(&mut [&mut p0], &grads, &mut state).unwrap();
        for (p, g) in p0.data().iter().zip(grads[0].data()) {
            // bias-corrected first step is lr * g / (|g| + eps')
            assert!((p.abs() - 0.01).abs() < 1e-4, "p = {p}");
            assert_eq!(p.signum(), -g.signum());
        }
    }

    #[test]
    fn decoupled_decay_shrinks_by_expected_factor() {
        let mut p0 = Tensor::from_vec(1, 1, vec![2.0]);
        let grads = vec![Tensor::zeros(1, 1)];
        let mut state = OptimizerState::new(std::slice::from_ref(&p0), 0.1);
        state.weight_decay = 0.01;
        adamw_step(&mut [&mut p0], &grads, &mut state).unwrap();
        assert!((p0.data()[0] - 2.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p0 = Tensor::from_vec(1, 1, vec![2.0]);
        let grads = vec![Tensor::from_vec(1, 1, vec![f64::NAN])];
        let mut state = OptimizerState::new(std::slice::from_ref(&p0), 0.1);
        assert!(adamw_step(&mut [&mut p0], &grads, &mut state).is_err());
    }

    #[test]
    fn warmup_scales_early_steps() {
        let mut p0 = Tensor::from_vec(1, 1, vec![0.0]);
        let grads = vec![Tensor::from_vec(1, 1, vec![1.0])];
        let mut state = OptimizerState::new(std::slice::from_ref(&p0), 1.0);
        state.weight_decay = 0.0;
        state.warmup_steps = 10;
        adamw_step(&mut [&mut p0], &grads, &mut state).unwrap();
        // first warmup step runs at lr/10
        assert!((p0.data()[0].abs() - 0.1).abs() < 1e-6);
    }
}
