use crate::error::{Error, Result};
use crate::neural::{Gradients, ParamSet, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient; optimizer step skipped".into()));
    }
    if grads.tensors().len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("gradients/optimizer state do not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + EPSILON);
            *x -= lr * update + lr * weight_decay * *x;
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
