//! AdamW: bias-corrected Adam moments with decoupled weight decay,
//! `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::Gradients;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self { learning_rate: 1e-3, betas: (0.9, 0.999), weight_decay: 0.0, epochs: 20, batch_size: 32, seed: 11 }
    }

    pub fn finetune_default() -> Self {
        Self { learning_rate: 4e-4, ..Self::pretrain_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got ({b1}, {b2})")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols) }
    }
}

/// One AdamW update of a single tensor. `step` counts from 1.
pub fn adamw_step(param: &mut Matrix, grad: &Matrix, state: &mut Moments, cfg: &TrainConfig, step: u64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(Error::Shape(format!(
            "adamw: param {:?}, grad {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if step == 0 {
        return Err(Error::Param("adamw step counter starts at 1".into()));
    }
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, &g), mi), vi) in param.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p = *p * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Optimizer state for a named parameter set.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: TrainConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: TrainConfig) -> Self {
        Self { cfg, step: 0, state: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient entry. Parameters must
    /// all have gradients; extra gradient names are an error.
    pub fn step(&mut self, params: Vec<(String, &mut Matrix)>, grads: &Gradients) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        self.step += 1;
        for (name, p) in params {
            let g = grads.get(&name).ok_or_else(|| Error::MissingTensor(format!("gradient for {name}")))?;
            let state = self.state.entry(name).or_insert_with(|| Moments::zeros(p.rows(), p.cols()));
            adamw_step(p, g, state, &self.cfg, self.step)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, weight_decay: wd, ..TrainConfig::pretrain_default() }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let before = p.clone();
        let mut st = Moments::zeros(1, 2);
        for step in 1..=5 {
            adamw_step(&mut p, &Matrix::zeros(1, 2), &mut st, &cfg(0.1, 0.0), step).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_scalar() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr/(1 + ε).
        let mut p = Matrix::from_rows(&[[1.0]]).unwrap();
        let mut st = Moments::zeros(1, 1);
        adamw_step(&mut p, &Matrix::from_rows(&[[1.0]]).unwrap(), &mut st, &cfg(0.1, 0.0), 1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + ADAM_EPS);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = Matrix::from_rows(&[[2.0]]).unwrap();
        let mut st = Moments::zeros(1, 1);
        let c = cfg(0.1, 0.5);
        let mut expected = 2.0;
        for step in 1..=3 {
            adamw_step(&mut p, &Matrix::zeros(1, 1), &mut st, &c, step).unwrap();
            expected *= 1.0 - 0.1 * 0.5;
            assert!((p.get(0, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_and_step_errors() {
        let mut p = Matrix::zeros(1, 2);
        let mut st = Moments::zeros(1, 2);
        assert!(adamw_step(&mut p, &Matrix::zeros(2, 1), &mut st, &cfg(0.1, 0.0), 1).is_err());
        assert!(adamw_step(&mut p, &Matrix::zeros(1, 2), &mut st, &cfg(0.1, 0.0), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::finetune_default().validate().is_ok());
        let bad = TrainConfig { betas: (0.9, 1.0), ..TrainConfig::finetune_default() };
        assert!(bad.validate().is_err());
        assert!(cfg(0.0, 0.0).validate().is_err());
    }
}
