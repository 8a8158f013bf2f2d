use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: &OptimizerConfig) -> Self {
        AdamState {
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        check_pairs(params, grads)?;
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::shape("adam_step", "parameter set changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_pairs<T: Real>(params: &[&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer", format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// Adam, or plain SGD behind the same interface.
#[derive(Debug, Clone)]
pub enum Optimizer<T: Real = f32> {
    Adam(AdamState<T>),
    Sgd { lr: f64 },
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: &OptimizerConfig) -> Self {
        match config.kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(config)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: config.lr },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::Adam(state) => state.step(params, grads),
            Optimizer::Sgd { lr } => {
                check_pairs(params, grads)?;
                let lr = T::from_f64(*lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = *pv - lr * gv;
                    }
                }
                Ok(())
            }
        }
    }
}
