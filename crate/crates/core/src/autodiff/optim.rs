use serde::{Deserialize, Serialize};

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Invalid(format!(
                "momentum {} outside [0, 1)",
                config.momentum
            )));
        }
        if config.weight_decay < 0.0 || !config.weight_decay.is_finite() {
            return Err(Error::Invalid("weight decay must be a nonnegative number".into()));
        }
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate {lr} must be positive")));
        }
        if params.len() != grads.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param of {} values, grad of {}", p.len(), g.len()),
                ));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::shape("sgd_step", "optimizer state does not match params"));
        }
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *w;
                *w -= lr * *vi;
            }
            check_finite("updated parameter", p.data())?;
        }
        Ok(())
    }
}
