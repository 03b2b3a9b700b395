//! AdamW with per-group learning rates and a cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ParamGroup;
use crate::tensor::Tensor;

/// Base learning rate for each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub image_encoder: f64,
    pub text_encoder: f64,
    pub classifier: f64,
    pub other: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        Self {
            image_encoder: 5e-5,
            text_encoder: 2e-5,
            classifier: 1e-3,
            other: 2e-4,
        }
    }
}

impl GroupRates {
    /// The encoders take the rate of the other freshly initialized modules
    /// instead of a fine-tuning rate.
    pub fn from_scratch() -> Self {
        let base = Self::default();
        Self {
            image_encoder: base.other,
            text_encoder: base.other,
            ..base
        }
    }

    pub fn uniform(lr: f64) -> Self {
        Self {
            image_encoder: lr,
            text_encoder: lr,
            classifier: lr,
            other: lr,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::ImageEncoder => self.image_encoder,
            ParamGroup::TextEncoder => self.text_encoder,
            ParamGroup::Classifier => self.classifier,
            ParamGroup::Other => self.other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub rates: GroupRates,
    pub groups: Vec<ParamGroup>,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    /// Zero moments shaped like `params`, with `groups[k]` the group of
    /// `params[k]`.
    pub fn new(
        params: &[Tensor],
        groups: Vec<ParamGroup>,
        rates: GroupRates,
        config: AdamWConfig,
    ) -> Result<Self> {
        if params.len() != groups.len() {
            return Err(shape_err(
                "OptimState::new",
                format!("{} parameters but {} groups", params.len(), groups.len()),
            ));
        }
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        Ok(Self {
            config,
            rates,
            groups,
            first: zeros(),
            second: zeros(),
            step: 0,
        })
    }

    /// One bias-corrected AdamW update with learning rate
    /// `group rate × lr_scale`. Decay is applied to θ before the Adam step.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr_scale: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(shape_err(
                "adamw_step",
                format!(
                    "state has {} buffers, got {} parameters and {} gradients",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[k].shape() || g.shape() != self.first[k].shape() {
                return Err(shape_err(
                    "adamw_step",
                    format!(
                        "parameter {k}: state {:?}, parameter {:?}, gradient {:?}",
                        self.first[k].shape(),
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        if !lr_scale.is_finite() || lr_scale < 0.0 {
            return Err(Error::Config(format!(
                "invalid learning-rate scale {lr_scale}"
            )));
        }

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = self.rates.get(self.groups[k]) * lr_scale;
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * weight_decay * *theta;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `0.5·(1 + cos(π·step/total))`, decaying from 1 to 0 without warmup.
pub fn cosine_lr_scale(step: u64, total: u64) -> Result<f64> {
    if step > total {
        return Err(Error::Config(format!(
            "schedule step {step} exceeds total {total}"
        )));
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(0.5 * (1.0 + (PI * step as f64 / total as f64).cos()))
}
