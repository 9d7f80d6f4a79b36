use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay applied before the moment update.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl OptimizerSettings {
    pub fn adam(lr: f32) -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f32, weight_decay: f32) -> Self {
        OptimizerSettings {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    shape: (usize, usize),
    steps: u64,
}

/// Adam/AdamW state keyed by parameter name, so parameters that sit out a step
/// keep their moments untouched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over `params`. Every parameter must carry a gradient; the
    /// gradients are left in place for the caller to clear.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter {name} has no gradient")));
            }
        }
        let s = self.settings;
        for (name, p) in params.iter_mut() {
            let shape = p.shape();
            let st = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                    shape,
                    steps: 0,
                });
            if st.shape != shape {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    left: st.shape,
                    right: shape,
                });
            }
            st.steps += 1;
            let t = st.steps as i32;
            let bc1 = 1.0 - f64::from(s.beta1).powi(t);
            let bc2 = 1.0 - f64::from(s.beta2).powi(t);
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for i in 0..data.len() {
                let mut g = grad[i];
                match s.kind {
                    OptimizerKind::AdamW => data[i] -= s.lr * s.weight_decay * data[i],
                    OptimizerKind::Adam => g += s.weight_decay * data[i],
                }
                st.m[i] = s.beta1 * st.m[i] + (1.0 - s.beta1) * g;
                st.v[i] = s.beta2 * st.v[i] + (1.0 - s.beta2) * g * g;
                let m_hat = f64::from(st.m[i]) / bc1;
                let v_hat = f64::from(st.v[i]) / bc2;
                data[i] -= (f64::from(s.lr) * m_hat / (v_hat.sqrt() + f64::from(s.eps))) as f32;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
