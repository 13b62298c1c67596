use std::collections::BTreeMap;
use std::path::Path;

use css_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};
use crate::model::{decode_container, encode_container, ConformerConfig};
use crate::Float;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay λ.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub const PEAK_LEARNING_RATE: f64 = 1e-4;

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// One parameter with its gradient.
pub struct Param<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn cast<U: Float>(&self) -> OptimizerState<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        OptimizerState {
            config: self.config,
            step: self.step,
            m: conv(&self.m),
            v: conv(&self.v),
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·λ·p`.
///
/// Every gradient is checked first; a non-finite one aborts the step
/// before anything changes and names the parameter.
pub fn adamw_step<T: Float>(params: &mut [Param<'_, T>], state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    for p in params.iter() {
        if p.grad.shape() != p.value.shape() {
            return Err(CssError::Shape {
                name: p.name.into(),
                expected: p.value.shape().to_vec(),
                found: p.grad.shape().to_vec(),
            });
        }
        if !p.grad.all_finite() {
            return Err(CssError::NonFinite(format!("gradient of `{}`", p.name)));
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(p.name) {
                if t.shape() != p.value.shape() {
                    return Err(CssError::Shape {
                        name: format!("optimizer moment of {}", p.name),
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = T::lit(1.0 - c.beta1.powf(t));
    let bc2 = T::lit(1.0 - c.beta2.powf(t));
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one, eps, lr_t, decay) = (T::one(), T::lit(c.eps), T::lit(lr), T::lit(lr * c.weight_decay));
    for p in params.iter_mut() {
        let shape = p.value.shape().to_vec();
        let m = state.m.entry(p.name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(p.name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
        }
    }
    Ok(())
}

/// Writes the moments and step counter in the weights container layout,
/// as tensors `m/<name>`, `v/<name>` and `step`.
pub fn save_optimizer<T: Float>(state: &OptimizerState<T>, config: &ConformerConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
    for (prefix, map) in [("m", &state.m), ("v", &state.v)] {
        for (k, t) in map {
            named.push((format!("{prefix}/{k}"), t.cast()));
        }
    }
    // Split the counter into two exactly representable halves.
    let step = Tensor::new(vec![2], vec![(state.step >> 20) as f32, (state.step & 0xF_FFFF) as f32])?;
    named.push(("step".into(), step));
    let bytes = encode_container(config, named.iter().map(|(k, t)| (k.as_str(), t)));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_optimizer<T: Float>(path: impl AsRef<Path>, adam: AdamWConfig) -> Result<(ConformerConfig, OptimizerState<T>)> {
    let bytes = std::fs::read(path)?;
    let (config, tensors) = decode_container(&bytes)?;
    let mut state = OptimizerState::new(adam);
    let mut step = None;
    for (name, t) in tensors {
        if let Some(k) = name.strip_prefix("m/") {
            state.m.insert(k.to_string(), t.cast());
        } else if let Some(k) = name.strip_prefix("v/") {
            state.v.insert(k.to_string(), t.cast());
        } else if name == "step" && t.len() == 2 {
            step = Some(((t.data()[0] as u64) << 20) | t.data()[1] as u64);
        } else {
            return Err(CssError::CorruptFile(format!("unexpected tensor `{name}` in optimizer state")));
        }
    }
    state.step = step.ok_or_else(|| CssError::CorruptFile("optimizer state has no step counter".into()))?;
    Ok((config, state))
}
