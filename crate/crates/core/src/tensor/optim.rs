use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, ParamSet, Tensor};
use crate::error::{Error, Result};

fn grad_for<'a>(grads: &'a Grads, name: &str, value: &Tensor) -> Result<&'a Tensor> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
    if g.shape() != value.shape() {
        return Err(Error::ShapeMismatch {
            op: "optimizer step",
            lhs: value.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    Ok(g)
}

/// `params - lr * grads`, returned as a new set.
pub fn sgd_step(params: &ParamSet, grads: &Grads, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    for (name, value) in params.iter() {
        let g = grad_for(grads, name, value)?;
        if lr == 0.0 {
            continue;
        }
        let data = value
            .data()
            .iter()
            .zip(g.data())
            .map(|(p, d)| p - lr * d)
            .collect();
        out.set(name, Tensor::new(value.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a parameter set.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParamSet, grads: &Grads, lr: f64) -> Result<ParamSet> {
        for (name, value) in params.iter() {
            grad_for(grads, name, value)?;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut out = params.clone();
        for (name, value) in params.iter() {
            let g = grads.get(name).unwrap();
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.len()]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.len()]);
            let mut data = value.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            out.set(name, Tensor::new(value.shape().to_vec(), data)?)?;
        }
        Ok(out)
    }
}

/// One Adam update from fresh state.
pub fn adam_step(
    params: &ParamSet,
    grads: &Grads,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<ParamSet> {
    Adam::new(AdamConfig { beta1, beta2, eps }).step(params, grads, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Stateful optimizer used for outer and pretraining loops.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig::default())),
        }
    }

    pub fn step(&mut self, params: &ParamSet, grads: &Grads, lr: f64) -> Result<ParamSet> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam(adam) => adam.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn sgd_on_square_from_three() {
        let p = single("x", 3.0);
        let mut g = Grads::default();
        g.insert("x", Tensor::scalar(6.0));
        let next = sgd_step(&p, &g, 0.1).unwrap();
        assert!((next.get("x").unwrap().item() - 2.4).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_identity() {
        let p = single("x", 3.0);
        let mut g = Grads::default();
        g.insert("x", Tensor::scalar(123.0));
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let p = single("x", 3.0);
        assert!(matches!(
            sgd_step(&p, &Grads::default(), 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn adam_first_step_closed_form() {
        // After bias correction, step 1 moves by lr * g / (|g| + eps).
        let p = single("x", 1.0);
        let mut g = Grads::default();
        g.insert("x", Tensor::scalar(0.5));
        let next = adam_step(&p, &g, 0.01, 0.9, 0.999, 1e-8).unwrap();
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((next.get("x").unwrap().item() - expected).abs() < 1e-12);
    }
}
