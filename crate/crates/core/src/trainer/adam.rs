use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Invalid(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moments and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub step: u32,
    pub first: Vec<S>,
    pub second: Vec<S>,
}

impl<S: Scalar> Moments<S> {
    pub fn new(len: usize) -> Self {
        Moments {
            step: 0,
            first: vec![S::zero(); len],
            second: vec![S::zero(); len],
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_update<S: Scalar>(param: &mut [S], grad: &[S], state: &mut Moments<S>, cfg: &AdamConfig) {
    debug_assert_eq!(param.len(), grad.len());
    state.step += 1;
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let one = S::one();
    let t = state.step as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (S::from_f64(cfg.lr), S::from_f64(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        state.first[i] = b1 * state.first[i] + (one - b1) * g;
        state.second[i] = b2 * state.second[i] + (one - b2) * g * g;
        let m_hat = state.first[i] / c1;
        let v_hat = state.second[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over the parameters of one or more networks, keyed by
/// `network/parameter`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    /// Number of optimizer steps taken.
    pub steps: u64,
    pub moments: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `nets` from its accumulated gradient and
    /// replaces it with a fresh leaf.
    pub fn step(&mut self, nets: &mut [&mut Network<S>]) -> Result<()> {
        for net in nets.iter_mut() {
            let kind = net.kind();
            let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
            for name in names {
                let tensor = net.param(&name)?;
                let grad = tensor
                    .grad()
                    .ok_or_else(|| Error::Invalid(format!("parameter {kind}/{name} has no gradient")))?;
                let mut values = tensor.to_vec();
                let state = self
                    .moments
                    .entry(format!("{kind}/{name}"))
                    .or_insert_with(|| Moments::new(values.len()));
                adam_update(&mut values, &grad, state, &self.config);
                net.set_param(&name, values)?;
            }
        }
        self.steps += 1;
        Ok(())
    }
}
