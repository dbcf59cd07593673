use serde::{Deserialize, Serialize};

use super::{DenseNet, NetGrads};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one network. Weight decay is decoupled: it shrinks the
/// parameters directly instead of entering the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        let n = net.param_count();
        AdamState {
            config,
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts the step and leaves
    /// both the network and the moments untouched.
    pub fn step(&mut self, net: &mut DenseNet, grads: &NetGrads) -> Result<()> {
        if net.param_count() != self.first.len() {
            return Err(Error::dim("adam parameter count", self.first.len(), net.param_count()));
        }
        if let Some(pos) = grads.values().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {pos}; adam step skipped")));
        }
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((w, g), m), v) in net
            .params_mut()
            .zip(grads.values())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let w64 = f64::from(*w);
            *w = (w64 - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w64)) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Dense};

    fn scalar(w: f32) -> DenseNet {
        let mut l = Dense::zeros(1, 1, Activation::Identity);
        l.weight[[0, 0]] = w;
        DenseNet::new(vec![l]).unwrap()
    }

    fn grad(g: f64) -> NetGrads {
        let mut out = NetGrads::zeros_like(&scalar(0.0));
        out.layers[0].weight[[0, 0]] = g;
        out
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut net = scalar(0.75);
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(&net, cfg);
        adam.step(&mut net, &grad(0.0)).unwrap();
        assert_eq!(net, scalar(0.75));
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut net = scalar(1.0);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam.step(&mut net, &grad(2.0)).unwrap();
        assert!(net.layers()[0].weight[[0, 0]] < 1.0);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        let mut net = scalar(1.0);
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(&net, cfg);
        for _ in 0..500 {
            let w = f64::from(net.layers()[0].weight[[0, 0]]);
            adam.step(&mut net, &grad(2.0 * w)).unwrap();
        }
        let w = net.layers()[0].weight[[0, 0]];
        assert!(w.abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_effect() {
        let mut net = scalar(1.0);
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(adam.step(&mut net, &grad(f64::NAN)).is_err());
        assert_eq!(net, scalar(1.0));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks_with_zero_gradient() {
        let mut net = scalar(1.0);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
        let mut adam = AdamState::new(&net, cfg);
        adam.step(&mut net, &grad(0.0)).unwrap();
        assert!((net.layers()[0].weight[[0, 0]] - 0.95).abs() < 1e-6);
    }
}
