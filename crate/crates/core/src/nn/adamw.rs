use serde::{Deserialize, Serialize};

use super::mlp::{Grads, Mlp};
use crate::error::{LabError, Result};

/// Hyper-parameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    m: Grads,
    v: Grads,
}

impl AdamW {
    pub fn new(net: &Mlp, config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Grads {
        &self.m
    }

    pub fn second_moment(&self) -> &Grads {
        &self.v
    }

    /// One update. Decay `p -= lr * wd * p` is applied first, then the
    /// bias-corrected Adam step.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        if !grads.is_finite() {
            return Err(LabError::Divergence(format!(
                "non-finite gradient at optimizer step {}",
                self.step_count + 1
            )));
        }
        let shapes_ok = grads.weights.len() == net.num_layers()
            && grads
                .weights
                .iter()
                .zip(net.weights())
                .all(|(g, w)| g.len() == w.len())
            && grads
                .biases
                .iter()
                .zip(net.biases())
                .all(|(g, b)| g.len() == b.len());
        if !shapes_ok || self.m.weights.len() != net.num_layers() {
            return Err(LabError::config("gradient shape does not match network"));
        }
        self.step_count += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = lr * weight_decay;
        for (((p, g), m), v) in net
            .params_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *p -= decay * *p;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputSquash;

    fn scalar_net(p: f64) -> Mlp {
        Mlp::from_parts(vec![1, 1], vec![vec![p]], vec![vec![0.0]], OutputSquash::None).unwrap()
    }

    #[test]
    fn decay_only_first_step() {
        let mut net = scalar_net(1.0);
        let mut opt = AdamW::new(&net, AdamWConfig::default());
        let g = Grads::zeros_like(&net);
        opt.step(&mut net, &g).unwrap();
        assert!((net.weights()[0][0] - 0.99999).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
        assert!(opt.first_moment().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_adam_step_by_hand() {
        let mut net = scalar_net(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&net, cfg);
        let mut g = Grads::zeros_like(&net);
        g.weights[0][0] = 1.0;
        opt.step(&mut net, &g).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((net.weights()[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        let mut net = scalar_net(0.0);
        let mut opt = AdamW::new(&net, AdamWConfig::default());
        let mut g = Grads::zeros_like(&net);
        g.biases[0][0] = f64::NAN;
        assert!(matches!(opt.step(&mut net, &g), Err(LabError::Divergence(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn identical_streams_identical_trajectories() {
        let mut a = Mlp::init(&[3, 5, 2], OutputSquash::None, 4).unwrap();
        let mut b = a.clone();
        let mut oa = AdamW::new(&a, AdamWConfig::default());
        let mut ob = AdamW::new(&b, AdamWConfig::default());
        for k in 0..20 {
            let mut g = Grads::zeros_like(&a);
            for (i, v) in g.iter_mut().enumerate() {
                *v = ((i * 7 + k * 3) % 11) as f64 - 5.0;
            }
            oa.step(&mut a, &g).unwrap();
            ob.step(&mut b, &g).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }
}
