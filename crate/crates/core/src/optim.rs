//! Adam over a subset of named parameters.

use crate::params::{Param, ParamStore};

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
            eps: 1e-7,
        }
    }
}

/// Moment estimates exist only for tensors that have received an update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.m.contains(name)
    }

    /// One update of every tensor in `grads` whose name passes `trainable`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        trainable: impl Fn(&str) -> bool,
        cfg: &AdamConfig,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let step_size = (cfg.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
        let eps_hat = eps * bc2.sqrt() as f32;

        let names: Vec<String> = grads.names().filter(|n| trainable(n)).cloned().collect();
        for name in names {
            let g = &grads.get(&name).expect("listed").data;
            if !self.m.contains(&name) {
                let shape = grads.get(&name).unwrap().shape.clone();
                self.m.insert(name.clone(), Param::zeros(shape.clone()));
                self.v.insert(name.clone(), Param::zeros(shape));
            }
            let m = &mut self.m.get_mut(&name).unwrap().data;
            let v = &mut self.v.get_mut(&name).unwrap().data;
            let p = &mut params
                .get_mut(&name)
                .unwrap_or_else(|| panic!("no parameter `{name}`"))
                .data;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
    }

    /// Per-tensor state flattened as `m.<name>` / `v.<name>` for serialization.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, p) in self.m.iter() {
            s.insert(format!("m.{n}"), p.clone());
        }
        for (n, p) in self.v.iter() {
            s.insert(format!("v.{n}"), p.clone());
        }
        s
    }

    pub fn from_store(step: u64, store: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (n, p) in store.iter() {
            if let Some(rest) = n.strip_prefix("m.") {
                m.insert(rest, p.clone());
            } else if let Some(rest) = n.strip_prefix("v.") {
                v.insert(rest, p.clone());
            }
        }
        Adam { step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = ParamStore::new();
        params.insert(
            "w",
            Param {
                shape: vec![2],
                data: vec![1.0, -1.0],
            },
        );
        params.insert(
            "frozen",
            Param {
                shape: vec![1],
                data: vec![3.0],
            },
        );
        let mut grads = params.zeros_like();
        grads.get_mut("w").unwrap().data = vec![0.5, -2.0];
        grads.get_mut("frozen").unwrap().data = vec![1.0];
        let mut adam = Adam::new();
        let cfg = AdamConfig {
            lr: 0.01,
            eps: 1e-12,
            ..Default::default()
        };
        adam.step(&mut params, &grads, |n| n != "frozen", &cfg);
        let w = &params.get("w").unwrap().data;
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
        assert_eq!(params.get("frozen").unwrap().data[0], 3.0);
        assert!(!adam.has_state("frozen"));
        assert!(adam.has_state("w"));
    }

    #[test]
    fn state_store_round_trip() {
        let mut params = ParamStore::new();
        params.insert(
            "a.weight",
            Param {
                shape: vec![3],
                data: vec![0.1, 0.2, 0.3],
            },
        );
        let mut grads = params.zeros_like();
        grads.get_mut("a.weight").unwrap().data = vec![1.0, 2.0, 3.0];
        let mut adam = Adam::new();
        adam.step(&mut params, &grads, |_| true, &AdamConfig::default());
        let back = Adam::from_store(adam.step, &adam.to_store());
        assert_eq!(back, adam);
    }
}
