use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Row-sparse parameters are updated lazily: only
/// rows that received gradient this step have their moments advanced.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |_| Vec::new();
        Adam {
            config,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let meta = store.meta(id);
            if meta.frozen {
                continue;
            }
            if let Some(pos) = store.grads().get(id).iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter `{}` at index {pos}",
                    meta.name
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in ids {
            let meta = store.meta(id).clone();
            if meta.frozen {
                continue;
            }
            let k = id.index();
            if self.m[k].is_empty() {
                self.m[k] = vec![0.0; meta.len()];
                self.v[k] = vec![0.0; meta.len()];
            }
            let rows: Vec<(usize, usize)> = if meta.row_sparse {
                let w = meta.row_width();
                store
                    .grads()
                    .touched_rows(id)
                    .into_iter()
                    .map(|r| (r * w, (r + 1) * w))
                    .collect()
            } else {
                vec![(0, meta.len())]
            };
            let grad = store.grads().get(id).to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(id);
            for (lo, hi) in rows {
                for i in lo..hi {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    value[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        let p = s.add("p", &[3], vec![1.0, -2.0, 0.5]);
        let mut opt = Adam::new(&s, AdamConfig::with_lr(0.1));
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(p), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 ⇒ Δ = 0.1 / (1 + 1e-8)
        let mut s = ParamStore::new();
        let p = s.add("p", &[1], vec![0.0]);
        let mut opt = Adam::new(&s, AdamConfig::with_lr(0.1));
        s.grads_mut().get_mut(p)[0] = 1.0;
        opt.step(&mut s).unwrap();
        assert!((s.value(p)[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.grads().get(p)[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut s = ParamStore::new();
        let p = s.add("weights", &[2], vec![0.0; 2]);
        let mut opt = Adam::new(&s, AdamConfig::default());
        s.grads_mut().get_mut(p)[1] = f64::NAN;
        let err = opt.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("weights"), "{err}");
        assert_eq!(s.value(p), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_and_sparse_rows() {
        let mut s = ParamStore::new();
        let t = s.add_row_sparse("t", &[3, 2], vec![0.0; 6]);
        let f = s.add("f", &[1], vec![1.0]);
        s.set_frozen(f, true);
        let mut opt = Adam::new(&s, AdamConfig::with_lr(0.5));
        s.grads_mut().row_mut(t, 1).copy_from_slice(&[1.0, -1.0]);
        s.grads_mut().get_mut(f)[0] = 3.0;
        opt.step(&mut s).unwrap();
        let v = s.value(t);
        assert_eq!((v[0], v[1], v[4], v[5]), (0.0, 0.0, 0.0, 0.0));
        assert!(v[2] < 0.0 && v[3] > 0.0);
        assert_eq!(s.value(f), &[1.0]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = ParamStore::new();
            let p = s.add("p", &[4], vec![0.3, -0.1, 0.7, 0.0]);
            let mut opt = Adam::new(&s, AdamConfig::with_lr(0.01));
            for t in 0..50 {
                let g: Vec<f64> = s.value(p).iter().map(|x| 2.0 * x + (t as f64).sin()).collect();
                s.grads_mut().get_mut(p).copy_from_slice(&g);
                opt.step(&mut s).unwrap();
            }
            s.value(p).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
