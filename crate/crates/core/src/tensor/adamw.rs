use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if config.lr.is_nan() || config.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                config.lr
            )));
        }
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(AdamW {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` using `grads` (store order).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if store.is_frozen() {
            let name = store
                .iter()
                .next()
                .map_or_else(String::new, |(_, p)| p.name.clone());
            return Err(Error::Frozen(name));
        }
        store.check_same_layout(grads)?;
        if let Some((id, _)) = store.ids().zip(grads).find(|(_, g)| !g.is_finite()) {
            return Err(Error::NanGradient(store.get(id).name.clone()));
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let w = store.value_mut(id).data_mut();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (j, &g) in grads[k].data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", "test", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut s = scalar_store(0.37);
        let mut opt = AdamW::new(AdamWConfig::default(), &s).unwrap();
        for _ in 0..5 {
            opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(s.value(s.find("w").unwrap()).item(), 0.37);
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s).unwrap();
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let w = s.value(s.find("w").unwrap()).item();
        assert!((w - (1.0 - 1e-4)).abs() < 1e-11, "w = {w}");
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // loss = (w-3)^2/2, grad = w-3
        let mut s = scalar_store(0.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        let id = s.find("w").unwrap();
        let loss = |w: f64| (w - 3.0).powi(2) / 2.0;
        let mut prev = loss(s.value(id).item());
        for _ in 0..10 {
            let g = s.value(id).item() - 3.0;
            opt.step(&mut s, &[Tensor::scalar(g)]).unwrap();
            let cur = loss(s.value(id).item());
            assert!(cur < prev, "{cur} !< {prev}");
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s).unwrap();
        let err = opt.step(&mut s, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NanGradient(ref n) if n == "w"));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn frozen_store_is_rejected() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s).unwrap();
        s.freeze();
        assert!(matches!(
            opt.step(&mut s, &[Tensor::scalar(1.0)]),
            Err(Error::Frozen(_))
        ));
    }

    #[test]
    fn non_positive_lr_is_config_error() {
        let s = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        assert!(matches!(AdamW::new(cfg, &s), Err(Error::Config(_))));
    }
}
