use serde::{Deserialize, Serialize};

use crate::data::AugmentFlags;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augmentation: AugmentFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 30,
            epochs: 50,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
            augmentation: AugmentFlags {
                hflip: true,
                shift_frac: 0.1,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.augmentation.shift_frac) {
            return bad("augmentation.shift_frac must lie in [0, 1)");
        }
        Ok(())
    }

    /// Step-decay schedule for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Plain SGD, with optional heavy-ball momentum and L2 weight decay.
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![],
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    /// Apply `w <- w - lr * (g + wd * w)` (through the velocity buffer when
    /// momentum is on) using the gradients stored by the last backward.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64) {
        let lr = T::from_f64_lossy(lr);
        let wd = T::from_f64_lossy(self.weight_decay);
        let mu = T::from_f64_lossy(self.momentum);
        let plain = self.momentum == 0.0 && self.weight_decay == 0.0;
        let velocity = &mut self.velocity;
        let mut index = 0;
        model.visit_params(&mut |_, w, g| {
            if plain {
                for (p, &d) in w.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
                return;
            }
            if velocity.len() <= index {
                velocity.push(Tensor::zeros(w.shape()));
            }
            let v = &mut velocity[index];
            for ((p, &d), vel) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = d + wd * *p;
                *vel = mu * *vel + d;
                *p -= lr * *vel;
            }
            index += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps_every_thirty_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(29), 0.01);
        assert_eq!(cfg.lr_at(30), 0.01 * 0.1);
        assert_eq!(cfg.lr_at(59), 0.01 * 0.1);
        assert_eq!(cfg.lr_at(60), 0.01 * 0.1f64.powi(2));
        for e in 0..200 {
            assert_eq!(cfg.lr_at(e), 0.01 * 0.1f64.powi((e / 30) as i32));
        }
    }

    #[test]
    fn defaults_follow_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.batch_size, cfg.epochs, cfg.lr_decay_every), (2, 50, 30));
        assert_eq!((cfg.momentum, cfg.weight_decay), (0.0, 0.0));
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
            TrainConfig {
                lr_decay_every: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "lr_typo": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"lr": 0.1}"#).unwrap();
        assert_eq!(ok.batch_size, 2);
    }
}
