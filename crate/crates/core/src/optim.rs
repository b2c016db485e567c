//! Momentum SGD with decoupled weight decay and polynomial learning-rate
//! decay.

use unetrpp_tensor::Element;

use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stop once the epoch's mean foreground DSC reaches this value.
    pub target_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            learning_rate: 0.01,
            weight_decay: 3e-5,
            momentum: 0.9,
            seed: 0,
            target_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and ≥ 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be finite and ≥ 0".into()));
        }
        if let Some(t) = self.target_dsc {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("target_dsc {t} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `lr₀ · (1 − t/T)^0.9`.
pub fn poly_lr(lr0: f64, step: usize, total: usize) -> f64 {
    let frac = (step as f64 / total.max(1) as f64).min(1.0);
    lr0 * (1.0 - frac).powf(0.9)
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Schedule length `T` (epochs).
    pub total: usize,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr0: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            total: cfg.epochs,
            velocity: Vec::new(),
        }
    }

    /// Applies one update at schedule position `epoch` (0-based) using the
    /// gradients accumulated on every trainable parameter, then clears them.
    ///
    /// `v ← μ·v + g`, `w ← w − lr·v − lr·λ·w`.
    pub fn step<T: Element, M: Module<T>>(&mut self, model: &mut M, epoch: usize) -> Result<()> {
        let lr = poly_lr(self.lr0, epoch, self.total);
        let mut grads = Vec::new();
        let mut missing = None;
        model.visit_params(&mut |p| {
            if !p.trainable {
                return;
            }
            match p.tensor.grad() {
                Some(g) => grads.push(g),
                None => {
                    missing.get_or_insert_with(|| p.name.clone());
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGrad(name));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let mut slot = 0;
        let mut result = Ok(());
        model.visit_params_mut(&mut |p| {
            if !p.trainable || result.is_err() {
                return;
            }
            let g = &grads[slot];
            let v = &mut self.velocity[slot];
            slot += 1;
            let w: Vec<T> = p
                .tensor
                .data()
                .iter()
                .zip(g)
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    let w = w.as_f64();
                    *v = mu * *v + g.as_f64();
                    T::of(w - lr * *v - lr * wd * w)
                })
                .collect();
            result = p.set_data(w);
        });
        result
    }
}
