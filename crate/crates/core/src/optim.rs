//! Gradient descent with heavy-ball momentum.

use std::collections::HashMap;

use crate::nn::{ParamKind, ParamMut};

/// `v ← μ·v + g`, `θ ← θ − lr·v`, with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            max_grad_norm: None,
            velocity: HashMap::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    /// Updates the parameters accepted by `filter`; the rest are untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = ParamMut<'a>>,
        filter: impl Fn(ParamKind) -> bool,
    ) {
        let selected: Vec<ParamMut<'a>> = params.into_iter().filter(|p| filter(p.kind)).collect();
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = selected
                    .iter()
                    .flat_map(|p| p.grad.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for p in selected {
            let v = self
                .velocity
                .entry(p.name)
                .or_insert_with(|| vec![0.0; p.value.len()]);
            for ((w, g), vel) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + g * scale;
                *w -= self.lr * *vel;
            }
        }
    }
}

/// Polynomial learning-rate decay `lr0·(1 − e/E)^power`.
pub fn poly_lr(lr0: f64, epoch: usize, max_epochs: usize, power: f64) -> f64 {
    if max_epochs == 0 {
        return lr0;
    }
    lr0 * (1.0 - epoch as f64 / max_epochs as f64).max(0.0).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut value = vec![1.0];
        let mut grad = vec![0.5];
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..2 {
            let p = ParamMut {
                name: "w".into(),
                kind: ParamKind::ConvWeight,
                value: &mut value,
                grad: &mut grad,
            };
            opt.step([p], |_| true);
        }
        // v1 = 0.5, v2 = 0.95
        assert!((value[0] - (1.0 - 0.05 - 0.095)).abs() < 1e-12);
    }

    #[test]
    fn filter_skips_parameters() {
        let mut value = vec![1.0];
        let mut grad = vec![0.5];
        let mut opt = Sgd::new(0.1, 0.0);
        let p = ParamMut {
            name: "w".into(),
            kind: ParamKind::ConvWeight,
            value: &mut value,
            grad: &mut grad,
        };
        opt.step([p], ParamKind::is_bn_affine);
        assert_eq!(value[0], 1.0);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.01, 0, 40, 0.9), 0.01);
        assert!((poly_lr(0.01, 20, 40, 0.9) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(0.01, 20, 40, 0.9) - 0.00536).abs() < 1e-5);
    }
}
