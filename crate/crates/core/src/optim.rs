//! Optimizers, the multi-step learning-rate schedule, and deterministic
//! batch-gradient accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate multiplied by `factor` at every milestone epoch reached.
/// Epochs are zero-based: `lr_at(e)` applies while running epoch `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStepLr {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|m| **m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
        weight_decay: f64,
    },
    /// Adaptive moments with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self { kind, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    /// One update of `params` given the mean-loss gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    let g = g + weight_decay * *p;
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *p -= lr * weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Samples handled per work unit. Per-sample gradients are summed inside a
/// chunk and chunk sums are added in order, so the result does not depend on
/// the thread count.
const CHUNK: usize = 4;

/// Sums `(loss, gradient)` over `items` in parallel with a fixed reduction order.
pub fn accumulate<T, F>(items: &[T], n_params: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<f64> + Sync,
{
    let partials: Vec<Result<(f64, Vec<f64>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n_params];
            let mut loss = 0.0;
            for item in chunk {
                loss += f(item, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    for p in partials {
        let (l, g) = p?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {total}")));
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multistep_schedule() {
        let s = MultiStepLr { base: 0.1, milestones: vec![60, 120, 160], factor: 0.1 };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(59), 0.1);
        assert!((s.lr_at(60) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(61) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(130) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(199) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::adamw_default(), 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn sgd_momentum_first_step_is_plain_gradient() {
        let mut p = vec![1.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9, weight_decay: 0.0 }, 1);
        opt.step(&mut p, &[0.5], 0.1);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn accumulate_is_order_stable() {
        let items: Vec<f64> = (0..37).map(|i| i as f64 * 0.1).collect();
        let f = |x: &f64, g: &mut [f64]| {
            g[0] += x;
            g[1] += x * x;
            Ok(x.sin())
        };
        let a = accumulate(&items, 2, f).unwrap();
        let b = accumulate(&items, 2, f).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        let nan = accumulate(&[f64::NAN], 1, |x: &f64, _| Ok(*x));
        assert!(nan.is_err());
    }
}
