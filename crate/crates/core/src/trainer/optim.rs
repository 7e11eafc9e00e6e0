//! Learning-rate schedule and SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::TrainConfig;

/// Per-epoch cosine annealing from `lr0` at epoch 0 to `lr_min` at the last
/// epoch. A single-epoch run stays at `lr0`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr0);
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One in-place update of a flat parameter:
/// `buf ← m·buf + g + wd·p`, then `p ← p − lr·buf`.
pub fn sgd_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    buf: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::Shape(format!(
            "sgd: param {} grad {} buffer {}",
            param.len(),
            grad.len(),
            buf.len()
        )));
    }
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = m * *b + g + wd * *p;
        *p = *p - lr * *b;
    }
    Ok(())
}

/// Momentum state for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, buffers: Vec::new() }
    }

    /// Updates every parameter that requires a gradient, treating a missing
    /// gradient as zero, then zeroes the gradient buffers. Frozen
    /// parameters are left untouched and keep no momentum.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        for (p, slot) in params.iter_mut().zip(self.buffers.iter_mut()) {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let buf = slot.get_or_insert_with(|| vec![T::zero(); n]);
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); n],
            };
            sgd_update(p.data_mut(), &grad, buf, lr, self.momentum, self.weight_decay)?;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn buffer(&self, index: usize) -> Option<&[T]> {
        self.buffers.get(index).and_then(|b| b.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let c = cfg(51);
        assert_eq!(cosine_lr(0, &c).unwrap(), 0.01);
        assert_eq!(cosine_lr(50, &c).unwrap(), 1e-5);
        assert!((cosine_lr(25, &c).unwrap() - (0.01 + 1e-5) / 2.0).abs() < 1e-9);
        assert!(matches!(cosine_lr(51, &c), Err(Error::Argument(_))));
        assert_eq!(cosine_lr(0, &cfg(1)).unwrap(), 0.01);
    }

    #[test]
    fn schedule_is_monotone() {
        let c = cfg(200);
        let lrs: Vec<f64> = (0..200).map(|e| cosine_lr(e, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![0.3f64, -1.2, 4.0];
        let before = p.clone();
        let mut buf = vec![0.0; 3];
        sgd_update(&mut p, &[0.0; 3], &mut buf, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn vanilla_step() {
        let mut p = vec![1.0f64, 2.0];
        let mut buf = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, -2.0], &mut buf, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15 && (p[1] - 2.2).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let (lr, g) = (0.01, 0.7);
        let mut p = vec![0.0f64];
        let mut buf = vec![0.0];
        for _ in 0..2 {
            sgd_update(&mut p, &[g], &mut buf, lr, 0.9, 0.0).unwrap();
        }
        assert!((p[0] + lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f32; 3];
        let mut buf = vec![0.0; 3];
        assert!(matches!(sgd_update(&mut p, &[0.0; 2], &mut buf, 0.1, 0.9, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn optimizer_skips_frozen_and_zeroes_grads() {
        let mut a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap().with_requires_grad(true);
        let mut b = Tensor::new(vec![1], vec![5.0f64]).unwrap();
        a.accumulate_grad(&[1.0, 1.0]).unwrap();
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(&mut [&mut a, &mut b], 0.5).unwrap();
        assert_eq!(a.data(), &[0.5, 1.5]);
        assert_eq!(a.grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(b.data(), &[5.0]);
        assert!(sgd.buffer(1).is_none());
        assert_eq!(sgd.buffer(0).unwrap(), &[1.0, 1.0]);
    }
}
