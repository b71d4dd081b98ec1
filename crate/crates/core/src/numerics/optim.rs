//! SGD with momentum and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Classic momentum SGD with L2 weight decay coupled into the gradient:
///
///   v <- momentum * v + (grad + weight_decay * param)
///   param <- param - lr * v
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            weight_decay,
            velocities: Vec::new(),
        }
    }

    /// One update over an ordered parameter list. The list must be the same
    /// (same order, same shapes) on every call; velocity buffers are keyed
    /// by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::invalid("sgd_momentum_step", "lr must be >= 0"));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::invalid(
                "sgd_momentum_step",
                "parameter list changed length between steps",
            ));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            if v.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_momentum_step",
                    lhs: vec![v.len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let grad: Vec<f64> = match p.grad.take() {
                Some(g) => g,
                None => vec![0.0; p.len()],
            };
            let (mom, wd) = (self.momentum, self.weight_decay);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vv = mom * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
            p.check_finite("sgd_momentum_step")?;
        }
        for p in params.iter_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}

/// Optimizer settings shared by every training routine.
#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
}

impl TrainOpts {
    pub fn optimizer(&self) -> SgdMomentum {
        SgdMomentum::new(self.momentum, self.weight_decay)
    }
}

/// Poly learning-rate policy: `base_lr * (1 - iter/total)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::invalid("poly_lr", "total_iters must be > 0"));
    }
    if iter > total_iters {
        return Err(Error::invalid(
            "poly_lr",
            format!("iter {} exceeds total_iters {}", iter, total_iters),
        ));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}
