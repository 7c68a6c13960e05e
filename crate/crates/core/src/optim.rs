//! Composite loss and the training recipe: sign-momentum (Lion) updates,
//! cosine-annealed learning rate, early stopping on validation accuracy.

use crate::error::{CoreError, Result};
use crate::graph::{real, Graph, L1Mode, Real, Var};
use crate::params::ParamSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Sparsity weighting of the composite loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub l1_mode: L1Mode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.05,
            l1_mode: L1Mode::SumPerSample,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CoreError::Config(format!(
                "loss lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Scalar loss node plus its two components as plain numbers for metrics.
pub struct CompositeLoss {
    pub total: Var,
    pub ce: f64,
    pub sparsity: f64,
}

/// total = CE(logits, labels) + lambda * L1(map). With no map or lambda = 0
/// the total is exactly the cross-entropy node.
pub fn composite_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    map: Option<Var>,
    cfg: &LossConfig,
) -> Result<CompositeLoss> {
    cfg.validate()?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let ce_value = g.scalar(ce).to_f64().unwrap_or(f64::NAN);
    match map {
        Some(m) if cfg.lambda > 0.0 => {
            let l1 = g.l1_reduce(m, cfg.l1_mode)?;
            let sparsity = g.scalar(l1).to_f64().unwrap_or(f64::NAN);
            let weighted = g.scale(l1, real::<T>(cfg.lambda))?;
            let total = g.add(ce, weighted)?;
            Ok(CompositeLoss {
                total,
                ce: ce_value,
                sparsity,
            })
        }
        Some(m) => {
            // lambda = 0: still report the L1 value, but keep total == CE.
            let l1 = g.l1_reduce(m, cfg.l1_mode)?;
            let sparsity = g.scalar(l1).to_f64().unwrap_or(f64::NAN);
            Ok(CompositeLoss {
                total: ce,
                ce: ce_value,
                sparsity,
            })
        }
        None => Ok(CompositeLoss {
            total: ce,
            ce: ce_value,
            sparsity: 0.0,
        }),
    }
}

/// Lion optimizer state: one momentum array per parameter plus
/// hyperparameters. `lr` is owned here and rewritten by the schedule each
/// epoch.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    momentum: Vec<Vec<T>>,
    pub t: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, weight_decay: f64, beta1: f64, beta2: f64) -> Self {
        OptimState {
            momentum: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            t: 0,
            lr,
            weight_decay,
            beta1,
            beta2,
        }
    }
}

/// One Lion step:
///   c = beta1*m + (1-beta1)*g
///   theta -= lr * (sign(c) + wd*theta)        (sign(0) = 0)
///   m = beta2*m + (1-beta2)*g
pub fn lion_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.momentum.len() != params.len() {
        return Err(CoreError::State(format!(
            "optimizer state mismatch: {} params, {} grads, {} momentum arrays",
            params.len(),
            grads.len(),
            state.momentum.len()
        )));
    }
    let lr = real::<T>(state.lr);
    let wd = real::<T>(state.weight_decay);
    let b1 = real::<T>(state.beta1);
    let b2 = real::<T>(state.beta2);
    let one = T::one();
    for ((param, grad), m) in params
        .iter_mut()
        .zip(grads)
        .zip(state.momentum.iter_mut())
    {
        if grad.len() != param.data.len() {
            return Err(CoreError::State(format!(
                "gradient shape mismatch for {}: expected {}, got {}",
                param.name,
                param.data.len(),
                grad.len()
            )));
        }
        for ((theta, &g), mi) in param.data.iter_mut().zip(grad).zip(m.iter_mut()) {
            let c = b1 * *mi + (one - b1) * g;
            let sign = if c > T::zero() {
                one
            } else if c < T::zero() {
                -one
            } else {
                T::zero()
            };
            *theta = *theta - lr * (sign + wd * *theta);
            *mi = b2 * *mi + (one - b2) * g;
        }
    }
    state.t += 1;
    Ok(())
}

/// Epoch schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub min_lr: f64,
    pub patience: usize,
    pub batch_size: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 1 {
            return Err(CoreError::Config("total_epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(CoreError::Config("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Half-cosine decay from base_lr at epoch 0 to min_lr at total_epochs.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(CoreError::Argument(format!(
            "epoch {} outside schedule of {} epochs",
            epoch, cfg.total_epochs
        )));
    }
    let t = epoch as f64 / cfg.total_epochs as f64;
    let cos = num_traits::Float::cos(core::f64::consts::PI * t);
    Ok(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + cos))
}

/// True when none of the last `patience` entries strictly improved on the
/// best value seen before them. Ties count as non-improvement.
pub fn early_stop(val_acc_history: &[f64], patience: usize) -> bool {
    if val_acc_history.len() < patience || patience == 0 {
        return false;
    }
    let start = val_acc_history.len() - patience;
    let mut best = f64::NEG_INFINITY;
    for &v in &val_acc_history[..start] {
        if v > best {
            best = v;
        }
    }
    for &v in &val_acc_history[start..] {
        if v > best {
            return false;
        }
        // a tying or worse entry never raises the bar
    }
    true
}
