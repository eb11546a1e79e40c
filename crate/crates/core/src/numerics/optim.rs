use super::Tensor;
use crate::error::{Error, Result};

/// SGD with classical momentum.
///
/// Per parameter: `v ← momentum·v + g`, then `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f32,
    pub current_lr: f32,
    pub velocity: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(momentum: f32, lr: f32) -> Self {
        Self {
            momentum,
            current_lr: lr,
            velocity: Vec::new(),
        }
    }

    /// Applies one step. `names` is used only to label errors.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[&Tensor<f32>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if !(self.current_lr > 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                self.current_lr
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.same_shape(g, "sgd_step")?;
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            p.same_shape(v, "sgd_step")?;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.current_lr * *vv;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_start` to `lr_end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Contract("cosine schedule needs at least one step".into()));
        }
        if !(lr_start >= lr_end && lr_end > 0.0) {
            return Err(Error::Contract(format!(
                "cosine schedule needs lr_start >= lr_end > 0, got {lr_start} -> {lr_end}"
            )));
        }
        Ok(Self {
            lr_start,
            lr_end,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
