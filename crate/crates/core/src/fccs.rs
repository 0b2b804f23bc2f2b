//! Fast continuous convergence: learning-rate warm-up, continuous cosine
//! batch-size growth in place of learning-rate decay, LARS local rates and
//! gradient accumulation.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};

/// Unit in which schedule time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleUnit {
    Iteration,
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FccsSchedule {
    pub eta0: f64,
    pub t_warm: f64,
    pub b0: usize,
    pub t_ini: f64,
    pub t_final: f64,
    pub b_min1: usize,
    pub b_max1: usize,
    /// Grow from `b_min1` to `b_max1`. When unset the cosine term is used
    /// with a plus sign, which shrinks from `b_max1` to `b_min1`.
    pub increasing_variant: bool,
    pub unit: ScheduleUnit,
}

impl FccsSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0) {
            return Err(Error::InvalidConfig("eta0 must be positive".into()));
        }
        if self.t_ini > self.t_final {
            return Err(Error::InvalidConfig("t_ini must not exceed t_final".into()));
        }
        if self.b_min1 > self.b_max1 {
            return Err(Error::InvalidConfig("b_min1 must not exceed b_max1".into()));
        }
        if self.b0 == 0 || self.b_min1 == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.t_warm < 0.0 || self.t_ini < 0.0 {
            return Err(Error::InvalidConfig("schedule times must be nonnegative".into()));
        }
        Ok(())
    }

    /// Warm-up rate: `t / t_warm * eta0` before `t_warm`, `eta0` after.
    pub fn learning_rate(&self, t: f64) -> f64 {
        if t < self.t_warm {
            t / self.t_warm * self.eta0
        } else {
            self.eta0
        }
    }

    /// Continuous cosine batch-size target before flooring.
    pub fn batch_target(&self, t: f64) -> f64 {
        let span = self.t_final - self.t_ini;
        let frac = if span > 0.0 {
            ((t.min(self.t_final) - self.t_ini) / span).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let cos = (PI * frac).cos();
        let shape = if self.increasing_variant { 1.0 - cos } else { 1.0 + cos };
        let (lo, hi) = (self.b_min1 as f64, self.b_max1 as f64);
        lo + 0.5 * (hi - lo) * shape
    }

    /// `b0` during initialization, then the floored cosine target.
    pub fn batch_size(&self, t: f64) -> usize {
        if t < self.t_ini {
            self.b0
        } else {
            // cos(pi/2) is not exactly zero in floating point; the nudge keeps
            // analytically integral targets from flooring one below
            (self.batch_target(t) + 1e-9).floor() as usize
        }
    }
}

/// Schedule value at one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub step: usize,
    pub epoch: usize,
    /// Schedule time in the schedule's unit.
    pub t: f64,
    pub lr: f64,
    pub batch_size: usize,
}

/// Steps taken in an epoch of `train_size` samples at batch size `batch`.
/// Incomplete trailing batches are dropped.
pub fn steps_per_epoch(train_size: usize, batch: usize) -> usize {
    (train_size / batch.max(1)).max(1)
}

/// Every optimizer step of a run of `epochs` epochs over `train_size`
/// samples.
///
/// With epoch units the batch size is fixed for a whole epoch and the
/// learning rate sees fractional epoch time; with iteration units both are
/// evaluated at the step index.
pub fn schedule_table(s: &FccsSchedule, train_size: usize, epochs: usize) -> Vec<ScheduleRow> {
    let mut rows = Vec::new();
    let mut step = 0;
    match s.unit {
        ScheduleUnit::Epoch => {
            for epoch in 0..epochs {
                let b = s.batch_size(epoch as f64);
                let n = steps_per_epoch(train_size, b);
                for j in 0..n {
                    let t = epoch as f64 + j as f64 / n as f64;
                    rows.push(ScheduleRow {
                        step,
                        epoch,
                        t,
                        lr: s.learning_rate(t),
                        batch_size: b,
                    });
                    step += 1;
                }
            }
        }
        ScheduleUnit::Iteration => {
            let total = train_size * epochs;
            let mut consumed = 0;
            while consumed < total {
                let t = step as f64;
                let b = s.batch_size(t).max(1);
                rows.push(ScheduleRow {
                    step,
                    epoch: consumed / train_size.max(1),
                    t,
                    lr: s.learning_rate(t),
                    batch_size: b,
                });
                consumed += b;
                step += 1;
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LarsConfig {
    pub trust_coefficient: f32,
    pub weight_decay: f32,
    pub epsilon: f32,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            trust_coefficient: 0.001,
            weight_decay: 0.0,
            epsilon: 1e-9,
        }
    }
}

/// Layer-wise rate multiplier `trust * |w| / (|g| + wd * |w| + eps)`.
pub fn lars_local_lr(cfg: &LarsConfig, w_norm: f32, g_norm: f32) -> f32 {
    if w_norm == 0.0 {
        return 0.0;
    }
    cfg.trust_coefficient * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.epsilon)
}

/// Mean of `n` equally sized micro-batch gradients.
pub fn accumulate_gradients(n: usize, micro_grads: &[&[f32]]) -> Result<Vec<f32>> {
    if n == 0 || n != micro_grads.len() {
        return Err(shape_err(format!(
            "expected {n} micro-batch gradients, got {}",
            micro_grads.len()
        )));
    }
    let len = micro_grads[0].len();
    let mut out = vec![0.0f32; len];
    for g in micro_grads {
        if g.len() != len {
            return Err(shape_err("micro-batch gradients differ in length"));
        }
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f32;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// `v <- momentum * v + grad + weight_decay * params; params <- params - lr * v`
pub fn sgd_momentum_step(
    params: &mut [f32],
    velocity: &mut [f32],
    grad: &[f32],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != velocity.len() {
        return Err(shape_err(format!(
            "params {}, velocity {}, grad {}",
            params.len(),
            velocity.len(),
            grad.len()
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}
