use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial learning rate is `max_lr / ONE_CYCLE_DIV`.
pub const ONE_CYCLE_DIV: f64 = 25.0;
/// Final learning rate is the initial one divided by this.
pub const ONE_CYCLE_FINAL_DIV: f64 = 100.0;
/// Fraction of steps spent ramping up.
pub const ONE_CYCLE_WARMUP: f64 = 0.3;

/// Linear ramp from `max_lr / 25` to `max_lr` over the first 30% of the
/// steps, then cosine annealing to `max_lr / 2500`. Steps past the end
/// return the final value.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let initial = max_lr / ONE_CYCLE_DIV;
    let last = initial / ONE_CYCLE_FINAL_DIV;
    if total_steps == 0 || step >= total_steps {
        return last;
    }
    // `total * 3 / 10` is exact in floating point for integral totals.
    let warmup = total_steps as f64 * (ONE_CYCLE_WARMUP * 10.0) / 10.0;
    let s = step as f64;
    if s == warmup {
        return max_lr;
    }
    if s < warmup {
        return initial + (max_lr - initial) * s / warmup;
    }
    let progress = (s - warmup) / (total_steps as f64 - warmup);
    last + (max_lr - last) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    OneCycle { max_lr: f64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn lr(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::OneCycle { max_lr } => one_cycle_lr(step, total_steps, max_lr),
            LrSchedule::Constant { lr } => lr,
        }
    }
}

/// Something that can take one optimization step at a given learning rate
/// and report the loss measured before the update.
pub trait RangeTestSubject {
    fn step(&mut self, lr: f64) -> Result<f64>;
}

pub const RANGE_TEST_SMOOTHING: f64 = 0.98;
pub const RANGE_TEST_DIVERGENCE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RangeTestResult {
    pub suggested_lr: f64,
    /// Learning rate at which the smoothed loss first exceeded four times its
    /// minimum, if it did.
    pub divergence_lr: Option<f64>,
    pub lrs: Vec<f64>,
    pub smoothed_losses: Vec<f64>,
}

/// Sweep the learning rate exponentially from `lr_min` to `lr_max` over
/// `steps` steps, smoothing the loss with an exponential moving average
/// (bias corrected). Suggests one tenth of the rate at which the smoothed
/// loss exceeds four times its running minimum; `lr_max` if that never
/// happens.
pub fn lr_range_test(
    subject: &mut impl RangeTestSubject,
    lr_min: f64,
    lr_max: f64,
    steps: usize,
) -> Result<RangeTestResult> {
    if !(lr_min > 0.0 && lr_min < lr_max && lr_max.is_finite()) {
        return Err(Error::contract(format!("invalid learning-rate range [{lr_min}, {lr_max}]")));
    }
    if steps < 2 {
        return Err(Error::contract("range test needs at least two steps"));
    }
    let ratio = (lr_max / lr_min).powf(1.0 / (steps - 1) as f64);
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut result = RangeTestResult {
        suggested_lr: lr_max,
        divergence_lr: None,
        lrs: Vec::with_capacity(steps),
        smoothed_losses: Vec::with_capacity(steps),
    };
    for i in 0..steps {
        let lr = lr_min * ratio.powi(i as i32);
        let loss = subject.step(lr)?;
        if !loss.is_finite() {
            if i == 0 {
                return Err(Error::NonFinite {
                    location: "loss at the first range-test step".into(),
                });
            }
            result.divergence_lr = Some(lr);
            break;
        }
        avg = RANGE_TEST_SMOOTHING * avg + (1.0 - RANGE_TEST_SMOOTHING) * loss;
        let smoothed = avg / (1.0 - RANGE_TEST_SMOOTHING.powi(i as i32 + 1));
        result.lrs.push(lr);
        result.smoothed_losses.push(smoothed);
        if smoothed > RANGE_TEST_DIVERGENCE * best {
            result.divergence_lr = Some(lr);
            break;
        }
        best = best.min(smoothed);
    }
    match result.divergence_lr {
        Some(lr) => result.suggested_lr = lr / 10.0,
        None => log::warn!("loss did not diverge up to lr {lr_max}; suggesting the range maximum"),
    }
    Ok(result)
}
