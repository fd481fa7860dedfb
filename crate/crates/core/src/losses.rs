//! Single-neuron spike-train losses and the classification loss on summed
//! output currents.
//!
//! Spike trains and potential traces are `[T, ...]` with time leading. Time
//! integrals become unit-step sums. In the spike-train losses the spikes are
//! treated as constants, so gradients reach the network only through the
//! potentials.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// `sum_t (S_t - S_gt_t) * U_t`.
pub fn energy_loss<T: Real>(g: &mut Graph<T>, spikes: Var, target: &Tensor<T>, potentials: Var) -> Result<Var> {
    let error = error_current(g, spikes, target, potentials)?;
    let error = g.constant(error);
    let weighted = g.mul(error, potentials)?;
    Ok(g.sum(weighted))
}

/// `sum_t [(a*S)_t - (a*S_gt)_t] * (a*U)_t` with the causal convolution
/// `(a*X)_t = sum_{k=0..=t} a_k X_{t-k}`.
pub fn convolved_energy_loss<T: Real>(
    g: &mut Graph<T>,
    spikes: Var,
    target: &Tensor<T>,
    potentials: Var,
    kernel: &[f64],
) -> Result<Var> {
    let error = error_current(g, spikes, target, potentials)?;
    let shape = g.shape(potentials).to_vec();
    let steps = shape[0];
    if kernel.is_empty() || kernel.len() > steps {
        return Err(Error::contract(format!(
            "kernel length {} must lie in 1..={steps}",
            kernel.len()
        )));
    }
    if kernel.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::contract("kernel weights must be finite and non-negative"));
    }
    let width = shape[1..].iter().product();
    // Lower-triangular Toeplitz matrix applying the kernel along time.
    let mut toeplitz = vec![T::zero(); steps * steps];
    for t in 0..steps {
        for (k, &a) in kernel.iter().enumerate().take(t + 1) {
            toeplitz[t * steps + t - k] = T::from_f64_lossy(a);
        }
    }
    let toeplitz = Tensor::new(&[steps, steps], toeplitz)?;
    let error = toeplitz.matmul(&error.reshape(&[steps, width])?)?;
    let a = g.constant(toeplitz);
    let u = g.reshape(potentials, &[steps, width])?;
    let filtered = g.matmul(a, u)?;
    let error = g.constant(error);
    let weighted = g.mul(error, filtered)?;
    Ok(g.sum(weighted))
}

/// `(H(Y - threshold) - Y_gt) * sum_t U_t` for one output neuron, with
/// `Y = sum_t S_t` and `H` the strict step function.
pub fn count_threshold_loss<T: Real>(
    g: &mut Graph<T>,
    spikes: Var,
    target: u8,
    potentials: Var,
    count_threshold: f64,
) -> Result<Var> {
    if target > 1 {
        return Err(Error::contract(format!("count target must be 0 or 1, got {target}")));
    }
    if g.shape(spikes) != g.shape(potentials) {
        return Err(Error::dim(format!(
            "spikes {:?} vs potentials {:?}",
            g.shape(spikes),
            g.shape(potentials)
        )));
    }
    if g.shape(spikes)[1..].iter().product::<usize>() != 1 {
        return Err(Error::contract("count loss is defined for a single output neuron"));
    }
    let count = g.sum(spikes);
    let shifted = g.add_scalar(count, T::from_f64_lossy(-count_threshold));
    let fired = g.heaviside_detached(shifted);
    let factor = g.add_scalar(fired, T::from_f64_lossy(-f64::from(target)));
    let total = g.sum(potentials);
    g.mul(factor, total)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy_on_summed_currents<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let &[batch, classes] = shape.as_slice() else {
        return Err(Error::dim(format!("logits must be [batch, classes], got {shape:?}")));
    };
    if batch != labels.len() || batch == 0 {
        return Err(Error::dim(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} outside {classes} classes")));
    }
    let probs = softmax_rows(g.value(logits).data(), classes);
    let mut total = T::zero();
    for (row, &label) in probs.chunks(classes).zip(labels) {
        total = total - row[label].ln();
    }
    let n = T::from_usize(batch).unwrap();
    let labels = labels.to_vec();
    let loss = Tensor::scalar(total / n);
    Ok(g.custom("cross_entropy", &[logits], loss, move |up, _, _| {
        let scale = up.item() / n;
        let mut grad = probs.clone();
        for (row, &label) in grad.chunks_mut(classes).zip(&labels) {
            row[label] = row[label] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }
        Ok(vec![Some(Tensor::new(&[batch, classes], grad)?)])
    }))
}

/// Row-wise softmax with the row maximum subtracted first. Log of a
/// probability that underflows to zero is guarded by the `ln` of the
/// smallest positive value.
fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().fold(T::zero(), |a, b| a + b);
        out.extend(exps.iter().map(|&e| (e / sum).max(T::min_positive_value())));
    }
    out
}

/// Argmax class per row of `[batch, classes]` logits (first maximum wins).
pub fn predictions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn error_current<T: Real>(g: &Graph<T>, spikes: Var, target: &Tensor<T>, potentials: Var) -> Result<Tensor<T>> {
    let s = g.value(spikes);
    if s.shape() != target.shape() || s.shape() != g.shape(potentials) {
        return Err(Error::dim(format!(
            "spikes {:?}, target {:?} and potentials {:?} must agree",
            s.shape(),
            target.shape(),
            g.shape(potentials)
        )));
    }
    if s.ndim() == 0 {
        return Err(Error::dim("spike trains need a leading time axis"));
    }
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::contract("target spike train must be binary"));
    }
    s.zip_map(target, |a, b| a - b)
}
