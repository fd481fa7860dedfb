//! Batch normalization of neuron input currents, and threshold normalization
//! for networks that run without it.
//!
//! Currents arrive as `[M, C, ...]` where `M` folds together batch and time.
//! Statistics are per channel, pooled over `M` and all trailing positions, so
//! one set of parameters serves every timestep.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::snn::{ForwardOptions, LayerSpec, Network};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Lower bound for calibrated thresholds of silent layers.
pub const THRESHOLD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Normalize `input` and record the op. In train mode the running
    /// statistics are updated from the batch.
    pub fn apply(&mut self, g: &mut Graph<T>, input: Var, scale: Var, shift: Var, mode: BnMode) -> Result<Var> {
        let layout = Layout::of(g.shape(input), self.channels())?;
        match mode {
            BnMode::Train => {
                let (mean, var) = layout.moments(g.value(input).data());
                let n = layout.count();
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let m = T::from_f64_lossy(self.momentum);
                for c in 0..self.channels() {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = (T::one() - m) * *rm + m * mean[c];
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = (T::one() - m) * *rv + m * var[c] * T::from_f64_lossy(unbias);
                }
                batch_norm(g, input, scale, shift, Stats::Batch, self.epsilon)
            }
            BnMode::Eval => {
                let stats = Stats::Fixed {
                    mean: self.running_mean.data().to_vec(),
                    var: self.running_var.data().to_vec(),
                };
                batch_norm(g, input, scale, shift, stats, self.epsilon)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn of(shape: &[usize], channels: usize) -> Result<Self> {
        if shape.len() < 2 || shape[1] != channels {
            return Err(Error::dim(format!(
                "batch norm over {channels} channels cannot take shape {shape:?}"
            )));
        }
        if shape[0] == 0 {
            return Err(Error::contract("batch norm on an empty batch"));
        }
        Ok(Self {
            outer: shape[0],
            channels,
            inner: shape[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_channel<T: Copy>(&self, data: &[T], c: usize, mut f: impl FnMut(usize, T)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for i in 0..self.inner {
                f(base + i, data[base + i]);
            }
        }
    }

    /// Per-channel mean and biased variance.
    fn moments<T: Real>(&self, data: &[T]) -> (Vec<T>, Vec<T>) {
        let n = T::from_usize(self.count()).unwrap();
        let mut means = Vec::with_capacity(self.channels);
        let mut vars = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut sum = T::zero();
            self.for_channel(data, c, |_, v| sum = sum + v);
            let mean = sum / n;
            let mut sq = T::zero();
            self.for_channel(data, c, |_, v| sq = sq + (v - mean) * (v - mean));
            means.push(mean);
            vars.push(sq / n);
        }
        (means, vars)
    }
}

#[derive(Clone, Debug)]
enum Stats<T> {
    Batch,
    Fixed { mean: Vec<T>, var: Vec<T> },
}

struct BatchNormBackward<T> {
    layout: Layout,
    stats: Stats<T>,
    epsilon: T,
}

fn batch_norm<T: Real>(g: &mut Graph<T>, input: Var, scale: Var, shift: Var, stats: Stats<T>, epsilon: f64) -> Result<Var> {
    let layout = Layout::of(g.shape(input), g.value(scale).len())?;
    if g.value(shift).len() != layout.channels {
        return Err(Error::dim("batch norm shift does not match channel count"));
    }
    let eps = T::from_f64_lossy(epsilon);
    let x = g.value(input).data();
    let (mean, var) = match &stats {
        Stats::Batch => layout.moments(x),
        Stats::Fixed { mean, var } => (mean.clone(), var.clone()),
    };
    let mut out = vec![T::zero(); x.len()];
    for c in 0..layout.channels {
        let inv = T::one() / (var[c] + eps).sqrt();
        let (a, b) = (g.value(scale).data()[c], g.value(shift).data()[c]);
        layout.for_channel(x, c, |i, v| out[i] = a * (v - mean[c]) * inv + b);
    }
    let value = Tensor::new(g.shape(input), out)?;
    Ok(g.record(
        &[input, scale, shift],
        value,
        Box::new(BatchNormBackward {
            layout,
            stats,
            epsilon: eps,
        }),
    ))
}

impl<T: Real> Backward<T> for BatchNormBackward<T> {
    fn backward(&self, up: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let l = self.layout;
        let (x, scale) = (inputs[0].data(), inputs[1].data());
        let dy = up.data();
        let (mean, var) = match &self.stats {
            Stats::Batch => l.moments(x),
            Stats::Fixed { mean, var } => (mean.clone(), var.clone()),
        };
        let n = T::from_usize(l.count()).unwrap();
        let mut dx = vec![T::zero(); x.len()];
        let mut dscale = vec![T::zero(); l.channels];
        let mut dshift = vec![T::zero(); l.channels];
        for c in 0..l.channels {
            let inv = T::one() / (var[c] + self.epsilon).sqrt();
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            l.for_channel(x, c, |i, v| {
                let xhat = (v - mean[c]) * inv;
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * xhat;
            });
            dscale[c] = sum_dy_xhat;
            dshift[c] = sum_dy;
            match self.stats {
                Stats::Batch => {
                    // dx = γ·inv/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                    let k = scale[c] * inv / n;
                    l.for_channel(x, c, |i, v| {
                        let xhat = (v - mean[c]) * inv;
                        dx[i] = k * (n * dy[i] - sum_dy - xhat * sum_dy_xhat);
                    });
                }
                Stats::Fixed { .. } => {
                    let k = scale[c] * inv;
                    l.for_channel(x, c, |i, _| dx[i] = k * dy[i]);
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(inputs[0].shape(), dx)?),
            Some(Tensor::new(&[l.channels], dscale)?),
            Some(Tensor::new(&[l.channels], dshift)?),
        ])
    }

    fn name(&self) -> &'static str {
        "batch_norm"
    }
}

/// Set every spiking layer's threshold to the largest input current it
/// receives over `data` and all `timesteps`, front to back, so each layer is
/// calibrated against already-normalized upstream activity. Returns the
/// thresholds in spiking-layer order.
pub fn normalize_thresholds<T: Real>(
    net: &mut Network<T>,
    data: &Dataset,
    timesteps: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::contract("threshold normalization needs a non-empty dataset"));
    }
    if net
        .spec()
        .layers
        .iter()
        .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    {
        return Err(Error::contract(
            "threshold normalization applies to networks without batch norm",
        ));
    }
    let spiking = net.spec().spiking_layers();
    let mut thresholds = Vec::with_capacity(spiking.len());
    for (ordinal, &layer) in spiking.iter().enumerate() {
        let mut max_current = f64::NEG_INFINITY;
        for batch in data.sequential_batches(batch_size.max(1)) {
            let mut g = Graph::<T>::new();
            let input = batch.images.cast::<T>();
            let out = net.forward(&mut g, &input, &ForwardOptions::eval(timesteps))?;
            let currents = g.value(out.trace.layers[ordinal].currents.var());
            if let Some(m) = currents.max_value() {
                max_current = max_current.max(m.to_f64().unwrap());
            }
        }
        let theta = if max_current > THRESHOLD_FLOOR {
            max_current
        } else {
            THRESHOLD_FLOOR
        };
        net.set_threshold(layer, theta)?;
        thresholds.push(theta);
    }
    Ok(thresholds)
}
