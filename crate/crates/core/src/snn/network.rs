//! Parameters and the time-unrolled executor.
//!
//! The network runs layer by layer over the whole time window: every layer
//! sees the full `[T, N, ...]` sequence of its predecessor before the next
//! layer starts. Only spiking layers step through time individually. Values
//! that are identical at every timestep (the constant input current and
//! whatever is computed from it before the first spiking layer) are kept as
//! a single `[N, ...]` tensor instead of `T` copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::neuron::{if_step, NeuronConfig};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::normalization::{BatchNormState, BnMode};
use crate::tensor::{Real, Tensor};

/// A value flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seq {
    /// Same at every timestep; shape `[N, ...]`.
    Constant(Var),
    /// Shape `[T, N, ...]`.
    Timed(Var),
}

impl Seq {
    pub fn var(self) -> Var {
        match self {
            Seq::Constant(v) | Seq::Timed(v) => v,
        }
    }

    fn map<T: Real>(
        self,
        g: &mut Graph<T>,
        f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Seq> {
        match self {
            Seq::Constant(v) => Ok(Seq::Constant(f(g, v)?)),
            Seq::Timed(v) => {
                // Fold time into the batch axis, apply, unfold.
                let shape = g.shape(v).to_vec();
                let mut folded = vec![shape[0] * shape[1]];
                folded.extend_from_slice(&shape[2..]);
                let flat = g.reshape(v, &folded)?;
                let out = f(g, flat)?;
                let mut unfolded = vec![shape[0], shape[1]];
                unfolded.extend_from_slice(&g.shape(out)[1..]);
                Ok(Seq::Timed(g.reshape(out, &unfolded)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T: Real = f32> {
    None,
    Weight(Tensor<T>),
    BatchNorm(BatchNormState<T>),
}

/// Per spiking layer record of one forward pass.
#[derive(Clone, Debug)]
pub struct SpikingTrace {
    /// Index into the network's layer list.
    pub layer: usize,
    pub currents: Seq,
    /// Pre-reset potential at each timestep, `[N, ...]` each.
    pub potentials: Vec<Var>,
    /// Output spikes, `[T, N, ...]`.
    pub spikes: Var,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub timesteps: usize,
    pub layers: Vec<SpikingTrace>,
}

/// Mean spike value of one spiking layer over time, batch and neurons.
pub fn firing_rate<T: Real>(g: &Graph<T>, trace: &Trace, ordinal: usize) -> Result<f64> {
    let layer = trace.layers.get(ordinal).ok_or_else(|| {
        Error::contract(format!(
            "no spiking layer {ordinal}; trace has {}",
            trace.layers.len()
        ))
    })?;
    Ok(g.value(layer.spikes).mean().to_f64().unwrap())
}

#[derive(Clone, Debug)]
pub struct ParamVar {
    pub layer: usize,
    pub name: String,
    pub var: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, classes]`: output currents summed over time.
    pub logits: Var,
    pub trace: Trace,
    /// Tape leaves of every trainable parameter, in [`Network::params_mut`] order.
    pub params: Vec<ParamVar>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub timesteps: usize,
    pub mode: BnMode,
    /// Seeds the dropout masks in train mode.
    pub seed: u64,
    /// Keep gradients of spikes and potentials for diagnostics.
    pub retain_trace_grads: bool,
}

impl ForwardOptions {
    pub fn train(timesteps: usize, seed: u64) -> Self {
        Self {
            timesteps,
            mode: BnMode::Train,
            seed,
            retain_trace_grads: false,
        }
    }

    pub fn eval(timesteps: usize) -> Self {
        Self {
            timesteps,
            mode: BnMode::Eval,
            seed: 0,
            retain_trace_grads: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    params: Vec<LayerParams<T>>,
}

impl<T: Real> Network<T> {
    /// Fresh network with fan-in scaled normal weights,
    /// `std = sqrt(2 / fan_in)`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    LayerParams::Weight(kaiming(&mut rng, &[inputs, outputs], inputs))
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => LayerParams::Weight(kaiming(
                    &mut rng,
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                )),
                LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm(BatchNormState::new(channels)),
                _ => LayerParams::None,
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// Assemble from existing parameters, checking them against the spec.
    pub fn from_parts(spec: NetworkSpec, params: Vec<LayerParams<T>>) -> Result<Self> {
        let template = Self::init(spec.clone(), 0)?;
        if params.len() != template.params.len() {
            return Err(Error::Topology(format!(
                "{} parameter groups for {} layers",
                params.len(),
                template.params.len()
            )));
        }
        for (i, (have, want)) in params.iter().zip(&template.params).enumerate() {
            let same = match (have, want) {
                (LayerParams::None, LayerParams::None) => true,
                (LayerParams::Weight(a), LayerParams::Weight(b)) => {
                    if a.shape() != b.shape() {
                        return Err(Error::ShapeMismatch {
                            name: format!("layer{i}.weight"),
                            expected: b.shape().to_vec(),
                            found: a.shape().to_vec(),
                        });
                    }
                    true
                }
                (LayerParams::BatchNorm(a), LayerParams::BatchNorm(b)) => a.channels() == b.channels(),
                _ => false,
            };
            if !same {
                return Err(Error::Topology(format!("layer {i} parameters do not match the spec")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn layer_params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    /// Set the surrogate width of every spiking layer.
    pub fn set_gamma(&mut self, gamma: f64) {
        self.spec.map_neurons(|n| n.gamma = gamma);
    }

    pub fn gamma(&self) -> Option<f64> {
        self.neurons().first().map(|n| n.gamma)
    }

    pub fn neurons(&self) -> Vec<NeuronConfig> {
        self.spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Spiking { neuron } => Some(*neuron),
                _ => None,
            })
            .collect()
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.neurons().iter().map(|n| n.threshold).collect()
    }

    pub fn set_threshold(&mut self, layer: usize, threshold: f64) -> Result<()> {
        match self.spec.layers.get_mut(layer) {
            Some(LayerSpec::Spiking { neuron }) => {
                let updated = NeuronConfig { threshold, ..*neuron };
                updated.validate()?;
                *neuron = updated;
                Ok(())
            }
            _ => Err(Error::contract(format!("layer {layer} is not a spiking layer"))),
        }
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter_mut().enumerate() {
            match p {
                LayerParams::Weight(w) => out.push((format!("layer{i}.weight"), w)),
                LayerParams::BatchNorm(bn) => {
                    out.push((format!("layer{i}.scale"), &mut bn.scale));
                    out.push((format!("layer{i}.shift"), &mut bn.shift));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Weight(w) => w.len(),
                LayerParams::BatchNorm(bn) => 2 * bn.channels(),
                LayerParams::None => 0,
            })
            .sum()
    }

    /// Unroll the network for `opts.timesteps` steps on `input`
    /// (`[N, ...input_shape]`), injected as a constant current every step.
    pub fn forward(&mut self, g: &mut Graph<T>, input: &Tensor<T>, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let steps = opts.timesteps;
        if steps < 1 {
            return Err(Error::contract("at least one timestep is required"));
        }
        if input.shape().len() != self.spec.input_shape.len() + 1 || input.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(format!(
                "input {:?} does not match sample shape {:?}",
                input.shape(),
                self.spec.input_shape
            )));
        }
        let batch = input.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut x = Seq::Constant(g.constant(input.clone()));
        let mut trace = Trace {
            timesteps: steps,
            layers: Vec::new(),
        };
        let mut params = Vec::new();
        let mut logits = None;

        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = match (layer, &mut self.params[i]) {
                (LayerSpec::Dense { .. }, LayerParams::Weight(w)) => {
                    let wv = g.leaf(w.clone());
                    params.push(ParamVar { layer: i, name: format!("layer{i}.weight"), var: wv });
                    x.map(g, |g, v| g.matmul(v, wv))?
                }
                (LayerSpec::Conv2d { stride, padding, .. }, LayerParams::Weight(w)) => {
                    let wv = g.leaf(w.clone());
                    params.push(ParamVar { layer: i, name: format!("layer{i}.weight"), var: wv });
                    x.map(g, |g, v| g.conv2d(v, wv, *stride, *padding))?
                }
                (LayerSpec::AvgPool { window }, _) => x.map(g, |g, v| g.avgpool2d(v, *window))?,
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm(bn)) => {
                    let scale = g.leaf(bn.scale.clone());
                    let shift = g.leaf(bn.shift.clone());
                    params.push(ParamVar { layer: i, name: format!("layer{i}.scale"), var: scale });
                    params.push(ParamVar { layer: i, name: format!("layer{i}.shift"), var: shift });
                    x.map(g, |g, v| bn.apply(g, v, scale, shift, opts.mode))?
                }
                (LayerSpec::Dropout { p }, _) => {
                    if opts.mode == BnMode::Train && *p > 0.0 {
                        // One mask per forward pass, shared by all timesteps.
                        let sample = g.shape(x.var())[usize::from(matches!(x, Seq::Timed(_)))..].to_vec();
                        let keep = T::one() / T::from_f64_lossy(1.0 - p);
                        let mask: Vec<T> = (0..sample.iter().product::<usize>())
                            .map(|_| if rng.random::<f64>() < *p { T::zero() } else { keep })
                            .collect();
                        let mask = g.constant(Tensor::new(&sample, mask)?);
                        match x {
                            Seq::Constant(v) => Seq::Constant(g.mul(v, mask)?),
                            Seq::Timed(v) => Seq::Timed(g.mul(v, mask)?),
                        }
                    } else {
                        x
                    }
                }
                (LayerSpec::Spiking { neuron }, _) => {
                    let layer_trace = run_spiking(g, x, neuron, steps, i, opts.retain_trace_grads)?;
                    let out = Seq::Timed(layer_trace.spikes);
                    trace.layers.push(layer_trace);
                    out
                }
                (LayerSpec::Flatten, _) => x.map(g, |g, v| {
                    let s = g.shape(v);
                    let flat = [s[0], s[1..].iter().product()];
                    g.reshape(v, &flat)
                })?,
                (LayerSpec::OutputAccumulator, _) => {
                    let summed = match x {
                        Seq::Timed(v) => g.sum_axis(v, 0)?,
                        Seq::Constant(v) => g.scale(v, T::from_usize(steps).unwrap()),
                    };
                    logits = Some(summed);
                    x
                }
                (spec, _) => {
                    return Err(Error::Topology(format!(
                        "layer {i} ({}) has mismatched parameters",
                        spec.kind()
                    )))
                }
            };
        }
        let logits = logits.ok_or_else(|| Error::contract("network has no output accumulator"))?;
        debug_assert_eq!(g.shape(logits)[0], batch);
        Ok(ForwardOutput { logits, trace, params })
    }
}

fn kaiming<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn run_spiking<T: Real>(
    g: &mut Graph<T>,
    currents: Seq,
    neuron: &NeuronConfig,
    steps: usize,
    layer: usize,
    retain: bool,
) -> Result<SpikingTrace> {
    let step_shape = match currents {
        Seq::Constant(v) => g.shape(v).to_vec(),
        Seq::Timed(v) => g.shape(v)[1..].to_vec(),
    };
    let mut u = g.constant(Tensor::zeros(&step_shape));
    let mut potentials = Vec::with_capacity(steps);
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let current = match currents {
            Seq::Constant(v) => v,
            Seq::Timed(v) => g.select(v, t)?,
        };
        let step = if_step(g, u, current, neuron)?;
        if retain {
            g.retain_grad(step.potential);
        }
        potentials.push(step.potential);
        spikes.push(step.spike);
        u = step.next;
    }
    let spikes = g.stack(&spikes)?;
    if retain {
        g.retain_grad(spikes);
    }
    Ok(SpikingTrace {
        layer,
        currents,
        potentials,
        spikes,
    })
}

/// Convenience wrapper: unroll `net` on `input` for `timesteps` steps in eval
/// mode and return the logits with the trace.
pub fn unroll_forward<T: Real>(
    net: &mut Network<T>,
    g: &mut Graph<T>,
    input: &Tensor<T>,
    timesteps: usize,
) -> Result<(Var, Trace)> {
    let out = net.forward(g, input, &ForwardOptions::eval(timesteps))?;
    Ok((out.logits, out.trace))
}
