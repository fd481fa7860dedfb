#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikegrad::snn::{LayerSpec, NetworkSpec, NeuronConfig, ResetMode};
use spikegrad::{Graph, Real, Result, Tensor, Var};

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between the tape gradient of `f` and central
/// differences, over every element of every input.
pub fn grad_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Plain loop integrate-and-fire reference: returns the spike train and the
/// final potential.
pub fn simulate<T: Real>(currents: &[T], threshold: T, reset: ResetMode) -> (Vec<u8>, T) {
    let mut u = T::zero();
    let mut spikes = Vec::with_capacity(currents.len());
    for &i in currents {
        u = u + i;
        if u > threshold {
            spikes.push(1);
            u = match reset {
                ResetMode::Hard => T::zero(),
                ResetMode::Soft => u - threshold,
            };
        } else {
            spikes.push(0);
        }
    }
    (spikes, u)
}

pub fn neuron(threshold: f64, reset: ResetMode, gamma: f64) -> NeuronConfig {
    NeuronConfig {
        threshold,
        reset,
        gamma,
        ..NeuronConfig::default()
    }
}

/// `inputs -> dense -> spiking -> dense -> accumulator`.
pub fn single_layer_spec(inputs: usize, hidden: usize, classes: usize, n: NeuronConfig) -> NetworkSpec {
    NetworkSpec {
        name: "single".into(),
        input_shape: vec![inputs],
        layers: vec![
            LayerSpec::Dense {
                inputs,
                outputs: hidden,
            },
            LayerSpec::Spiking { neuron: n },
            LayerSpec::Dense {
                inputs: hidden,
                outputs: classes,
            },
            LayerSpec::OutputAccumulator,
        ],
    }
}

/// The 16-layer dense stack at initialization with eight batches of 32
/// clustered samples, as used for the gradient-balance diagnostics.
pub fn deep16_fixture() -> (spikegrad::snn::Network<f32>, Vec<spikegrad::data::Batch>) {
    let data = spikegrad::data::synth_clusters(256, 64, 10, 0.15, 1).unwrap();
    let opts = spikegrad::snn::ArchOptions {
        input_shape: vec![64],
        classes: 10,
        ..Default::default()
    };
    let spec = spikegrad::snn::architecture("deep16", &opts).unwrap();
    let net = spikegrad::snn::Network::init(spec, 7).unwrap();
    let batches = data.sequential_batches(32).collect();
    (net, batches)
}
