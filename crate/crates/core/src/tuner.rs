//! Per-layer gradient profiling and bisection search for the surrogate
//! width that balances gradient magnitudes across depth.

use std::path::Path;

use serde::Serialize;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::cross_entropy_on_summed_currents;
use crate::normalization::BnMode;
use crate::snn::{ForwardOptions, Network, NeuronConfig};
use crate::tensor::{Real, Tensor};

/// Gradient statistics of one spiking layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerGradient {
    /// Depth position among spiking layers, from the input.
    pub layer_index: usize,
    pub layer_name: String,
    /// Mean `|dL/ds|` over time, batch and neurons.
    pub mean_abs_grad: f64,
    pub grad_variance: f64,
    /// Variance of `dL/du` over the pre-reset potentials.
    pub potential_grad_variance: f64,
    /// Mean of the squared surrogate over the pre-reset potentials.
    pub mean_fsq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientProfile {
    pub layers: Vec<LayerGradient>,
    pub gamma: f64,
    pub seed: u64,
    pub batches: usize,
}

#[derive(Default)]
struct Moments {
    n: f64,
    abs: f64,
    sum: f64,
    sq: f64,
}

impl Moments {
    fn add<T: Real>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            let v = v.to_f64().unwrap();
            self.n += 1.0;
            self.abs += v.abs();
            self.sum += v;
            self.sq += v * v;
        }
    }

    fn mean_abs(&self) -> f64 {
        self.abs / self.n
    }

    fn variance(&self) -> f64 {
        let mean = self.sum / self.n;
        (self.sq / self.n - mean * mean).max(0.0)
    }
}

/// Measure `dL/ds` of every spiking layer at the current parameters with
/// surrogate width `gamma`, over `batches` (no parameter updates). The loss
/// is cross-entropy on the summed output currents; batch norm uses batch
/// statistics and dropout masks are seeded by `seed`.
pub fn profile_gradients<T: Real>(
    net: &Network<T>,
    batches: &[Batch],
    gamma: f64,
    timesteps: usize,
    seed: u64,
) -> Result<GradientProfile> {
    let spiking = net.spec().spiking_layers();
    if spiking.is_empty() {
        return Err(Error::contract("network has no spiking layers to profile"));
    }
    if batches.is_empty() {
        return Err(Error::contract("profiling needs at least one batch"));
    }
    let mut net = net.clone();
    net.set_gamma(gamma);
    let neurons = net.neurons();
    let mut spikes = (0..spiking.len()).map(|_| Moments::default()).collect::<Vec<_>>();
    let mut potentials = (0..spiking.len()).map(|_| Moments::default()).collect::<Vec<_>>();
    let mut fsq = vec![(0.0f64, 0.0f64); spiking.len()];
    for (b, batch) in batches.iter().enumerate() {
        let mut g = Graph::<T>::new();
        let opts = ForwardOptions {
            timesteps,
            mode: BnMode::Train,
            seed: seed.wrapping_add(b as u64),
            retain_trace_grads: true,
        };
        let out = net.forward(&mut g, &batch.images.cast::<T>(), &opts)?;
        let loss = cross_entropy_on_summed_currents(&mut g, out.logits, &batch.labels)?;
        g.backward(loss)?;
        for (k, layer) in out.trace.layers.iter().enumerate() {
            let zero = Tensor::zeros(g.shape(layer.spikes));
            spikes[k].add(g.grad(layer.spikes).unwrap_or(&zero));
            for &u in &layer.potentials {
                let zero = Tensor::zeros(g.shape(u));
                potentials[k].add(g.grad(u).unwrap_or(&zero));
                for &v in g.value(u).data() {
                    let f = neurons[k].surrogate(v.to_f64().unwrap());
                    fsq[k].0 += f * f;
                    fsq[k].1 += 1.0;
                }
            }
        }
    }
    let spec = net.spec();
    let layers = (0..spiking.len())
        .map(|k| LayerGradient {
            layer_index: k,
            layer_name: spec.spiking_layer_name(k),
            mean_abs_grad: spikes[k].mean_abs(),
            grad_variance: spikes[k].variance(),
            potential_grad_variance: potentials[k].variance(),
            mean_fsq: fsq[k].0 / fsq[k].1,
        })
        .collect();
    Ok(GradientProfile {
        layers,
        gamma,
        seed,
        batches: batches.len(),
    })
}

/// Mean `|grad|` of the input-side half of the layers divided by that of
/// the output-side half. With an odd count the middle layer counts towards
/// the input side. A silent output side gives `+inf`.
pub fn balance_ratio(profile: &GradientProfile) -> Result<f64> {
    let n = profile.layers.len();
    if n < 2 {
        return Err(Error::contract("balance ratio needs at least two spiking layers"));
    }
    let split = n.div_ceil(2);
    let mean = |ls: &[LayerGradient]| ls.iter().map(|l| l.mean_abs_grad).sum::<f64>() / ls.len() as f64;
    let first = mean(&profile.layers[..split]);
    let second = mean(&profile.layers[split..]);
    Ok(if second == 0.0 { f64::INFINITY } else { first / second })
}

/// Monte-Carlo estimate of the mean squared surrogate over potential samples.
pub fn fsq_mean(gamma: f64, beta: f64, threshold: f64, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("fsq_mean needs at least one sample"));
    }
    let cfg = NeuronConfig {
        threshold,
        beta,
        gamma,
        ..NeuronConfig::default()
    };
    Ok(samples.iter().map(|&u| cfg.surrogate(u).powi(2)).sum::<f64>() / samples.len() as f64)
}

pub const GAMMA_CEILING: f64 = 1e4;
const WIDEN_FACTOR: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOptions {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    /// Stop once `|log2 R| <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            gamma_lo: 1.0,
            gamma_hi: 100.0,
            tol: 0.5,
            max_iter: 20,
            timesteps: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneStatus {
    Converged,
    /// Fewer than two spiking layers: nothing to balance.
    TrivialDepth,
    /// `R <= 1` already at the lower end of the bracket.
    LowerBoundBalanced,
    /// `R > 1` even at the largest allowed width.
    BracketFailed,
    MaxIterations,
}

/// One evaluation of `R(gamma)` during the search.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuneStep {
    pub phase: &'static str,
    pub iteration: usize,
    pub gamma: f64,
    pub ratio: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub gamma: f64,
    /// Bisection steps taken.
    pub iterations: usize,
    pub ratio: f64,
    pub status: TuneStatus,
    pub history: Vec<TuneStep>,
    /// Whether `R` was non-increasing in `gamma` over all visited points.
    pub monotone: bool,
    /// Profile at the chosen `gamma`, if one was measured.
    pub profile: Option<GradientProfile>,
}

impl TuneResult {
    pub fn converged(&self) -> bool {
        matches!(
            self.status,
            TuneStatus::Converged | TuneStatus::TrivialDepth | TuneStatus::LowerBoundBalanced
        )
    }
}

/// Bisection on `log gamma` for `R(gamma) = 1`.
///
/// The bracket needs `R(lo) > 1 >= R(hi)`. If `R(lo) <= 1` the lower end is
/// returned at once, flagged [`TuneStatus::LowerBoundBalanced`]. If
/// `R(hi) > 1` the upper end is multiplied by 4 up to 1e4; failure there is
/// reported as [`TuneStatus::BracketFailed`]. Every evaluation uses the same
/// batches and seed, so `R` is a deterministic function of `gamma`.
pub fn tune_gamma<T: Real>(net: &Network<T>, batches: &[Batch], opts: &TuneOptions) -> Result<TuneResult> {
    if !(opts.gamma_lo > 0.0 && opts.gamma_lo < opts.gamma_hi && opts.gamma_hi.is_finite()) {
        return Err(Error::contract(format!(
            "invalid gamma bracket [{}, {}]",
            opts.gamma_lo, opts.gamma_hi
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::contract("tolerance must be positive and max_iter at least 1"));
    }
    if net.spec().spiking_layers().len() < 2 {
        let gamma = net.gamma().unwrap_or(opts.gamma_lo);
        log::info!("fewer than two spiking layers; keeping gamma = {gamma}");
        return Ok(TuneResult {
            gamma,
            iterations: 0,
            ratio: 1.0,
            status: TuneStatus::TrivialDepth,
            history: Vec::new(),
            monotone: true,
            profile: None,
        });
    }

    let mut search = Search {
        net,
        batches,
        opts,
        history: Vec::new(),
        profiles: Vec::new(),
    };
    let (mut lo, mut hi) = (opts.gamma_lo, opts.gamma_hi);
    let r_lo = search.measure(lo, "bracket", 0, lo, hi)?;
    if !(r_lo > 1.0) {
        log::info!("R({lo}) = {r_lo} <= 1: the lower bound is already balanced");
        return Ok(search.finish(lo, r_lo, 0, TuneStatus::LowerBoundBalanced));
    }
    let mut r_hi = search.measure(hi, "bracket", 0, lo, hi)?;
    while r_hi > 1.0 && hi < GAMMA_CEILING {
        hi = (hi * WIDEN_FACTOR).min(GAMMA_CEILING);
        r_hi = search.measure(hi, "widen_hi", 0, lo, hi)?;
    }
    if r_hi > 1.0 {
        log::warn!("R({hi}) = {r_hi} > 1: no bracket below {GAMMA_CEILING}");
        return Ok(search.finish(hi, r_hi, 0, TuneStatus::BracketFailed));
    }

    let mut best = (f64::INFINITY, lo, r_lo);
    for iteration in 1..=opts.max_iter {
        let mid = (lo * hi).sqrt();
        let r = search.measure(mid, "bisect", iteration, lo, hi)?;
        let err = r.log2().abs();
        if err < best.0 {
            best = (err, mid, r);
        }
        if err <= opts.tol {
            return Ok(search.finish(mid, r, iteration, TuneStatus::Converged));
        }
        if r > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(search.finish(best.1, best.2, opts.max_iter, TuneStatus::MaxIterations))
}

struct Search<'a, T: Real> {
    net: &'a Network<T>,
    batches: &'a [Batch],
    opts: &'a TuneOptions,
    history: Vec<TuneStep>,
    profiles: Vec<GradientProfile>,
}

impl<T: Real> Search<'_, T> {
    fn measure(&mut self, gamma: f64, phase: &'static str, iteration: usize, lo: f64, hi: f64) -> Result<f64> {
        let profile = profile_gradients(self.net, self.batches, gamma, self.opts.timesteps, self.opts.seed)?;
        let ratio = balance_ratio(&profile)?;
        log::debug!("{phase} {iteration}: gamma {gamma:.4e} -> R {ratio:.4}");
        self.history.push(TuneStep {
            phase,
            iteration,
            gamma,
            ratio,
            lo,
            hi,
        });
        self.profiles.push(profile);
        Ok(ratio)
    }

    fn finish(self, gamma: f64, ratio: f64, iterations: usize, status: TuneStatus) -> TuneResult {
        let monotone = is_monotone(&self.history);
        if !monotone {
            log::warn!("balance ratio was not monotone in gamma over the visited points");
        }
        let profile = self
            .history
            .iter()
            .rposition(|s| s.gamma == gamma)
            .map(|i| self.profiles[i].clone());
        TuneResult {
            gamma,
            iterations,
            ratio,
            status,
            history: self.history,
            monotone,
            profile,
        }
    }
}

fn is_monotone(history: &[TuneStep]) -> bool {
    let mut points: Vec<(f64, f64)> = history.iter().map(|s| (s.gamma, s.ratio)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.windows(2).all(|w| w[1].1 <= w[0].1)
}

/// Profile CSV with the header `layer_index,layer_name,mean_abs_grad,grad_variance`.
pub fn write_profile<W: std::io::Write>(out: W, profile: &GradientProfile) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer_index", "layer_name", "mean_abs_grad", "grad_variance"])?;
    for l in &profile.layers {
        w.write_record([
            l.layer_index.to_string(),
            l.layer_name.clone(),
            l.mean_abs_grad.to_string(),
            l.grad_variance.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("profile", e))?;
    Ok(())
}

pub fn write_profile_csv(path: impl AsRef<Path>, profile: &GradientProfile) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_profile(file, profile)
}

/// Search history CSV: `phase,iteration,gamma,ratio,lo,hi`.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[TuneStep]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["phase", "iteration", "gamma", "ratio", "lo", "hi"])?;
    for s in history {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(grads: &[f64]) -> GradientProfile {
        GradientProfile {
            layers: grads
                .iter()
                .enumerate()
                .map(|(i, &g)| LayerGradient {
                    layer_index: i,
                    layer_name: format!("l{i}"),
                    mean_abs_grad: g,
                    grad_variance: 0.0,
                    potential_grad_variance: 0.0,
                    mean_fsq: 0.0,
                })
                .collect(),
            gamma: 1.0,
            seed: 0,
            batches: 1,
        }
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(balance_ratio(&profile(&[3.0, 3.0, 3.0, 3.0])).unwrap(), 1.0);
        assert_eq!(balance_ratio(&profile(&[2.0, 2.0, 1.0, 1.0])).unwrap(), 2.0);
        // odd middle layer counts towards the first half
        assert_eq!(balance_ratio(&profile(&[1.0, 4.0, 5.0])).unwrap(), 0.5);
        assert_eq!(balance_ratio(&profile(&[1.0, 0.0])).unwrap(), f64::INFINITY);
        assert!(balance_ratio(&profile(&[1.0])).is_err());
    }

    #[test]
    fn fsq_flat_and_peak() {
        assert_eq!(fsq_mean(0.0, 0.7, 1.0, &[-3.0, 0.2, 9.0]).unwrap(), 0.7 * 0.7);
        assert_eq!(fsq_mean(50.0, 1.3, 1.0, &[1.0, 1.0]).unwrap(), 1.3 * 1.3);
        assert!(fsq_mean(1.0, 1.0, 1.0, &[]).is_err());
    }

    #[test]
    fn profile_csv_layout() {
        let mut out = Vec::new();
        write_profile(&mut out, &profile(&[0.5, 0.25])).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "layer_index,layer_name,mean_abs_grad,grad_variance\n0,l0,0.5,0\n1,l1,0.25,0\n"
        );
    }

    #[test]
    fn monotonicity_check() {
        let step = |gamma, ratio| TuneStep {
            phase: "bisect",
            iteration: 0,
            gamma,
            ratio,
            lo: 0.0,
            hi: 0.0,
        };
        assert!(is_monotone(&[step(1.0, 3.0), step(100.0, 0.1), step(10.0, 1.0)]));
        assert!(!is_monotone(&[step(1.0, 3.0), step(10.0, 4.0)]));
    }
}
