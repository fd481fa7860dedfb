//! Integrate-and-fire dynamics and the surrogate spike nonlinearity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Potential drops to zero after a spike.
    Hard,
    /// Threshold is subtracted from the potential after a spike.
    Soft,
}

impl std::str::FromStr for ResetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(Error::contract(format!("unknown reset mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub threshold: f64,
    pub reset: ResetMode,
    /// Surrogate height at the threshold.
    pub beta: f64,
    /// Surrogate width parameter; larger is narrower.
    pub gamma: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            reset: ResetMode::Soft,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl NeuronConfig {
    pub fn new(threshold: f64, reset: ResetMode, beta: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            threshold,
            reset,
            beta,
            gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::contract(format!("threshold must be positive, got {}", self.threshold)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::contract(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }

    /// `β · (1 + |γ (u − ϑ)|)⁻²`
    pub fn surrogate<T: Real>(&self, u: T) -> T {
        let beta = T::from_f64_lossy(self.beta);
        let gamma = T::from_f64_lossy(self.gamma);
        let theta = T::from_f64_lossy(self.threshold);
        let d = T::one() + (gamma * (u - theta)).abs();
        beta / (d * d)
    }
}

/// Surrogate derivative evaluated elementwise on potentials.
pub fn surrogate_grad<T: Real>(u: &Tensor<T>, cfg: &NeuronConfig) -> Tensor<T> {
    u.map(|v| cfg.surrogate(v))
}

/// Binary spikes `u > ϑ` (strict).
pub fn fire<T: Real>(u: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let theta = T::from_f64_lossy(threshold);
    u.map(|v| if v > theta { T::one() } else { T::zero() })
}

/// Tensors produced by one integrate-and-fire update.
#[derive(Clone, Copy, Debug)]
pub struct IfStep {
    /// Potential after integrating the current, before reset.
    pub potential: Var,
    pub spike: Var,
    /// Potential carried into the next step.
    pub next: Var,
}

impl<T: Real> Graph<T> {
    /// Spike nonlinearity: forward is the strict step at the threshold,
    /// backward multiplies the upstream gradient by the surrogate `f(u)`.
    pub fn spike(&mut self, potential: Var, cfg: &NeuronConfig) -> Var {
        let value = fire(self.value(potential), cfg.threshold);
        let cfg = *cfg;
        self.custom("spike", &[potential], value, move |up, inputs, _| {
            let u = inputs[0];
            let data = up
                .data()
                .iter()
                .zip(u.data())
                .map(|(&g, &v)| g * cfg.surrogate(v))
                .collect();
            Ok(vec![Some(Tensor::new(u.shape(), data)?)])
        })
    }
}

/// One discrete update: integrate, fire, reset.
///
/// The spike used inside the reset is a constant, so the only gradient path
/// from the next potential back to this one is `1 − s` (hard) or `1` (soft).
pub fn if_step<T: Real>(g: &mut Graph<T>, u_prev: Var, current: Var, cfg: &NeuronConfig) -> Result<IfStep> {
    if g.shape(u_prev) != g.shape(current) {
        return Err(Error::dim(format!(
            "potential {:?} vs current {:?}",
            g.shape(u_prev),
            g.shape(current)
        )));
    }
    let potential = g.add(u_prev, current)?;
    let spike = g.spike(potential, cfg);
    let s = g.value(spike).clone();
    let next = match cfg.reset {
        ResetMode::Hard => {
            let keep = g.constant(s.map(|v| T::one() - v));
            g.mul(potential, keep)?
        }
        ResetMode::Soft => {
            let drop = g.constant(s.scale(T::from_f64_lossy(cfg.threshold)));
            g.sub(potential, drop)?
        }
    };
    Ok(IfStep {
        potential,
        spike,
        next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(u: f32, i: f32, reset: ResetMode) -> (f32, f32) {
        let mut g = Graph::<f32>::new();
        let u = g.constant(Tensor::scalar(u));
        let i = g.constant(Tensor::scalar(i));
        let cfg = NeuronConfig::new(1.0, reset, 1.0, 1.0).unwrap();
        let out = if_step(&mut g, u, i, &cfg).unwrap();
        (g.value(out.spike).item(), g.value(out.next).item())
    }

    #[test]
    fn supra_threshold_hard_and_soft() {
        assert_eq!(step(0.5, 0.7, ResetMode::Hard), (1.0, 0.0));
        let (s, u) = step(0.5, 0.7, ResetMode::Soft);
        assert_eq!(s, 1.0);
        assert!((u - 0.2).abs() < 1e-6);
    }

    #[test]
    fn sub_threshold_integrates_in_both_modes() {
        for mode in [ResetMode::Hard, ResetMode::Soft] {
            let (s, u) = step(0.3, 0.1, mode);
            assert_eq!(s, 0.0);
            assert!((u - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn threshold_equality_does_not_fire() {
        assert_eq!(step(0.5, 0.5, ResetMode::Soft).0, 0.0);
    }

    #[test]
    fn surrogate_reference_values() {
        let cfg = NeuronConfig::new(1.0, ResetMode::Soft, 1.0, 2.0).unwrap();
        assert_eq!(cfg.surrogate(1.0f64), 1.0);
        // γ(u − ϑ) = 1
        assert_eq!(cfg.surrogate(1.5f64), 0.25);
        let flat = NeuronConfig { gamma: 0.0, beta: 0.7, ..cfg };
        for u in [-3.0, 0.0, 1.0, 9.0f64] {
            assert_eq!(flat.surrogate(u), 0.7);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(NeuronConfig::new(0.0, ResetMode::Soft, 1.0, 1.0).is_err());
        assert!(NeuronConfig::new(1.0, ResetMode::Soft, 0.0, 1.0).is_err());
        assert!(NeuronConfig::new(1.0, ResetMode::Soft, 1.0, -1.0).is_err());
        assert!(NeuronConfig::new(1.0, ResetMode::Soft, 1.0, 0.0).is_ok());
    }

    #[test]
    fn spike_backward_is_surrogate_times_upstream() {
        let cfg = NeuronConfig::new(1.0, ResetMode::Soft, 1.0, 3.0).unwrap();
        let mut g = Graph::<f64>::new();
        let u = g.leaf(Tensor::from_f64(&[3], &[0.2, 1.0, 1.7]).unwrap());
        let s = g.spike(u, &cfg);
        let w = g.constant(Tensor::from_f64(&[3], &[2.0, -1.0, 0.5]).unwrap());
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let expected: Vec<f64> = [(0.2, 2.0), (1.0, -1.0), (1.7, 0.5)]
            .iter()
            .map(|&(u, w)| w * cfg.surrogate(u))
            .collect();
        assert_eq!(g.grad(u).unwrap().data(), expected.as_slice());
    }
}
