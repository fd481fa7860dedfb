use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates, one pair per parameter tensor in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl AdamW {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    /// One update: `p <- p - lr * wd * p`, then the bias-corrected Adam step.
    /// Moments are created on the first call. Non-finite gradients or
    /// updates leave every parameter untouched and name the offending tensor.
    pub fn step<T: Real>(
        &self,
        state: &mut OptimizerState<T>,
        params: Vec<(String, &mut Tensor<T>)>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    location: format!("gradient of {name}"),
                });
            }
        }
        if state.first_moment.is_empty() {
            state.first_moment = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            state.second_moment = state.first_moment.clone();
        }
        if state.first_moment.len() != params.len() {
            return Err(Error::contract("optimizer state was built for a different parameter list"));
        }
        let t = state.step as i32 + 1;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let correct1 = c(1.0 - self.beta1.powi(t));
        let correct2 = c(1.0 - self.beta2.powi(t));
        let decay = c(1.0 - lr * self.weight_decay);
        let (lr, eps) = (c(lr), c(self.epsilon));
        // Stage the update so an overflow leaves parameters and moments as
        // they were.
        let mut staged = Vec::with_capacity(params.len());
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            let mut m = state.first_moment[i].clone();
            let mut v = state.second_moment[i].clone();
            let mut w = (*p).clone();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, (w, &gj)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[j] = b1 * md[j] + (T::one() - b1) * gj;
                vd[j] = b2 * vd[j] + (T::one() - b2) * gj * gj;
                let m_hat = md[j] / correct1;
                let v_hat = vd[j] / correct2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !w.all_finite() {
                return Err(Error::NonFinite {
                    location: format!("update of {name}"),
                });
            }
            staged.push((w, m, v));
        }
        for (i, ((_, p), (w, m, v))) in params.into_iter().zip(staged).enumerate() {
            *p = w;
            state.first_moment[i] = m;
            state.second_moment[i] = v;
        }
        state.step += 1;
        Ok(())
    }
}
