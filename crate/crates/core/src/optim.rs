//! Adam with per-group weight decay folded into the gradient as an L2 term.

use crate::error::{Error, Result};
use crate::model::{ParamGroup, ProtoModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Learning rate of the prototypes when set; `learning_rate` otherwise.
    pub prototype_learning_rate: Option<f64>,
    /// Learning rate of the softmax temperature when set; `learning_rate` otherwise.
    pub temperature_learning_rate: Option<f64>,
    pub weight_decay_networks: f64,
    pub weight_decay_prototypes: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            prototype_learning_rate: None,
            temperature_learning_rate: None,
            weight_decay_networks: 1e-6,
            weight_decay_prototypes: 0.0,
            batch_size: 32,
            max_epochs: 500,
            plateau_patience: 10,
            plateau_epsilon: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn decay(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Network => self.weight_decay_networks,
            ParamGroup::Prototype | ParamGroup::Temperature => self.weight_decay_prototypes,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Prototype => self.prototype_learning_rate.unwrap_or(self.learning_rate),
            ParamGroup::Temperature => self.temperature_learning_rate.unwrap_or(self.learning_rate),
            ParamGroup::Network => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let group_lrs = [self.prototype_learning_rate, self.temperature_learning_rate];
        if group_lrs.iter().flatten().any(|lr| !(*lr >= 0.0)) {
            return Err(Error::Config("prototype and temperature learning rates must be ≥ 0".into()));
        }
        if !(self.learning_rate >= 0.0) || self.weight_decay_networks < 0.0 || self.weight_decay_prototypes < 0.0 {
            return Err(Error::Config("learning rate and weight decays must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and plateau_patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_epsilon) {
            return Err(Error::Config("plateau_epsilon must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Flat Adam state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    /// One Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, decay: f64) -> Result<()> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let g = g + decay * *p;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Adam state for every tensor of a `ProtoModel`, in `named_tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(model: &ProtoModel) -> Self {
        Self {
            moments: model
                .named_tensors()
                .iter()
                .map(|(_, _, t)| AdamMoments::new(t.len()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut ProtoModel, grads: &ProtoModel, config: &OptimizerConfig) -> Result<()> {
        let groups: Vec<ParamGroup> = model.named_tensors().iter().map(|(_, g, _)| *g).collect();
        let grad_tensors = grads.named_tensors();
        for (((param, (name, _, grad)), group), state) in model
            .tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(groups)
            .zip(self.moments.iter_mut())
        {
            state
                .update(&mut param.data, &grad.data, config.lr(group), config.decay(group))
                .map_err(|e| Error::Numeric(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Clears the moments of prototype row `k` (after reinitializing it).
    pub fn reset_prototype(&mut self, model: &ProtoModel, k: usize) {
        let idx = model
            .named_tensors()
            .iter()
            .position(|(n, _, _)| n == "prototypes")
            .expect("prototypes tensor");
        let bins = model.bins();
        let state = &mut self.moments[idx];
        state.first[k * bins..(k + 1) * bins].fill(0.0);
        state.second[k * bins..(k + 1) * bins].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut st = AdamMoments::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        st.update(&mut p, &[0.0; 3], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.5, -7.0] {
            let mut st = AdamMoments::new(1);
            let mut p = vec![0.0];
            st.update(&mut p, &[g], 0.01, 0.0).unwrap();
            assert!((p[0] + 0.01 * g.signum()).abs() < 1e-7, "g={g}: {}", p[0]);
        }
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // reference: same recursion written out by hand
        let (lr, mut w, mut m, mut v) = (0.1, 1.0f64, 0.0f64, 0.0f64);
        let mut st = AdamMoments::new(1);
        let mut p = vec![1.0];
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let g_p = 2.0 * p[0];
            st.update(&mut p, &[g_p], lr, 0.0).unwrap();
            assert!((p[0] - w).abs() < 1e-14);
            assert!(p[0].abs() < prev);
            prev = p[0].abs();
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut st = AdamMoments::new(2);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(st.update(&mut p, &[0.0, f64::NAN], 0.1, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn decay_acts_as_l2() {
        let mut st = AdamMoments::new(1);
        let mut p = vec![2.0];
        st.update(&mut p, &[0.0], 0.01, 0.5).unwrap();
        assert!(p[0] < 2.0);
    }
}
