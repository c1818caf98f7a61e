//! AdamW with decoupled weight decay and a linear learning-rate decay.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Decays linearly from the initial rate to zero over this many steps.
    LinearDecay { total_steps: usize },
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u32,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: AdamWConfig,
    schedule: Schedule,
    step: usize,
    moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, config: AdamWConfig, schedule: Schedule) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                steps: 0,
            })
            .collect();
        OptimizerState {
            config,
            schedule,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        match self.schedule {
            Schedule::Constant => self.config.learning_rate,
            Schedule::LinearDecay { total_steps } if total_steps > 0 => {
                let frac = 1.0 - self.step as f64 / total_steps as f64;
                self.config.learning_rate * frac.max(0.0)
            }
            Schedule::LinearDecay { .. } => self.config.learning_rate,
        }
    }

    /// Applies one AdamW update to every trainable parameter.
    ///
    /// Frozen parameters are skipped entirely: no decay, no update, and their
    /// moment estimates stay where they were.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, set has {}",
                self.moments.len(),
                params.len()
            )));
        }
        let lr = self.current_lr();
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;

        let ids: Vec<_> = params.ids().filter(|&id| params.is_trainable(id)).collect();
        for &id in &ids {
            let g = grads.param(id).ok_or_else(|| {
                Error::Invalid(format!("no gradient for trainable parameter `{}`", params.get(id).name))
            })?;
            if g.shape() != params.value(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter `{}` {:?}",
                    g.shape(),
                    params.get(id).name,
                    params.value(id).shape()
                )));
            }
        }

        for id in ids {
            let g = grads.param(id).expect("checked above").data();
            let mom = &mut self.moments[id.0];
            mom.steps += 1;
            let bc1 = 1.0 - beta1.powi(mom.steps as i32);
            let bc2 = 1.0 - beta2.powi(mom.steps as i32);
            let w = params.value_mut(id).data_mut();
            for (((wi, gi), mi), vi) in w
                .iter_mut()
                .zip(g)
                .zip(mom.m.data_mut().iter_mut())
                .zip(mom.v.data_mut().iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi *= 1.0 - lr * weight_decay;
                *wi -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            params.value(id).ensure_finite(&params.get(id).name)?;
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::nn::params::{Group, ParamId};

    fn scalar_set(w: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.add("w", Group::MainClassifier, Tensor::new(vec![1], vec![w]).unwrap())
            .unwrap();
        ps
    }

    /// Gradients for `loss = g * w`, i.e. dL/dw = g.
    fn grads_for(ps: &ParameterSet, g: f64) -> Gradients {
        let mut graph = Graph::new();
        let w = graph.param(ps, ParamId(0)).unwrap();
        let loss = graph.scale(w, g).unwrap();
        graph.backward(loss).unwrap()
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut ps = scalar_set(1.7);
        let mut opt = OptimizerState::new(&ps, cfg(0.1, 0.0), Schedule::Constant);
        let g = grads_for(&ps, 0.0);
        opt.step(&mut ps, &g).unwrap();
        assert_eq!(ps.value(ParamId(0)).data(), &[1.7]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> w = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut ps = scalar_set(1.0);
        let mut opt = OptimizerState::new(&ps, cfg(0.1, 0.0), Schedule::Constant);
        let g = grads_for(&ps, 1.0);
        opt.step(&mut ps, &g).unwrap();
        let expect = 1.0 - 0.1 * (0.1 / 0.1) / ((0.001f64 / 0.001).sqrt() + 1e-8);
        assert!((ps.value(ParamId(0)).data()[0] - expect).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut ps = scalar_set(2.0);
        let mut opt = OptimizerState::new(&ps, cfg(0.1, 0.1), Schedule::Constant);
        let g = grads_for(&ps, 0.0);
        opt.step(&mut ps, &g).unwrap();
        assert!((ps.value(ParamId(0)).data()[0] - 0.99 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut ps = scalar_set(1.0);
        ps.freeze_group(Group::MainClassifier);
        let mut opt = OptimizerState::new(&ps, cfg(0.1, 0.1), Schedule::Constant);
        let empty = Gradients::default();
        for _ in 0..5 {
            opt.step(&mut ps, &empty).unwrap();
        }
        assert_eq!(ps.value(ParamId(0)).data()[0].to_bits(), 1.0f64.to_bits());
        assert_eq!(opt.moments[0].steps, 0);
    }

    #[test]
    fn missing_gradient_for_trainable_is_error() {
        let mut ps = scalar_set(1.0);
        let mut opt = OptimizerState::new(&ps, cfg(0.1, 0.0), Schedule::Constant);
        assert!(opt.step(&mut ps, &Gradients::default()).is_err());
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let ps = scalar_set(1.0);
        let mut opt = OptimizerState::new(&ps, cfg(1.0, 0.0), Schedule::LinearDecay { total_steps: 4 });
        let mut rates = Vec::new();
        let mut ps = ps;
        for _ in 0..4 {
            rates.push(opt.current_lr());
            let g = grads_for(&ps, 1.0);
            opt.step(&mut ps, &g).unwrap();
        }
        assert_eq!(rates, vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(opt.current_lr(), 0.0);
    }
}
