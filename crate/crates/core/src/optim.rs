//! Parameter binding and the Adam optimizer.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Matrix;

/// Records which graph leaves correspond to which named, trainable tensors.
#[derive(Default)]
pub struct Binder {
    tracked: Vec<(String, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `m` to the graph; trainable tensors become tracked leaves and are
    /// remembered under `name`.
    pub fn bind(&mut self, g: &mut Graph, name: &str, m: &Matrix, trainable: bool) -> Var {
        if trainable {
            let v = g.param(m.clone());
            self.tracked.push((name.to_string(), v));
            v
        } else {
            g.constant(m.clone())
        }
    }

    pub fn tracked(&self) -> &[(String, Var)] {
        &self.tracked
    }

    /// Gradients keyed by tensor name. Tracked tensors that did not reach the
    /// loss get a zero gradient of the right shape.
    pub fn collect(&self, g: &Graph, grads: &mut Gradients) -> BTreeMap<String, Matrix> {
        self.tracked
            .iter()
            .map(|(name, v)| {
                let grad = grads.take(*v).unwrap_or_else(|| {
                    let (r, c) = g.value(*v).shape();
                    Matrix::zeros(r, c)
                });
                (name.clone(), grad)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by tensor name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor of `params` that has a gradient.
    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            assert_eq!(g.shape(), w.shape(), "gradient shape for {name}");
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(w.rows(), w.cols()), Matrix::zeros(w.rows(), w.cols())));
            for (((wi, gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Matrix);

    impl ParamSet for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = One(Matrix::row_vector(&[1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Matrix::row_vector(&[0.5, -2.0]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &grads, 0.1);
        assert!((p.0.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.0.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = One(Matrix::row_vector(&[3.0, -4.0]));
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), p.0.scale(2.0));
            opt.step(&mut p, &grads, 0.05);
        }
        assert!(p.0.max_abs() < 1e-2, "{:?}", p.0);
    }

    #[test]
    fn missing_gradient_leaves_tensor_alone() {
        let mut p = One(Matrix::row_vector(&[1.0]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &BTreeMap::new(), 0.1);
        assert_eq!(p.0.data(), &[1.0]);
    }
}
