use std::collections::HashMap;

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(value);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Trainable parameters together with their Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: ParamSet<T>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    pub adam: AdamConfig,
}

impl<T: Float> ParamStore<T> {
    pub fn new(params: ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        ParamStore {
            first: zeros(&params),
            second: zeros(&params),
            params,
            step: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Elements held in Adam moments, two per trainable element.
    pub fn moment_numel(&self) -> usize {
        self.first.iter().chain(&self.second).map(Tensor::numel).sum()
    }

    /// One bias-corrected Adam update. Gradients are validated before any
    /// state changes, so a rejected step leaves the store untouched.
    pub fn adam_step(&mut self, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (i, (g, p)) in grads.iter().zip(self.params.tensors()).enumerate() {
            g.same_shape(p, "gradient")?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    self.params.names()[i]
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (lr_t, eps_t) = (T::lit(lr), T::lit(eps));
        let (c1, c2) = (T::lit(c1), T::lit(c2));
        for (i, g) in grads.iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = self.params.tensors_mut()[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr_t * mh / (vh.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f32) -> ParamStore<f32> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(w)).unwrap();
        ParamStore::new(p)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        s.adam_step(&[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(s.params.tensors()[0].data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; corrected m = 1, v = 1; step = 0.1 / (1 + 1e-8).
        let expected = -0.1 / (1.0 + 1e-8);
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(0.0f64)).unwrap();
        let mut s64 = ParamStore::new(p);
        s64.adam_step(&[Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((s64.params.tensors()[0].data()[0] - expected).abs() < 1e-12);
        let mut s = scalar_store(0.0);
        s.adam_step(&[Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((s.params.tensors()[0].data()[0] as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn identical_steps_identical_results() {
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        for g in [0.5, -1.0, 2.0] {
            a.adam_step(&[Tensor::scalar(g)], 0.01).unwrap();
            b.adam_step(&[Tensor::scalar(g)], 0.01).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_rejected_without_mutation() {
        let mut s = scalar_store(0.3);
        let before = s.clone();
        assert!(matches!(
            s.adam_step(&[Tensor::scalar(f32::NAN)], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s, before);
        assert!(s.adam_step(&[Tensor::zeros(&[2])], 0.1).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.push("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.push("a", Tensor::scalar(2.0)).is_err());
        assert_eq!(p.index_of("a"), Some(0));
    }
}
