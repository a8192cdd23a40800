//! Named parameter storage.
//!
//! Parameters live in a [`BTreeMap`] so every walk over them (checkpoint
//! serialization, optimizer steps, parameter counting) sees the same
//! deterministic order regardless of creation order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct ParameterStore<S> {
    params: BTreeMap<String, Param<S>>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(seed: u64) -> Self {
        ParameterStore { params: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>) -> Result<()> {
        if data.len() != shape.iter().product::<usize>() {
            return invalid_arg(format!(
                "parameter '{name}': {} values for shape {shape:?}",
                data.len()
            ));
        }
        self.params.insert(name.to_string(), Param { shape, data });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<S>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<S> {
        (0..n).map(|_| S::from_f64c(self.rng.gen_range(-bound..bound))).collect()
    }

    /// Convolution weight + bias, both uniform in +-sqrt(1/fan_in) where
    /// fan_in counts the receptive field of one output channel.
    pub fn init_conv(
        &mut self,
        name: &str,
        co: usize,
        cig: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<()> {
        let bound = 1.0 / ((cig * kernel) as f64).sqrt();
        let w = self.uniform(co * cig * kernel, bound);
        self.insert(&format!("{name}.weight"), vec![co, cig, kernel], w)?;
        if bias {
            let b = self.uniform(co, bound);
            self.insert(&format!("{name}.bias"), vec![co], b)?;
        }
        Ok(())
    }

    /// Affine norm parameters: gamma = 1, beta = 0.
    pub fn init_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        self.insert(&format!("{name}.gamma"), vec![channels], vec![S::one(); channels])?;
        self.insert(&format!("{name}.beta"), vec![channels], vec![S::zero(); channels])
    }

    /// Scalar negative-side slope, initialized to 0.25.
    pub fn init_prelu(&mut self, name: &str) -> Result<()> {
        self.insert(&format!("{name}.alpha"), vec![1], vec![S::from_f64c(0.25)])
    }

    /// Parameters whose full name starts with `prefix`, with scalar totals.
    pub fn count_by_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    /// Convert every parameter to another scalar type through f64.
    pub fn convert<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore { params: BTreeMap::new(), rng: self.rng.clone() };
        for (k, p) in &self.params {
            out.params.insert(
                k.clone(),
                Param {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| T::from_f64c(v.to_f64c())).collect(),
                },
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_init_respects_fan_in_bound() {
        let mut s: ParameterStore<f64> = ParameterStore::new(42);
        s.init_conv("layer", 8, 4, 3, true).unwrap();
        let bound = 1.0 / (12.0f64).sqrt();
        let w = s.get("layer.weight").unwrap();
        assert_eq!(w.shape, vec![8, 4, 3]);
        assert!(w.data.iter().all(|v| v.abs() < bound));
        let b = s.get("layer.bias").unwrap();
        assert_eq!(b.shape, vec![8]);
        assert!(b.data.iter().all(|v| v.abs() < bound));
        // Not degenerate: values actually spread out.
        let spread = w.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(spread > bound * 0.5);
    }

    #[test]
    fn same_seed_same_values() {
        let mut a: ParameterStore<f64> = ParameterStore::new(7);
        let mut b: ParameterStore<f64> = ParameterStore::new(7);
        let mut c: ParameterStore<f64> = ParameterStore::new(8);
        for s in [&mut a, &mut b, &mut c] {
            s.init_conv("x", 4, 2, 3, true).unwrap();
        }
        assert_eq!(a.get("x.weight").unwrap().data, b.get("x.weight").unwrap().data);
        assert_ne!(a.get("x.weight").unwrap().data, c.get("x.weight").unwrap().data);
    }

    #[test]
    fn norm_and_prelu_defaults() {
        let mut s: ParameterStore<f32> = ParameterStore::new(0);
        s.init_norm("n", 5).unwrap();
        s.init_prelu("p").unwrap();
        assert_eq!(s.get("n.gamma").unwrap().data, vec![1.0; 5]);
        assert_eq!(s.get("n.beta").unwrap().data, vec![0.0; 5]);
        assert_eq!(s.get("p.alpha").unwrap().data, vec![0.25]);
    }

    #[test]
    fn prefix_counting() {
        let mut s: ParameterStore<f32> = ParameterStore::new(0);
        s.init_conv("enc.band0.conv", 4, 1, 1, true).unwrap();
        s.init_conv("enc.band1.conv", 4, 2, 1, true).unwrap();
        s.init_conv("dec.conv", 3, 3, 1, false).unwrap();
        assert_eq!(s.count_by_prefix("enc."), (4 + 4) + (8 + 4));
        assert_eq!(s.count_by_prefix("dec."), 9);
        assert_eq!(s.count_by_prefix(""), s.num_scalars());
    }

    #[test]
    fn convert_preserves_f32_values_exactly() {
        let mut s: ParameterStore<f32> = ParameterStore::new(3);
        s.init_conv("c", 3, 2, 5, true).unwrap();
        let up: ParameterStore<f64> = s.convert();
        let back: ParameterStore<f32> = up.convert();
        assert_eq!(s.get("c.weight").unwrap().data, back.get("c.weight").unwrap().data);
    }
}
