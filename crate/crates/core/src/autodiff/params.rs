use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named tensors making up one agent's parameters, in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        if let Some(i) = self.index_of(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    /// Inserts a `rows × cols` tensor drawn from `N(0, scale² / rows)`.
    pub fn insert_random<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> usize {
        let std = if rows > 0 { scale / (rows as f64).sqrt() } else { 0.0 };
        let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(rows, cols, data).expect("shape matches"))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter sets differ in layout".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors.iter_mut().flat_map(|t| t.data_mut().iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insertion_order_is_stable() {
        let mut p = ParameterSet::new();
        p.insert("b", Tensor::zeros(1, 2));
        p.insert("a", Tensor::zeros(2, 2));
        p.insert("b", Tensor::row(vec![1.0, 2.0]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.get("b").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(p.num_values(), 6);
    }

    #[test]
    fn add_scaled_checks_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        p.insert_random("w", 3, 2, 1.0, &mut rng);
        let mut q = p.zeros_like();
        q.add_scaled(&p, 2.0).unwrap();
        assert_eq!(q.values().collect::<Vec<_>>(), p.values().map(|x| 2.0 * x).collect::<Vec<_>>());
        let mut other = ParameterSet::new();
        other.insert("w", Tensor::zeros(2, 3));
        assert!(q.add_scaled(&other, 1.0).is_err());
    }
}
