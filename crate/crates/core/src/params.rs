//! Named learnable parameter arrays and their gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of uniquely named parameter arrays. Registration order
/// defines the flattened layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "parameter {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, shape, values });
        Ok(id)
    }

    /// Uniform `±sqrt(6 / fan_in)` initialization.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, values)
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for biases.
    pub fn add_bias(
        &mut self,
        name: impl Into<String>,
        len: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, vec![len], values)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    /// Values of the parameter called `name`.
    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        Ok(self.values_mut(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::invalid(format!(
                "flat vector has {} values, parameter set has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Maps a flat index to `(parameter, element)`.
    pub fn locate(&self, mut flat_index: usize) -> Option<(ParamId, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if flat_index < p.values.len() {
                return Some((ParamId(i), flat_index));
            }
            flat_index -= p.values.len();
        }
        None
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(self.params.iter().map(|p| vec![0.0; p.values.len()]).collect())
    }
}

/// One gradient slot per parameter, aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub(crate) Vec<Vec<f64>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        for (a, g) in self.0[id.0].iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add_zeros("a.w", vec![2, 2]).unwrap();
        assert!(ps.add_zeros("a.w", vec![1]).is_err());
        assert!(ps.add("b", vec![3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn locate_walks_layout() {
        let mut ps = ParamSet::new();
        let a = ps.add_zeros("a", vec![3]).unwrap();
        let b = ps.add_zeros("b", vec![2, 2]).unwrap();
        assert_eq!(ps.locate(2), Some((a, 2)));
        assert_eq!(ps.locate(3), Some((b, 0)));
        assert_eq!(ps.locate(7), None);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(sizes in proptest::collection::vec(1usize..6, 1..5), seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            for (k, n) in sizes.iter().enumerate() {
                ps.add_uniform(format!("p{k}"), vec![*n], 4, &mut rng).unwrap();
            }
            let flat = ps.flatten();
            let mut other = ps.clone();
            other.unflatten(&vec![0.0; flat.len()]).unwrap();
            other.unflatten(&flat).unwrap();
            prop_assert_eq!(other, ps);
        }
    }
}
