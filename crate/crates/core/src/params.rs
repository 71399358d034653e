//! Named trainable tensors with per-name learning-rate scales.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub lr_scale: f64,
}

/// Ordered name → parameter map. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_scaled(name, value, 1.0)
    }

    pub fn insert_scaled(&mut self, name: &str, value: Tensor, lr_scale: f64) -> Result<()> {
        if !(lr_scale > 0.0 && lr_scale.is_finite()) {
            return Err(Error::usage(format!("lr_scale for {name} must be positive")));
        }
        if self.entries.contains_key(name) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), Param { value, lr_scale });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))?;
        p.value.expect_same_shape(&value)?;
        p.value = value;
        Ok(())
    }

    pub fn lr_scale(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|p| p.lr_scale)
    }

    pub(crate) fn set_lr_scale(&mut self, name: &str, s: f64) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))?;
        p.lr_scale = s;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Sub-store of the entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insertion_order_and_duplicates() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::ones(&[1])).unwrap();
        s.insert("a", Tensor::ones(&[2])).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "a"]);
        assert!(matches!(s.insert("a", Tensor::ones(&[1])), Err(Error::Usage(_))));
        assert_eq!(s.numel(), 3);
    }

    #[test]
    fn he_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = he_uniform(&[3, 3, 4, 8], 36, &mut rng);
        let b = (6.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }
}
