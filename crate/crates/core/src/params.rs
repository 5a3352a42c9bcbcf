//! Named parameter tensors, their declarations and seeded initialization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Buffers are persisted state that is not optimized and not counted as
    /// a parameter.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Fan-in used to scale random initialization of weights.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn initial<S: Scalar>(&self, rng: &mut ChaCha8Rng) -> Tensor<S> {
        match self.kind {
            ParamKind::ConvWeight => Tensor::randn(&self.shape, (2.0 / self.fan_in.max(1) as f64).sqrt(), rng),
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => Tensor::zeros(&self.shape),
            ParamKind::BnGamma | ParamKind::RunningVar => Tensor::full(&self.shape, S::one()),
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar = f32> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Arc<Tensor<S>>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), kinds: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    /// Materializes the declared parameters in declaration order from a
    /// seeded generator.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in specs {
            store.insert(&spec.name, spec.kind, spec.initial(&mut rng))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, t: Tensor<S>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.tensors.push(Arc::new(t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<S>>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = *self.index.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(Arc::make_mut(&mut self.tensors[i]))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.index.get(name).map(|&i| self.kinds[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `(name, kind, tensor)` in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(&self.tensors)
            .map(|((n, &k), t)| (n.as_str(), k, t.as_ref()))
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.iter().filter(|(_, k, _)| !k.is_buffer()).map(|(_, _, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that the store holds exactly the declared tensors.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.len() {
            return Err(Error::Contract(format!(
                "parameter store holds {} tensors but the architecture declares {}",
                self.len(),
                specs.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality of names, kinds and contents.
    pub fn bit_equal(&self, other: &ParamStore<S>) -> bool {
        self.names == other.names
            && self.kinds == other.kinds
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec { name: "a.weight".into(), shape: vec![4, 2, 3, 3], kind: ParamKind::ConvWeight, fan_in: 18 },
            ParamSpec { name: "a.bias".into(), shape: vec![4], kind: ParamKind::Bias, fan_in: 18 },
            ParamSpec { name: "n.gamma".into(), shape: vec![4], kind: ParamKind::BnGamma, fan_in: 0 },
            ParamSpec { name: "n.running_var".into(), shape: vec![4], kind: ParamKind::RunningVar, fan_in: 0 },
        ]
    }

    #[test]
    fn init_is_seeded_and_counts_exclude_buffers() {
        let a = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let b = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let c = ParamStore::<f32>::init(&specs(), 6).unwrap();
        assert!(a.bit_equal(&b));
        assert!(!a.bit_equal(&c));
        assert_eq!(a.num_parameters(), 72 + 4 + 4);
        assert!(a.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("n.running_var").unwrap().data().iter().all(|&v| v == 1.0));
        a.check_against(&specs()).unwrap();
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = specs();
        s.push(s[0].clone());
        assert!(ParamStore::<f32>::init(&s, 0).is_err());
    }
}
