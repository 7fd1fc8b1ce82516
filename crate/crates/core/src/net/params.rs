use std::hash::Hasher;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::factorized::FactorizedParam;

/// Named matrices in a fixed insertion order. Used both for parameters and
/// for their gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    tensors: IndexMap<String, Matrix>,
}

pub type ParamSet = TensorMap;
pub type Gradients = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.tensors.get(name).ok_or_else(|| Error::Key(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Same names and shapes, all zero.
    pub fn zeros_like(&self) -> TensorMap {
        TensorMap {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Factor pair `{layer}.u`, `{layer}.v`, if present.
    pub fn factors(&self, layer: &str) -> Option<FactorizedParam> {
        let u = self.get(&format!("{layer}.u"))?;
        let v = self.get(&format!("{layer}.v"))?;
        FactorizedParam::new(u.clone(), v.clone()).ok()
    }

    /// The layer's weight as a full matrix, composing factors if needed.
    pub fn composed_weight(&self, layer: &str) -> Result<Matrix> {
        if let Some(w) = self.get(&format!("{layer}.w")) {
            return Ok(w.clone());
        }
        self.factors(layer)
            .map(|p| p.compose())
            .ok_or_else(|| Error::Key(format!("{layer} has no weight or factor pair")))
    }

    /// Singular values of the layer's weight, descending. Factored weights
    /// yield `min(r, m, n)` values and skip forming `u · vᵀ`.
    pub fn layer_singular_values(&self, layer: &str) -> Result<Vec<f64>> {
        if let Some(w) = self.get(&format!("{layer}.w")) {
            return crate::linalg::singular_values(w);
        }
        match (self.get(&format!("{layer}.u")), self.get(&format!("{layer}.v"))) {
            (Some(u), Some(v)) => Ok(crate::linalg::svd_factored(u, v)?.sigma),
            _ => Err(Error::Key(format!("{layer} has no weight or factor pair"))),
        }
    }

    /// Layer prefixes owning a weight (`.w`) or factor pair (`.u`/`.v`), in order.
    pub fn weight_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.names() {
            if let Some(prefix) = name
                .strip_suffix(".w")
                .or_else(|| name.strip_suffix(".u"))
            {
                if !out.iter().any(|p| p == prefix) {
                    out.push(prefix.to_string());
                }
            }
        }
        out
    }

    /// Replaces every `.u`/`.v` pair with the composed `.w`, keeping order.
    pub fn composed(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (name, m) in self.iter() {
            if let Some(prefix) = name.strip_suffix(".u") {
                let p = self
                    .factors(prefix)
                    .ok_or_else(|| Error::Key(format!("{prefix}.v (pair of {name})")))?;
                out.insert(format!("{prefix}.w"), p.compose());
            } else if name.ends_with(".v") {
                continue;
            } else {
                out.insert(name, m.clone());
            }
        }
        Ok(out)
    }

    /// Bit-level fingerprint of names and values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::default();
        for (name, m) in self.iter() {
            h.write(name.as_bytes());
            h.write_usize(m.rows());
            h.write_usize(m.cols());
            for v in m.as_slice() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}
