use super::archive::{read_archive, write_archive};
use super::{NnError, Real, Result, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.to_string(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Hash of parameter names and shapes (not values).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            h.update([0xffu8]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn same_schema<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn check_schema<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.same_schema(other) {
            Ok(())
        } else {
            Err(NnError::SchemaMismatch(self.fingerprint(), other.fingerprint()))
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Element-wise `self += other * s` over a shared schema.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_schema(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.values_mut().for_each(|t| t.scale(s));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Bitwise equality of every value, stricter than `==` on floats.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.same_schema(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
                })
    }
}

impl ParamStore<f32> {
    /// Writes the store with its fingerprint and caller metadata.
    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "fingerprint": self.fingerprint(), "meta": meta });
        write_archive(path.as_ref(), &meta, self.iter())
    }

    /// Reads a store, rejecting files whose fingerprint differs from
    /// `expected` (when given) or from the tensors actually stored.
    pub fn load(path: impl AsRef<Path>, expected: Option<&str>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let archive = read_archive(path)?;
        let bad = |msg: String| NnError::Archive {
            path: path.to_path_buf(),
            msg,
        };
        let stored = archive
            .meta
            .get("fingerprint")
            .and_then(|f| f.as_str())
            .ok_or_else(|| bad("missing fingerprint".into()))?
            .to_string();
        let store = ParamStore {
            tensors: archive.tensors,
        };
        if store.fingerprint() != stored {
            return Err(bad(format!(
                "header fingerprint {stored} does not match tensors {}",
                store.fingerprint()
            )));
        }
        if let Some(expected) = expected {
            if expected != stored {
                return Err(NnError::SchemaMismatch(expected.to_string(), stored));
            }
        }
        let meta = archive.meta.get("meta").cloned().unwrap_or_default();
        Ok((store, meta))
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
