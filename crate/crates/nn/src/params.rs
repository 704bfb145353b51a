//! Named parameter tensors, their gradients, and weight files.

use std::path::Path;

use dyadmotion_core::arrayfile::{read_array_file, write_array_file};
use dyadmotion_core::{Error, Result, Scalar};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Array2<T>,
}

/// Ordered collection of named trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let value = Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        self.add(name, value)
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Writes every tensor into one array file (header lists names and shapes).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<Value> = self
            .entries
            .iter()
            .map(|e| json!({"name": e.name, "rows": e.value.nrows(), "cols": e.value.ncols()}))
            .collect();
        let mut header = Map::new();
        header.insert("kind".into(), Value::from("params"));
        header.insert("tensors".into(), Value::from(tensors));
        let payload: Vec<f32> = self.entries.iter().flat_map(|e| e.value.iter().map(|v| v.as_f64() as f32)).collect();
        write_array_file(path, &header, &payload)
    }

    /// Overwrites values from a file written by [`save`](Self::save). Names and shapes must match
    /// this store exactly.
    pub fn load_from(&mut self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument(format!("weights file {}: {reason}", path.display()));
        let (header, payload) = read_array_file(path).map_err(bad)?;
        if header.get("kind").and_then(Value::as_str) != Some("params") {
            return Err(bad("not a parameter file".into()));
        }
        let tensors = header
            .get("tensors")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing tensor list".into()))?;
        if tensors.len() != self.entries.len() {
            return Err(bad(format!("{} tensors, model expects {}", tensors.len(), self.entries.len())));
        }
        let mut offset = 0;
        for (entry, t) in self.entries.iter_mut().zip(tensors) {
            let name = t.get("name").and_then(Value::as_str).unwrap_or("");
            let rows = t.get("rows").and_then(Value::as_u64).unwrap_or(0) as usize;
            let cols = t.get("cols").and_then(Value::as_u64).unwrap_or(0) as usize;
            if name != entry.name || (rows, cols) != entry.value.dim() {
                return Err(bad(format!(
                    "tensor {name} {rows}x{cols} does not match {} {:?}",
                    entry.name,
                    entry.value.dim()
                )));
            }
            let end = offset + rows * cols;
            let chunk = payload.get(offset..end).ok_or_else(|| bad("payload too short".into()))?;
            for (dst, &src) in entry.value.iter_mut().zip(chunk) {
                *dst = T::lit(src as f64);
            }
            offset = end;
        }
        if offset != payload.len() {
            return Err(bad("trailing payload".into()));
        }
        Ok(())
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.entries.iter().map(|e| Array2::zeros(e.value.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Array2<T>) {
        self.grads[id.0] += g;
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::lit(max_norm / norm));
        }
        norm
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = &Array2<T>> {
        self.grads.iter()
    }
}
