//! Per-dimension standardisation of frame matrices.

use dyadmotion_core::{Error, Result, Scalar};
use dyadmotion_nn::ParamStore;
use ndarray::{Array2, ArrayView2, Axis};

#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer<T> {
    pub mean: Array2<T>,
    pub std: Array2<T>,
}

impl<T: Scalar> Normalizer<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array2::zeros((1, dim)),
            std: Array2::ones((1, dim)),
        }
    }

    /// Fits mean and standard deviation over all rows of all parts; deviations below `floor` are
    /// raised to it.
    pub fn fit(parts: &[ArrayView2<'_, T>], floor: f64) -> Result<Self> {
        let dim = parts.first().map(|p| p.ncols()).ok_or_else(|| Error::invalid("cannot fit a normalizer on no data"))?;
        let mut n = 0usize;
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        for p in parts {
            if p.ncols() != dim {
                return Err(Error::shape("normalizer inputs differ in width"));
            }
            for row in p.rows() {
                for (j, v) in row.iter().enumerate() {
                    let v = v.as_f64();
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit a normalizer on no rows"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(floor))
            .collect();
        Ok(Self {
            mean: Array2::from_shape_fn((1, dim), |(_, j)| T::lit(mean[j])),
            std: Array2::from_shape_fn((1, dim), |(_, j)| T::lit(std[j])),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        (&x - &self.mean) / &self.std
    }

    pub fn invert(&self, z: ArrayView2<'_, T>) -> Array2<T> {
        &z * &self.std + &self.mean
    }

    pub fn register(&self, store: &mut ParamStore<T>, name: &str) {
        store.add(format!("{name}.mean"), self.mean.clone());
        store.add(format!("{name}.std"), self.std.clone());
    }

    /// Reads back a normalizer registered under `name`.
    pub fn from_store(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let get = |suffix: &str| {
            store
                .find(&format!("{name}.{suffix}"))
                .map(|id| store.value(id).clone())
                .ok_or_else(|| Error::invalid(format!("missing normalizer {name}.{suffix}")))
        };
        Ok(Self {
            mean: get("mean")?,
            std: get("std")?,
        })
    }
}

/// Stacks rows of several matrices.
pub(crate) fn stack_rows<T: Scalar>(parts: &[ArrayView2<'_, T>]) -> Array2<T> {
    ndarray::concatenate(Axis(0), parts).expect("equal widths")
}
