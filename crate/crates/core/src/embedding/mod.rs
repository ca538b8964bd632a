//! Multi-table embedding storage and padding-free lookup.
//!
//! IDs arrive as a [`KeyedJaggedTensor`]: one jagged ID list per table per
//! sample, flattened key-major. Lookups only ever touch stored IDs; the padded
//! variant exists as the baseline it is compared against.

mod checkpoint;
mod lookup;
mod partition;

pub use checkpoint::{read_table, write_table, TableElement};
pub use lookup::{
    access_histogram, backward_accumulate, lookup_fp16, lookup_jagged, lookup_padded, Fp16Lookup, IndexStats,
    Lookup,
};
pub use partition::{build_core_partition, lookup_grouped, CorePartitionPlan, GroupedWork};

use std::ops::Range;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::jagged::{offsets_from_counts, JaggedTensor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    /// Weights are kept at values exactly representable in IEEE half.
    Half,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub name: String,
    rows: usize,
    dim: usize,
    weights: Vec<T>,
    optimizer_state: Vec<T>,
    pub precision: Precision,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn zeros(name: impl Into<String>, rows: usize, dim: usize) -> Self {
        Self::from_weights(name, rows, dim, vec![T::zero(); rows * dim]).expect("sized buffer")
    }

    pub fn from_weights(name: impl Into<String>, rows: usize, dim: usize, weights: Vec<T>) -> Result<Self> {
        let name = name.into();
        ensure!(dim >= 1, Validation, "table `{name}` needs dim >= 1");
        ensure!(
            weights.len() == rows * dim,
            Shape,
            "table `{name}`: {} weights for {rows} x {dim}",
            weights.len()
        );
        ensure!(weights.iter().all(|w| w.is_finite()), Numerical, "table `{name}` has non-finite weights");
        Ok(Self { name, rows, dim, optimizer_state: vec![T::zero(); weights.len()], weights, precision: Precision::Full })
    }

    /// Uniform weights in `[-scale, scale)`.
    pub fn random(name: impl Into<String>, rows: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let weights = (0..rows * dim).map(|_| T::from(rng.random_range(-scale..scale)).unwrap()).collect();
        Self::from_weights(name, rows, dim, weights).expect("sized buffer")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn optimizer_state(&self) -> &[T] {
        &self.optimizer_state
    }

    pub fn row(&self, id: u64) -> &[T] {
        let s = id as usize * self.dim;
        &self.weights[s..s + self.dim]
    }

    pub fn row_mut(&mut self, id: u64) -> &mut [T] {
        let s = id as usize * self.dim;
        &mut self.weights[s..s + self.dim]
    }

    /// Mutable weight row and accumulator row, for optimizer steps.
    pub fn row_and_state_mut(&mut self, id: u64) -> (&mut [T], &mut [T]) {
        let s = id as usize * self.dim;
        (&mut self.weights[s..s + self.dim], &mut self.optimizer_state[s..s + self.dim])
    }

    pub(crate) fn check_id(&self, id: u64) -> Result<()> {
        if (id as usize) < self.rows {
            Ok(())
        } else {
            Err(Error::IdOutOfRange { table: self.name.clone(), id, rows: self.rows })
        }
    }
}

impl EmbeddingTable<f32> {
    /// Rounds every weight to the nearest half-precision value.
    pub fn quantize_to_half(&mut self) {
        for w in &mut self.weights {
            *w = half::f16::from_f32(*w).to_f32();
        }
        self.precision = Precision::Half;
    }
}

/// Per-table jagged ID batches, key-major and sample-minor.
///
/// `offsets` are the explicit jagged indices: segment `k * B + b` (table `k`,
/// sample `b`) spans `values[offsets[k * B + b]..offsets[k * B + b + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedJaggedTensor {
    keys: Vec<String>,
    batch_size: usize,
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<u64>,
}

impl KeyedJaggedTensor {
    pub fn new(keys: Vec<String>, batch_size: usize, lengths: Vec<usize>, values: Vec<u64>) -> Result<Self> {
        ensure!(
            lengths.len() == keys.len() * batch_size,
            Shape,
            "{} lengths for {} keys x {batch_size} samples",
            lengths.len(),
            keys.len()
        );
        let offsets = offsets_from_counts(&lengths);
        ensure!(
            *offsets.last().unwrap() == values.len(),
            Shape,
            "lengths sum to {} but {} ids were given",
            offsets.last().unwrap(),
            values.len()
        );
        Ok(Self { keys, batch_size, lengths, offsets, values })
    }

    /// Builds from `ids[key][sample] = id list`.
    pub fn from_nested(keys: Vec<String>, ids: &[Vec<Vec<u64>>]) -> Result<Self> {
        ensure!(ids.len() == keys.len(), Shape, "one id list per key is required");
        let batch_size = ids.first().map_or(0, |k| k.len());
        let mut lengths = Vec::new();
        let mut values = Vec::new();
        for per_key in ids {
            ensure!(per_key.len() == batch_size, Shape, "every key needs {batch_size} samples");
            for seg in per_key {
                lengths.push(seg.len());
                values.extend_from_slice(seg);
            }
        }
        Self::new(keys, batch_size, lengths, values)
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn key_index(&self, key: &str) -> Result<usize> {
        self.keys.iter().position(|k| k == key).ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    /// Positions in `values` holding table `key`'s IDs for the whole batch.
    pub fn key_range(&self, key: usize) -> Range<usize> {
        self.offsets[key * self.batch_size]..self.offsets[(key + 1) * self.batch_size]
    }

    pub fn segment(&self, key: usize, sample: usize) -> &[u64] {
        let i = key * self.batch_size + sample;
        &self.values[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Table `key`'s IDs as a jagged tensor with one row per sample.
    pub fn jagged_ids(&self, key: usize) -> JaggedTensor<u64> {
        let range = key * self.batch_size..(key + 1) * self.batch_size + 1;
        let base = self.offsets[range.start];
        let offsets = self.offsets[range].iter().map(|o| o - base).collect();
        JaggedTensor::new(self.values[self.key_range(key)].to_vec(), offsets, 1).expect("consistent kjt")
    }

    /// Maps each key to its table, checking every ID against the table size.
    pub(crate) fn resolve_tables<'t, T: Scalar>(
        &self,
        tables: &'t [EmbeddingTable<T>],
    ) -> Result<Vec<&'t EmbeddingTable<T>>> {
        let mut out = Vec::with_capacity(self.keys.len());
        for (k, key) in self.keys.iter().enumerate() {
            let table = tables.iter().find(|t| &t.name == key).ok_or_else(|| Error::UnknownKey(key.clone()))?;
            for &id in &self.values[self.key_range(k)] {
                table.check_id(id)?;
            }
            out.push(table);
        }
        Ok(out)
    }
}

/// Accumulated gradient rows for the IDs a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient<T> {
    indices: Vec<u64>,
    values: Vec<T>,
    dim: usize,
}

impl<T: Scalar> SparseGradient<T> {
    pub fn new(indices: Vec<u64>, values: Vec<T>, dim: usize) -> Result<Self> {
        ensure!(
            indices.windows(2).all(|w| w[0] < w[1]),
            Validation,
            "sparse gradient indices must be strictly increasing"
        );
        ensure!(values.len() == indices.len() * dim, Shape, "{} values for {} rows of {dim}", values.len(), indices.len());
        Ok(Self { indices, values, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Self { indices: Vec::new(), values: Vec::new(), dim }
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Merges two gradients; shared indices are summed as `self + other`.
    pub fn merge(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut indices = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity((self.nnz() + other.nnz()) * d);
        let (mut i, mut j) = (0, 0);
        while i < self.nnz() || j < other.nnz() {
            let take_left = j == other.nnz() || (i < self.nnz() && self.indices[i] < other.indices[j]);
            let take_right = i == self.nnz() || (j < other.nnz() && other.indices[j] < self.indices[i]);
            if take_left {
                indices.push(self.indices[i]);
                values.extend_from_slice(self.row(i));
                i += 1;
            } else if take_right {
                indices.push(other.indices[j]);
                values.extend_from_slice(other.row(j));
                j += 1;
            } else {
                indices.push(self.indices[i]);
                values.extend(self.row(i).iter().zip(other.row(j)).map(|(&a, &b)| a + b));
                i += 1;
                j += 1;
            }
        }
        Self { indices, values, dim: d }
    }

    /// Dense `rows x dim` materialization (absent rows are zero).
    pub fn to_dense(&self, rows: usize) -> Vec<T> {
        let mut dense = vec![T::zero(); rows * self.dim];
        for (i, &id) in self.indices.iter().enumerate() {
            dense[id as usize * self.dim..(id as usize + 1) * self.dim].copy_from_slice(self.row(i));
        }
        dense
    }
}
