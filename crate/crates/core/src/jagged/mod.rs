//! Variable-length batches stored as flat values plus row offsets.
//!
//! A [`JaggedTensor`] holds `B` rows; row `i` owns the stored items
//! `offsets[i]..offsets[i + 1]`, and every stored item is `dim` scalars wide.
//! Zero-length rows are legal and cost nothing.

mod attention;

pub use attention::{
    compute_rab, jagged_attention, AttentionConfig, AttentionStats, RabSpec, RelativeBias,
};

use std::fmt::Debug;

use ndarray::Array3;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Floating-point element type used by the numeric kernels.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JaggedTensor<T> {
    values: Vec<T>,
    offsets: Vec<usize>,
    dim: usize,
}

/// Prefix sums of `lengths`, starting at 0.
pub fn offsets_from_lengths(lengths: &[i64]) -> Result<Vec<usize>> {
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    offsets.push(0usize);
    let mut acc = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        ensure!(len >= 0, Validation, "length {len} at row {i} is negative");
        acc += len as usize;
        offsets.push(acc);
    }
    Ok(offsets)
}

pub(crate) fn offsets_from_counts(lengths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    offsets.push(0);
    let mut acc = 0;
    for &len in lengths {
        acc += len;
        offsets.push(acc);
    }
    offsets
}

impl<T: Copy> JaggedTensor<T> {
    pub fn new(values: Vec<T>, offsets: Vec<usize>, dim: usize) -> Result<Self> {
        ensure!(dim >= 1, Validation, "dim must be at least 1");
        ensure!(!offsets.is_empty(), Validation, "offsets must hold B + 1 entries");
        ensure!(offsets[0] == 0, Validation, "offsets[0] must be 0, got {}", offsets[0]);
        if let Some(i) = offsets.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Validation(format!(
                "offsets decrease at row {i}: {} > {}",
                offsets[i],
                offsets[i + 1]
            )));
        }
        let stored = *offsets.last().unwrap();
        ensure!(
            values.len() == stored * dim,
            Shape,
            "values hold {} scalars but offsets describe {stored} items of width {dim}",
            values.len()
        );
        Ok(Self { values, offsets, dim })
    }

    pub fn from_lengths(values: Vec<T>, lengths: &[usize], dim: usize) -> Result<Self> {
        Self::new(values, offsets_from_counts(lengths), dim)
    }

    /// Builds a tensor from per-row item lists, each item `dim` wide.
    pub fn from_rows(rows: &[Vec<T>], dim: usize) -> Result<Self> {
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                dim > 0 && r.len() % dim == 0,
                Shape,
                "row {i} has {} scalars, not a multiple of dim {dim}",
                r.len()
            );
            lengths.push(r.len() / dim);
        }
        Self::from_lengths(rows.concat(), &lengths, dim)
    }

    /// An all-empty tensor with `num_rows` rows.
    pub fn empty(num_rows: usize, dim: usize) -> Self {
        Self { values: Vec::new(), offsets: vec![0; num_rows + 1], dim: dim.max(1) }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Number of stored items (`offsets[B]`).
    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.offsets[row + 1] - self.offsets[row]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn max_len(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Flat scalars of row `row` (`row_len * dim` of them).
    pub fn row(&self, row: usize) -> &[T] {
        &self.values[self.offsets[row] * self.dim..self.offsets[row + 1] * self.dim]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        let (s, e) = (self.offsets[row] * self.dim, self.offsets[row + 1] * self.dim);
        &mut self.values[s..e]
    }

    /// The `pos`-th item of row `row`.
    pub fn item(&self, row: usize, pos: usize) -> &[T] {
        let start = (self.offsets[row] + pos) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn same_layout<U: Copy>(&self, other: &JaggedTensor<U>) -> bool {
        self.offsets == other.offsets && self.dim == other.dim
    }

    pub fn into_parts(self) -> (Vec<T>, Vec<usize>, usize) {
        (self.values, self.offsets, self.dim)
    }
}

impl<T: Copy + Serialize> JaggedTensor<T> {
    /// Debug dump (`{"dim":..,"offsets":[..],"values":[..]}`) for goldens.
    pub fn to_debug_json(&self) -> String {
        serde_json::to_string(self).expect("jagged tensor serializes")
    }
}

#[derive(Deserialize)]
struct RawJagged<T> {
    values: Vec<T>,
    offsets: Vec<usize>,
    dim: usize,
}

impl<T: Copy + for<'de> Deserialize<'de>> JaggedTensor<T> {
    pub fn from_debug_json(text: &str) -> Result<Self> {
        let raw: RawJagged<T> = serde_json::from_str(text)?;
        Self::new(raw.values, raw.offsets, raw.dim)
    }
}

/// Drops the padded tail of every row of a `B x Lmax x D` array.
pub fn dense_to_jagged<T: Copy>(dense: &Array3<T>, lengths: &[usize]) -> Result<JaggedTensor<T>> {
    let (b, lmax, d) = dense.dim();
    ensure!(lengths.len() == b, Shape, "{} lengths for a batch of {b}", lengths.len());
    let total: usize = lengths.iter().sum();
    let mut values = Vec::with_capacity(total * d);
    for (i, &len) in lengths.iter().enumerate() {
        ensure!(len <= lmax, Validation, "row {i} has length {len} > Lmax {lmax}");
        for p in 0..len {
            values.extend(dense.slice(ndarray::s![i, p, ..]).iter().copied());
        }
    }
    JaggedTensor::from_lengths(values, lengths, d.max(1))
}

/// Pads every row to `max_len` with `pad_value`.
pub fn jagged_to_dense<T: Copy>(jt: &JaggedTensor<T>, max_len: usize, pad_value: T) -> Result<Array3<T>> {
    let (b, d) = (jt.num_rows(), jt.dim());
    let mut dense = Array3::from_elem((b, max_len, d), pad_value);
    for i in 0..b {
        let len = jt.row_len(i);
        ensure!(len <= max_len, Validation, "row {i} has length {len} > Lmax {max_len}");
        for p in 0..len {
            for (slot, &v) in dense.slice_mut(ndarray::s![i, p, ..]).iter_mut().zip(jt.item(i, p)) {
                *slot = v;
            }
        }
    }
    Ok(dense)
}
