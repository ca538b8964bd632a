//! Padding-free multi-head attention with relative attention bias (RAB).
//!
//! Each row is attended independently over its own `L_i` tokens. The bias for
//! a query/key pair is `rtb[bucket(t_q - t_k)] + rpb[clip(k - q)]`, where time
//! deltas are bucketed on a log2 scale and relative positions are clipped to
//! `[-max_relative_position, max_relative_position]`.

use rayon::prelude::*;

use super::{JaggedTensor, Scalar};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RabSpec<T> {
    pub num_time_buckets: usize,
    pub max_relative_position: usize,
    /// One bias per time bucket.
    pub time_bucket_table: Vec<T>,
    /// `2 * max_relative_position + 1` biases, indexed by `rel + max_relative_position`.
    pub position_table: Vec<T>,
}

impl<T: Scalar> RabSpec<T> {
    pub fn new(time_bucket_table: Vec<T>, position_table: Vec<T>) -> Result<Self> {
        let num_time_buckets = time_bucket_table.len();
        ensure!(num_time_buckets >= 1, Validation, "at least one time bucket is required");
        ensure!(
            position_table.len() % 2 == 1 && position_table.len() >= 3,
            Validation,
            "position table needs 2P+1 entries with P >= 1, got {}",
            position_table.len()
        );
        let max_relative_position = position_table.len() / 2;
        Ok(Self { num_time_buckets, max_relative_position, time_bucket_table, position_table })
    }

    pub fn zeros(num_time_buckets: usize, max_relative_position: usize) -> Self {
        Self {
            num_time_buckets,
            max_relative_position,
            time_bucket_table: vec![T::zero(); num_time_buckets],
            position_table: vec![T::zero(); 2 * max_relative_position + 1],
        }
    }

    /// Bucket 0 holds a zero delta; bucket `1 + floor(log2 |dt|)` holds the
    /// rest, clamped to the last bucket.
    pub fn time_bucket(&self, delta: i64) -> usize {
        let mag = delta.unsigned_abs();
        if mag == 0 {
            return 0;
        }
        let log2 = 63 - mag.leading_zeros() as usize;
        (1 + log2).min(self.num_time_buckets - 1)
    }

    /// Index into `position_table` for key position minus query position.
    pub fn position_index(&self, relative: i64) -> usize {
        let p = self.max_relative_position as i64;
        (relative.clamp(-p, p) + p) as usize
    }

    pub fn bias(&self, t_query: i64, t_key: i64, query: usize, key: usize) -> T {
        self.time_bucket_table[self.time_bucket(t_query - t_key)]
            + self.position_table[self.position_index(key as i64 - query as i64)]
    }
}

/// Per-row `L_i x L_i` bias matrices, row-major, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeBias<T> {
    lengths: Vec<usize>,
    starts: Vec<usize>,
    values: Vec<T>,
}

impl<T: Copy> RelativeBias<T> {
    pub fn from_matrices(matrices: Vec<Vec<T>>, lengths: &[usize]) -> Result<Self> {
        ensure!(matrices.len() == lengths.len(), Shape, "one bias matrix per row is required");
        let mut starts = Vec::with_capacity(lengths.len() + 1);
        starts.push(0);
        for (m, &l) in matrices.iter().zip(lengths) {
            ensure!(m.len() == l * l, Shape, "bias matrix has {} entries, expected {}", m.len(), l * l);
            starts.push(starts.last().unwrap() + l * l);
        }
        Ok(Self { lengths: lengths.to_vec(), starts, values: matrices.concat() })
    }

    pub fn num_rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn matrix(&self, row: usize) -> &[T] {
        &self.values[self.starts[row]..self.starts[row + 1]]
    }
}

/// Builds the RAB matrices for a jagged batch of timestamps (`dim == 1`).
pub fn compute_rab<T: Scalar>(timestamps: &JaggedTensor<i64>, spec: &RabSpec<T>) -> Result<RelativeBias<T>> {
    ensure!(timestamps.dim() == 1, Shape, "timestamps must be scalar per token");
    let mut matrices = Vec::with_capacity(timestamps.num_rows());
    for r in 0..timestamps.num_rows() {
        let ts = timestamps.row(r);
        ensure!(
            ts.windows(2).all(|w| w[0] <= w[1]),
            Validation,
            "timestamps of row {r} are not non-decreasing"
        );
        let l = ts.len();
        let mut m = Vec::with_capacity(l * l);
        for a in 0..l {
            for b in 0..l {
                m.push(spec.bias(ts[a], ts[b], a, b));
            }
        }
        matrices.push(m);
    }
    RelativeBias::from_matrices(matrices, &timestamps.lengths())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Entries of score matrices materialized (one `L_i x L_i` buffer per row).
    pub score_elements: usize,
    /// What a padded `B x Lmax x Lmax` layout would have materialized.
    pub padded_score_elements: usize,
}

/// Scaled dot-product attention per row, with optional RAB added before the
/// softmax. No token ever attends outside its own row.
pub fn jagged_attention<T: Scalar>(
    q: &JaggedTensor<T>,
    k: &JaggedTensor<T>,
    v: &JaggedTensor<T>,
    rab: Option<&RelativeBias<T>>,
    cfg: &AttentionConfig,
) -> Result<(JaggedTensor<T>, AttentionStats)> {
    ensure!(cfg.num_heads >= 1 && cfg.head_dim >= 1, Validation, "heads and head_dim must be positive");
    ensure!(q.same_layout(k) && q.same_layout(v), Shape, "q, k and v must share offsets and width");
    ensure!(q.dim() == cfg.width(), Shape, "row width {} != heads x head_dim {}", q.dim(), cfg.width());
    if let Some(bias) = rab {
        ensure!(bias.lengths() == q.lengths().as_slice(), Shape, "bias matrices do not match row lengths");
    }

    let scale = T::from(cfg.head_dim).unwrap().sqrt().recip();
    let rows: Vec<Vec<T>> = (0..q.num_rows())
        .into_par_iter()
        .map(|r| attend_row(q.row(r), k.row(r), v.row(r), rab.map(|b| b.matrix(r)), cfg, scale))
        .collect();

    let lengths = q.lengths();
    let stats = AttentionStats {
        score_elements: lengths.iter().map(|l| l * l).sum(),
        padded_score_elements: lengths.len() * q.max_len() * q.max_len(),
    };
    let out = JaggedTensor::new(rows.concat(), q.offsets().to_vec(), q.dim())?;
    Ok((out, stats))
}

fn attend_row<T: Scalar>(q: &[T], k: &[T], v: &[T], bias: Option<&[T]>, cfg: &AttentionConfig, scale: T) -> Vec<T> {
    let width = cfg.width();
    let len = q.len() / width;
    let mut out = vec![T::zero(); q.len()];
    // Reused across heads: the only score storage this row ever touches.
    let mut scores = vec![T::zero(); len * len];
    for h in 0..cfg.num_heads {
        let off = h * cfg.head_dim;
        for a in 0..len {
            let qa = &q[a * width + off..a * width + off + cfg.head_dim];
            let keys = if cfg.causal { a + 1 } else { len };
            let row = &mut scores[a * len..a * len + keys];
            let mut max = T::neg_infinity();
            for (b, s) in row.iter_mut().enumerate() {
                let kb = &k[b * width + off..b * width + off + cfg.head_dim];
                let mut dot = T::zero();
                for (&x, &y) in qa.iter().zip(kb) {
                    dot = dot + x * y;
                }
                *s = dot * scale + bias.map_or(T::zero(), |m| m[a * len + b]);
                max = max.max(*s);
            }
            let mut denom = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                denom = denom + *s;
            }
            let oa = &mut out[a * width + off..a * width + off + cfg.head_dim];
            for (b, &p) in row.iter().enumerate() {
                let w = p / denom;
                let vb = &v[b * width + off..b * width + off + cfg.head_dim];
                for (o, &x) in oa.iter_mut().zip(vb) {
                    *o = *o + w * x;
                }
            }
        }
    }
    out
}
