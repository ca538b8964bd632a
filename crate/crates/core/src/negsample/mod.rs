//! Memory-efficient negative sampling.
//!
//! Negatives are drawn only for valid tokens, so the ID tensor is jagged with
//! `R` IDs per token. Logits against host-resident negative embeddings are
//! computed one segment of tokens at a time through two device buffers.
//! Logit sharing widens each token's candidate set with negatives drawn for
//! other tokens of the batch, without extra embedding lookups.

mod loss;
mod offload;
mod share;

pub use loss::{sampled_softmax_loss, write_loss_dump, LossOutput};
pub use offload::{
    monolithic_logits, neg_memory_model, segmented_logits, NegMemory, OffloadStats, SegmentPlan, Transfer,
};
pub use share::{cross_token_logits, plan_sharing, share_logits, SharePlan, Source};

use rand::Rng;

use crate::error::{ensure, Result};
use crate::jagged::JaggedTensor;

/// `R` negative IDs per valid token. Row `b` of `negative_ids` has one item of
/// width `R` per valid position of sequence `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegSampleBatch {
    pub negative_ids: JaggedTensor<u64>,
    pub pool_size: u64,
}

impl NegSampleBatch {
    pub fn r(&self) -> usize {
        self.negative_ids.dim()
    }

    pub fn num_valid(&self) -> usize {
        self.negative_ids.total_len()
    }

    /// Negatives of the `p`-th valid token, counting across rows.
    pub fn token(&self, p: usize) -> &[u64] {
        let r = self.r();
        &self.negative_ids.values()[p * r..(p + 1) * r]
    }
}

/// Uniform draws with replacement from `0..pool_size`, reproducible from
/// `(seed, batch_id)`.
pub fn sample_negatives(valid_lengths: &[usize], r: usize, pool_size: u64, seed: u64, batch_id: u64) -> Result<NegSampleBatch> {
    ensure!(r >= 1, Validation, "need at least one negative per token");
    ensure!(pool_size >= 1, Validation, "item pool is empty");
    let mut rng = crate::rng::stream(seed, &[batch_id]);
    let total: usize = valid_lengths.iter().sum();
    let ids = (0..total * r).map(|_| rng.random_range(0..pool_size)).collect();
    Ok(NegSampleBatch { negative_ids: JaggedTensor::from_lengths(ids, valid_lengths, r)?, pool_size })
}

/// As [`sample_negatives`], but redraws any negative equal to its token's
/// positive. Needs `pool_size >= 2`.
pub fn sample_negatives_excluding(positives: &JaggedTensor<u64>, r: usize, pool_size: u64, seed: u64, batch_id: u64) -> Result<NegSampleBatch> {
    ensure!(positives.dim() == 1, Shape, "positives must be scalar per token");
    ensure!(pool_size >= 2, Validation, "cannot exclude the positive from a pool of {pool_size}");
    ensure!(positives.values().iter().all(|&p| p < pool_size), Validation, "positive id outside the pool");
    let mut batch = sample_negatives(&positives.lengths(), r, pool_size, seed, batch_id)?;
    let mut rng = crate::rng::stream(seed, &[batch_id, 1]);
    let values = batch.negative_ids.values_mut();
    for (p, &pos) in positives.values().iter().enumerate() {
        for id in &mut values[p * r..(p + 1) * r] {
            while *id == pos {
                *id = rng.random_range(0..pool_size);
            }
        }
    }
    Ok(batch)
}

/// Largest change to any logit from rounding negative embeddings to half
/// precision: `R·2⁻¹⁰·‖o‖·max‖n‖/τ`, a deliberately loose triangle bound.
pub fn fp16_logit_error_bound(r: usize, o_norm: f64, max_neg_norm: f64, tau: f64) -> f64 {
    r as f64 * 2f64.powi(-10) * o_norm * max_neg_norm / tau
}
