//! Synthetic sequence-length and token-count workloads.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Per-sequence length distribution. Draws are clipped to `[1, max_len]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed { len: usize },
    Uniform { min: usize, max: usize },
    LogNormal { mu: f64, sigma: f64 },
    /// `P(L = k) ∝ k^-exponent` over `1..=max_len`.
    Zipf { exponent: f64 },
}

impl LengthDist {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        ensure!(max_len >= 1, Config, "max_len must be at least 1");
        match *self {
            LengthDist::Fixed { len } => ensure!((1..=max_len).contains(&len), Config, "fixed length {len} outside 1..={max_len}"),
            LengthDist::Uniform { min, max } => {
                ensure!(1 <= min && min <= max && max <= max_len, Config, "uniform range {min}..={max} outside 1..={max_len}")
            }
            LengthDist::LogNormal { mu, sigma } => {
                ensure!(mu.is_finite() && sigma > 0.0 && sigma.is_finite(), Config, "log-normal needs finite mu and sigma > 0")
            }
            LengthDist::Zipf { exponent } => ensure!(exponent > 0.0 && exponent.is_finite(), Config, "Zipf exponent must be positive"),
        }
        Ok(())
    }

    pub fn sample(&self, n: usize, max_len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        self.validate(max_len)?;
        let clip = |x: f64| (x.round() as usize).clamp(1, max_len);
        Ok(match *self {
            LengthDist::Fixed { len } => vec![len; n],
            LengthDist::Uniform { min, max } => (0..n).map(|_| rng.random_range(min..=max)).collect(),
            LengthDist::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).expect("validated");
                (0..n).map(|_| clip(d.sample(rng))).collect()
            }
            LengthDist::Zipf { exponent } => {
                let d = Zipf::new(max_len as f64, exponent).expect("validated");
                (0..n).map(|_| d.sample(rng) as usize).collect()
            }
        })
    }
}

/// Padding and length statistics of a `B x max_len` batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadStats {
    pub num_sequences: usize,
    pub max_len: usize,
    pub valid_tokens: usize,
    pub padded_slots: usize,
    pub pad_tokens: usize,
    pub padding_ratio: f64,
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
    pub longest: usize,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[usize], q: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn workload_stats(lengths: &[usize], max_len: usize) -> Result<WorkloadStats> {
    ensure!(lengths.iter().all(|&l| l <= max_len), Validation, "a length exceeds max_len {max_len}");
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let valid: usize = lengths.iter().sum();
    let slots = lengths.len() * max_len;
    Ok(WorkloadStats {
        num_sequences: lengths.len(),
        max_len,
        valid_tokens: valid,
        padded_slots: slots,
        pad_tokens: slots - valid,
        padding_ratio: if slots == 0 { 0.0 } else { (slots - valid) as f64 / slots as f64 },
        p50: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
        p99: percentile(&sorted, 0.99),
        longest: sorted.last().copied().unwrap_or(0),
    })
}

/// Long-tailed lengths in `[1, max_len]` summing to exactly `total`.
/// Log-normal draws are nudged one token at a time, round-robin, until the
/// sum matches.
pub fn batch_with_total(n: usize, max_len: usize, total: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(n >= 1 && max_len >= 1, Validation, "need at least one sequence and max_len >= 1");
    ensure!((n..=n * max_len).contains(&total), Validation, "{total} tokens do not fit {n} sequences of 1..={max_len}");
    let mean = total as f64 / n as f64;
    let sigma = 0.8f64;
    let dist = LengthDist::LogNormal { mu: mean.ln() - sigma * sigma / 2.0, sigma };
    let mut lengths = dist.sample(n, max_len, &mut crate::rng::stream(seed, &[0xba7c4]))?;
    let mut sum: usize = lengths.iter().sum();
    let mut i = 0;
    while sum != total {
        let l = &mut lengths[i % n];
        if sum < total && *l < max_len {
            *l += 1;
            sum += 1;
        } else if sum > total && *l > 1 {
            *l -= 1;
            sum -= 1;
        }
        i += 1;
    }
    Ok(lengths)
}

/// Batch with the padded layout of a production-scale batch: 520 sequences,
/// `max_len = 2048`, 527,941 valid tokens in 1,064,960 slots.
pub const REFERENCE_BATCH: usize = 520;
pub const REFERENCE_MAX_LEN: usize = 2048;
pub const REFERENCE_VALID: usize = 527_941;

pub fn reference_batch() -> Vec<usize> {
    batch_with_total(REFERENCE_BATCH, REFERENCE_MAX_LEN, REFERENCE_VALID, 2).expect("constants are consistent")
}

/// Maximum-likelihood exponent of a bounded Zipf law on `1..=n`.
///
/// The score `Σ_k k^-s ln k / H(n, s) − mean(ln x)` is increasing in `s`, so
/// bisection on `[1e-4, 50]` finds the root.
pub fn fit_zipf_exponent(samples: &[u64], n: u64) -> Result<f64> {
    ensure!(!samples.is_empty(), Validation, "no samples to fit");
    ensure!(n >= 2 && samples.iter().all(|&x| (1..=n).contains(&x)), Validation, "samples must lie in 1..={n}");
    let mean_log = samples.iter().map(|&x| (x as f64).ln()).sum::<f64>() / samples.len() as f64;
    let score = |s: f64| {
        let (mut h, mut hl) = (0.0, 0.0);
        for k in 1..=n {
            let w = (k as f64).powf(-s);
            h += w;
            hl += w * (k as f64).ln();
        }
        hl / h - mean_log
    };
    let (mut lo, mut hi) = (1e-4, 50.0);
    ensure!(score(lo) > 0.0 && score(hi) < 0.0, Numerical, "Zipf MLE has no root in [{lo}, {hi}]");
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Token counts `Zipf(n, exponent)` for a global batch.
pub fn zipf_token_counts(count: usize, n: u64, exponent: f64, seed: u64) -> Result<Vec<u64>> {
    ensure!(n >= 1 && exponent > 0.0, Validation, "Zipf needs n >= 1 and a positive exponent");
    let d = Zipf::new(n as f64, exponent).expect("validated");
    let mut rng = crate::rng::stream(seed, &[0x2f]);
    Ok((0..count).map(|_| d.sample(&mut rng) as u64).collect())
}
