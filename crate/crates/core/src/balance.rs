//! Token-level load balancing for data-parallel workers.
//!
//! Two planners are provided. [`dynamic_batch_scale`] packs consecutive
//! samples under a token budget, so workers see different sample counts and
//! gradients must be combined with [`weighted_grad_aggregate`].
//! [`global_token_reallocate`] runs longest-processing-time-first over the
//! whole global batch. [`fixed_count_assign`] is the baseline both are
//! measured against.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, ensure, Result};
use crate::jagged::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub token_count: u64,
}

impl SampleMeta {
    pub fn new(sample_id: u64, token_count: u64) -> Result<Self> {
        ensure!(token_count >= 1, Validation, "sample {sample_id} has no tokens");
        Ok(Self { sample_id, token_count })
    }
}

/// Builds samples with ids `0..n` from token counts.
pub fn samples_from_counts(counts: &[u64]) -> Result<Vec<SampleMeta>> {
    counts.iter().enumerate().map(|(i, &c)| SampleMeta::new(i as u64, c)).collect()
}

/// Reads `sample_id,token_count` rows. A header row is optional.
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<SampleMeta>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed = (record.get(0).map(str::parse::<u64>), record.get(1).map(str::parse::<u64>));
        match parsed {
            (Some(Ok(id)), Some(Ok(tokens))) => out.push(SampleMeta::new(id, tokens)?),
            _ if i == 0 => continue,
            _ => bail!(Validation, "malformed sample row {}: {:?}", i + 1, record),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkerAssignment {
    /// Sample ids per worker, in assignment order.
    pub samples: Vec<Vec<u64>>,
    /// Token total per worker.
    pub loads: Vec<u64>,
}

impl WorkerAssignment {
    fn empty(num_workers: usize) -> Self {
        Self { samples: vec![Vec::new(); num_workers], loads: vec![0; num_workers] }
    }

    fn push(&mut self, worker: usize, sample: &SampleMeta) {
        self.samples[worker].push(sample.sample_id);
        self.loads[worker] += sample.token_count;
    }

    pub fn num_workers(&self) -> usize {
        self.loads.len()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.samples.iter().map(Vec::len).collect()
    }

    pub fn max_load(&self) -> u64 {
        self.loads.iter().copied().max().unwrap_or(0)
    }

    pub fn min_load(&self) -> u64 {
        self.loads.iter().copied().min().unwrap_or(0)
    }

    /// True when some worker received no samples.
    pub fn has_idle_worker(&self) -> bool {
        self.samples.iter().any(Vec::is_empty)
    }
}

/// Packs the stream into steps. Within a step each worker, in index order,
/// takes consecutive samples until the next one would exceed
/// `token_threshold`. The final step may be partially filled.
pub fn dynamic_batch_scale(
    stream: &[SampleMeta],
    token_threshold: u64,
    num_workers: usize,
) -> Result<Vec<WorkerAssignment>> {
    ensure!(num_workers >= 1, Validation, "need at least one worker");
    if let Some(big) = stream.iter().find(|s| s.token_count > token_threshold) {
        bail!(
            Validation,
            "sample {} has {} tokens, above the threshold {token_threshold}",
            big.sample_id,
            big.token_count
        );
    }
    let mut steps = Vec::new();
    let mut rest = stream;
    while !rest.is_empty() {
        let mut step = WorkerAssignment::empty(num_workers);
        for w in 0..num_workers {
            while let Some((s, tail)) = rest.split_first() {
                if step.loads[w] + s.token_count > token_threshold {
                    break;
                }
                step.push(w, s);
                rest = tail;
            }
        }
        steps.push(step);
    }
    Ok(steps)
}

/// Threshold equal to the mean tokens of `baseline_batch` samples, raised if
/// needed so that every sample fits.
pub fn default_token_threshold(samples: &[SampleMeta], baseline_batch: usize) -> u64 {
    if samples.is_empty() {
        return 1;
    }
    let total: u64 = samples.iter().map(|s| s.token_count).sum();
    let mean_budget = (total as f64 / samples.len() as f64 * baseline_batch as f64).round() as u64;
    let largest = samples.iter().map(|s| s.token_count).max().unwrap_or(1);
    mean_budget.max(largest)
}

/// Returns `Σ nᵢ·gᵢ / Σ nᵢ`, the mean-loss gradient over the union of all
/// workers' samples when each `gᵢ` is a per-worker sample mean.
pub fn weighted_grad_aggregate<T: Scalar>(grads: &[Vec<T>], counts: &[usize]) -> Result<Vec<T>> {
    ensure!(grads.len() == counts.len(), Shape, "{} gradients for {} counts", grads.len(), counts.len());
    ensure!(!grads.is_empty(), Validation, "no gradients to aggregate");
    ensure!(counts.iter().all(|&n| n > 0), Validation, "sample counts must be positive");
    let dim = grads[0].len();
    ensure!(grads.iter().all(|g| g.len() == dim), Shape, "gradient dimensions differ");
    let total = T::from(counts.iter().sum::<usize>()).unwrap();
    let mut out = vec![T::zero(); dim];
    for (g, &n) in grads.iter().zip(counts) {
        let n = T::from(n).unwrap();
        for (o, &x) in out.iter_mut().zip(g) {
            *o = *o + n * x;
        }
    }
    out.iter_mut().for_each(|o| *o = *o / total);
    Ok(out)
}

/// Longest-processing-time-first: samples sorted by token count descending
/// (stable, so equal counts keep arrival order), each placed on the currently
/// least-loaded worker, ties going to the lowest index.
pub fn global_token_reallocate(global_batch: &[SampleMeta], num_workers: usize) -> WorkerAssignment {
    let num_workers = num_workers.max(1);
    let mut order: Vec<&SampleMeta> = global_batch.iter().collect();
    order.sort_by_key(|s| Reverse(s.token_count));
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = (0..num_workers).map(|w| Reverse((0, w))).collect();
    let mut out = WorkerAssignment::empty(num_workers);
    for s in order {
        let Reverse((load, w)) = heap.pop().expect("one entry per worker");
        out.push(w, s);
        heap.push(Reverse((load + s.token_count, w)));
    }
    out
}

/// Fixed-count baseline: sample `i` in arrival order goes to worker
/// `i % num_workers`, giving every worker `B / num_workers` samples.
pub fn fixed_count_assign(global_batch: &[SampleMeta], num_workers: usize) -> WorkerAssignment {
    let num_workers = num_workers.max(1);
    let mut out = WorkerAssignment::empty(num_workers);
    for (i, s) in global_batch.iter().enumerate() {
        out.push(i % num_workers, s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SyncModel {
    /// Per-step time outside the token-proportional part, seconds.
    pub fixed_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImbalanceReport {
    pub max_token_diff: u64,
    pub loads: Vec<u64>,
    /// Seconds the fastest worker waits for the slowest.
    pub imbalance_delay: f64,
    /// Modeled step latency, seconds.
    pub step_latency: f64,
    pub imbalance_ratio: f64,
}

impl ImbalanceReport {
    pub const CSV_HEADER: &'static str = "strategy,max_token_diff,imbalance_delay_ms,step_latency_ms,imbalance_ratio_pct";

    pub fn csv_row(&self, strategy: &str) -> String {
        format!(
            "{strategy},{},{:.3},{:.3},{:.2}",
            self.max_token_diff,
            self.imbalance_delay * 1e3,
            self.step_latency * 1e3,
            self.imbalance_ratio * 100.0
        )
    }

    pub fn markdown_row(&self, strategy: &str) -> String {
        format!(
            "| {strategy} | {} | {:.3} | {:.3} | {:.2} |",
            self.max_token_diff,
            self.imbalance_delay * 1e3,
            self.step_latency * 1e3,
            self.imbalance_ratio * 100.0
        )
    }
}

pub fn imbalance_report(assignment: &WorkerAssignment, per_token_cost: f64, sync: &SyncModel) -> Result<ImbalanceReport> {
    ensure!(per_token_cost > 0.0 && per_token_cost.is_finite(), Validation, "per-token cost must be positive");
    ensure!(sync.fixed_overhead >= 0.0, Validation, "sync overhead must be non-negative");
    let (max, min) = (assignment.max_load(), assignment.min_load());
    let delay = (max - min) as f64 * per_token_cost;
    let latency = max as f64 * per_token_cost + sync.fixed_overhead;
    Ok(ImbalanceReport {
        max_token_diff: max - min,
        loads: assignment.loads.clone(),
        imbalance_delay: delay,
        step_latency: latency,
        imbalance_ratio: if latency > 0.0 { delay / latency } else { 0.0 },
    })
}
