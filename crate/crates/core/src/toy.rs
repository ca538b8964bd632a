//! Synthetic next-item recall task and a small embedding-bag model.
//!
//! Users prefer one cluster of items and pick inside it by Zipf popularity,
//! with a fraction of uniform noise. The model mean-pools the item
//! embeddings of the recent history, passes the result through a residual
//! two-layer block and scores items by dot product against the same table.
//! Training uses sampled softmax with optional cross-token negative sharing;
//! the sparse table takes AdaGrad steps and the dense block takes Adam steps.
//!
//! Sparse updates are applied either immediately ([`train`] with a sync
//! config) or through a queue that holds each step's update back by `τ`
//! steps ([`train_delayed`]). Dense parameters are always current.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Interaction, InteractionLog};
use crate::embedding::{lookup_fp16, EmbeddingTable, SparseGradient};
use crate::error::{ensure, Result};
use crate::hsp::adagrad_step;
use crate::negsample::{cross_token_logits, plan_sharing, sample_negatives, sampled_softmax_loss, SharePlan};
use crate::semi_async::{Mode, StalenessConfig, StalenessTracker};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub cluster_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    /// Probability that an interaction ignores the user's cluster.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            num_items: 10_000,
            num_users: 2_000,
            cluster_size: 100,
            min_len: 20,
            max_len: 50,
            zipf_exponent: 1.0,
            noise: 0.1,
            seed: 17,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_items >= 2 && self.num_users >= 1, Config, "toy task needs items and users");
        ensure!(
            self.cluster_size >= 1 && self.num_items % self.cluster_size == 0,
            Config,
            "cluster size {} must divide {} items",
            self.cluster_size,
            self.num_items
        );
        ensure!(self.min_len >= 2 && self.min_len <= self.max_len, Config, "sequence lengths must satisfy 2 <= min <= max");
        ensure!(self.zipf_exponent > 0.0, Config, "Zipf exponent must be positive");
        ensure!((0.0..=1.0).contains(&self.noise), Config, "noise must lie in [0, 1]");
        Ok(())
    }
}

/// Per-user training prefix and held-out last item.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub num_items: usize,
    pub train: Vec<Vec<u64>>,
    pub test: Vec<u64>,
}

impl ToyTask {
    /// Builds the interaction log and runs it through grouping and the
    /// leave-one-out split.
    pub fn generate(cfg: &ToyTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let clusters = cfg.num_items / cfg.cluster_size;
        let zipf = Zipf::new(cfg.cluster_size as f64, cfg.zipf_exponent).expect("validated parameters");
        let mut records = Vec::new();
        for u in 0..cfg.num_users {
            let mut rng = crate::rng::stream(cfg.seed, &[u as u64]);
            let home = rng.random_range(0..clusters);
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            for ts in 0..len {
                let item = if rng.random_bool(cfg.noise) {
                    rng.random_range(0..cfg.num_items)
                } else {
                    home * cfg.cluster_size + zipf.sample(&mut rng) as usize - 1
                };
                records.push(Interaction {
                    user_id: u as u64,
                    item_id: item as u64,
                    timestamp: ts as i64,
                    click: true,
                    ..Default::default()
                });
            }
        }
        let split = data::leave_one_out_split(&data::group_sequences(&InteractionLog { records, skipped: 0 }))?;
        Self::from_split(&split, cfg.num_items)
    }

    pub fn from_split(split: &data::Split, num_items: usize) -> Result<Self> {
        let mut task = Self { num_items, train: Vec::new(), test: Vec::new() };
        for (u, seq) in &split.train {
            let test = split.test[u];
            ensure!(
                seq.iter().chain([&test]).all(|&i| (i as usize) < num_items),
                Validation,
                "user {u} references an item outside 0..{num_items}"
            );
            task.train.push(seq.clone());
            task.test.push(test);
        }
        Ok(task)
    }

    pub fn num_users(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Most recent items pooled into the user representation.
    pub history: usize,
    pub batch_size: usize,
    pub num_negatives: usize,
    /// Negative-sharing factor; 1 disables sharing.
    pub share_k: usize,
    pub temperature: f64,
    pub steps: usize,
    pub sparse_lr: f64,
    pub dense_lr: f64,
    /// Decoupled weight decay on the dense block (0 gives plain Adam).
    pub weight_decay: f64,
    pub eps: f64,
    pub init_scale: f64,
    /// Steps between probe checkpoints.
    pub eval_every: usize,
    /// Users scored at checkpoints; the final evaluation uses all users.
    pub eval_users: usize,
    /// Cutoff for HR and NDCG.
    pub k: usize,
    /// Gather negative embeddings in half precision.
    pub fp16_neg: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 32,
            history: 20,
            batch_size: 32,
            num_negatives: 32,
            share_k: 1,
            temperature: 0.5,
            steps: 5_000,
            sparse_lr: 0.05,
            dense_lr: 4e-3,
            weight_decay: 0.0,
            eps: 1e-8,
            init_scale: 0.1,
            eval_every: 500,
            eval_users: 256,
            k: 10,
            fp16_neg: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim >= 1 && self.hidden >= 1 && self.history >= 1, Config, "model sizes must be positive");
        ensure!(self.batch_size >= 1 && self.num_negatives >= 1, Config, "batch size and negatives must be positive");
        ensure!(
            self.share_k >= 1 && (self.share_k == 1 || self.share_k <= self.batch_size),
            Config,
            "share_k must lie in 1..=batch_size"
        );
        ensure!(self.temperature > 0.0, Config, "temperature must be positive");
        ensure!(self.sparse_lr >= 0.0 && self.dense_lr >= 0.0 && self.weight_decay >= 0.0, Config, "rates must be non-negative");
        ensure!(self.eval_every >= 1 && self.k >= 1, Config, "eval_every and k must be positive");
        Ok(())
    }
}

/// Residual block `o = x + W2·relu(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub dim: usize,
    pub hidden: usize,
    /// `hidden x dim`, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `dim x hidden`, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl Dense {
    fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let init = |fan_in: usize, n: usize, rng: &mut dyn rand::RngCore| {
            let s = (1.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<f32>>()
        };
        Self {
            dim,
            hidden,
            w1: init(dim, hidden * dim, rng),
            b1: vec![0.0; hidden],
            // Zero output layer: the block starts as the identity.
            w2: vec![0.0; dim * hidden],
            b2: vec![0.0; dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            hidden: self.hidden,
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    fn params_mut(&mut self) -> [&mut Vec<f32>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn params(&self) -> [&Vec<f32>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Returns `(pre-activation, output)`.
    fn forward(&self, x: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let (d, h) = (self.dim, self.hidden);
        let z: Vec<f32> = (0..h).map(|j| self.b1[j] + dot(&self.w1[j * d..(j + 1) * d], x)).collect();
        let a: Vec<f32> = z.iter().map(|&v| v.max(0.0)).collect();
        let o = (0..d).map(|i| x[i] + self.b2[i] + dot(&self.w2[i * h..(i + 1) * h], &a)).collect();
        (z, o)
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    fn backward(&self, x: &[f32], z: &[f32], d_o: &[f32], grad: &mut Dense) -> Vec<f32> {
        let (d, h) = (self.dim, self.hidden);
        let a: Vec<f32> = z.iter().map(|&v| v.max(0.0)).collect();
        let mut d_a = vec![0.0f32; h];
        axpy(&mut grad.b2, 1.0, d_o);
        for ((g_row, w_row), &g) in grad.w2.chunks_exact_mut(h).zip(self.w2.chunks_exact(h)).zip(d_o) {
            axpy(g_row, g, &a);
            axpy(&mut d_a, g, w_row);
        }
        let mut d_x = d_o.to_vec();
        for (j, (g_row, w_row)) in grad.w1.chunks_exact_mut(d).zip(self.w1.chunks_exact(d)).enumerate() {
            if z[j] <= 0.0 {
                continue;
            }
            grad.b1[j] += d_a[j];
            axpy(g_row, d_a[j], x);
            axpy(&mut d_x, d_a[j], w_row);
        }
        d_x
    }
}

/// Eight interleaved partial sums, combined pairwise.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[f32; 8], &[f32; 8]) = (x.try_into().expect("chunk of 8"), y.try_into().expect("chunk of 8"));
        acc = std::array::from_fn(|k| acc[k] + x[k] * y[k]);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: Dense,
    v: Dense,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;

    fn step(&mut self, p: &mut Dense, g: &Dense, lr: f32, wd: f32, eps: f32) {
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        for (((p, g), m), v) in p.params_mut().into_iter().zip(g.params()).zip(self.m.params_mut()).zip(self.v.params_mut()) {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1 / ((v[i] / c2).sqrt() + eps) + wd * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub items: EmbeddingTable<f32>,
    pub dense: Dense,
}

impl ToyModel {
    pub fn new(num_items: usize, cfg: &ToyConfig, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, &[0x1417]);
        let items = EmbeddingTable::random("items", num_items, cfg.dim, cfg.init_scale, &mut rng);
        let dense = Dense::new(cfg.dim, cfg.hidden, &mut rng);
        Self { items, dense }
    }

    fn pool(&self, history: &[u64]) -> Vec<f32> {
        let mut x = vec![0.0f32; self.dense.dim];
        for &id in history {
            axpy(&mut x, 1.0, self.items.row(id));
        }
        let inv = 1.0 / history.len().max(1) as f32;
        x.iter_mut().for_each(|v| *v *= inv);
        x
    }

    /// User representation for the most recent `window` items of `seq`.
    pub fn user_vector(&self, seq: &[u64], window: usize) -> Vec<f32> {
        self.dense.forward(&self.pool(&seq[seq.len().saturating_sub(window)..])).1
    }
}

/// One training or probe batch: one next-item token per sampled user.
struct Batch {
    histories: Vec<Vec<u64>>,
    targets: Vec<u64>,
    /// `B x R` row-major.
    negatives: Vec<u64>,
    plan: Option<SharePlan>,
}

impl Batch {
    fn draw(task: &ToyTask, cfg: &ToyConfig, seed: u64, tag: u64) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, &[tag, 1]);
        let (mut histories, mut targets) = (Vec::with_capacity(cfg.batch_size), Vec::with_capacity(cfg.batch_size));
        for _ in 0..cfg.batch_size {
            let seq = &task.train[rng.random_range(0..task.num_users())];
            let p = rng.random_range(1..seq.len());
            histories.push(seq[p.saturating_sub(cfg.history)..p].to_vec());
            targets.push(seq[p]);
        }
        let negatives = sample_negatives(&vec![1; cfg.batch_size], cfg.num_negatives, task.num_items as u64, seed, tag)?
            .negative_ids
            .values()
            .to_vec();
        let plan = if cfg.share_k > 1 {
            Some(plan_sharing(cfg.batch_size, cfg.num_negatives, cfg.share_k, seed ^ tag.rotate_left(17))?)
        } else {
            None
        };
        Ok(Self { histories, targets, negatives, plan })
    }

    /// Rows gathered from the table: histories, positives and the sampled
    /// negatives. Shared candidates reuse the sampled rows.
    fn lookups(&self) -> usize {
        self.histories.iter().map(Vec::len).sum::<usize>() + self.targets.len() + self.negatives.len()
    }

    fn touched(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.histories.iter().flatten().chain(&self.targets).chain(&self.negatives).map(|&id| (0, id))
    }
}

/// Gradient rows in first-touch order, with a slot index per table row.
struct SparseRows {
    dim: usize,
    slot: Vec<u32>,
    ids: Vec<u64>,
    values: Vec<f32>,
}

impl SparseRows {
    fn new(rows: usize, dim: usize) -> Self {
        Self { dim, slot: vec![u32::MAX; rows], ids: Vec::new(), values: Vec::new() }
    }

    fn add(&mut self, id: u64, a: f32, v: &[f32]) {
        let d = self.dim;
        let mut s = self.slot[id as usize] as usize;
        if s == u32::MAX as usize {
            s = self.ids.len();
            self.slot[id as usize] = s as u32;
            self.ids.push(id);
            self.values.resize(self.values.len() + d, 0.0);
        }
        axpy(&mut self.values[s * d..(s + 1) * d], a, v);
    }

    #[cfg(test)]
    fn get(&self, id: u64) -> Option<&[f32]> {
        let s = *self.slot.get(id as usize)? as usize;
        (s != u32::MAX as usize).then(|| &self.values[s * self.dim..(s + 1) * self.dim])
    }

    fn to_sparse_gradient(&self) -> SparseGradient<f32> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_unstable_by_key(|&i| self.ids[i]);
        let d = self.dim;
        let indices = order.iter().map(|&i| self.ids[i]).collect();
        let mut values = Vec::with_capacity(self.values.len());
        for &i in &order {
            values.extend_from_slice(&self.values[i * d..(i + 1) * d]);
        }
        SparseGradient::new(indices, values, d).expect("ids are unique")
    }
}

struct Grads {
    loss: f64,
    dense: Dense,
    sparse: SparseRows,
}

impl Grads {
    fn norm_sq(&self) -> f64 {
        let dense: f64 = self.dense.params().iter().flat_map(|p| p.iter()).map(|&g| (g as f64).powi(2)).sum();
        dense + self.sparse.values.iter().map(|&g| (g as f64).powi(2)).sum::<f64>()
    }
}

/// Mean sampled-softmax loss over the batch and its gradients.
fn batch_grads(model: &ToyModel, batch: &Batch, cfg: &ToyConfig) -> Result<Grads> {
    let (d, r, b) = (cfg.dim, cfg.num_negatives, batch.targets.len());
    let neg_emb: Vec<f32> = if cfg.fp16_neg {
        lookup_fp16(&batch.negatives, &model.items)?.values.iter().map(|h| h.to_f32()).collect()
    } else {
        batch.negatives.iter().flat_map(|&id| model.items.row(id).iter().copied()).collect()
    };
    let mut xs = Vec::with_capacity(b);
    let mut zs = Vec::with_capacity(b);
    let mut outputs = Vec::with_capacity(b * d);
    for h in &batch.histories {
        let x = model.pool(h);
        let (z, o) = model.dense.forward(&x);
        outputs.extend_from_slice(&o);
        xs.push(x);
        zs.push(z);
    }
    let cross = match &batch.plan {
        Some(plan) => Some(cross_token_logits(plan, &outputs, &neg_emb, d)?),
        None => None,
    };

    let scale = 1.0 / b as f32;
    let tau = cfg.temperature as f32;
    let mut grads = Grads { loss: 0.0, dense: model.dense.zeros_like(), sparse: SparseRows::new(model.items.rows(), d) };
    for i in 0..b {
        let o = &outputs[i * d..(i + 1) * d];
        let negs = |j: usize| &neg_emb[j * d..(j + 1) * d];
        let target_row = model.items.row(batch.targets[i]).to_vec();
        let pos = dot(o, &target_row);
        let neg: Vec<f32> = (0..r).map(|j| dot(o, negs(i * r + j))).collect();
        // Foreign candidates only; the token's own negatives are scored above.
        let mut aux_src = Vec::new();
        let mut aux = Vec::new();
        if let (Some(plan), Some(cross)) = (&batch.plan, &cross) {
            let w = plan.width();
            for (s, &v) in plan.token(i).iter().zip(&cross[i * w..(i + 1) * w]) {
                if s.token != i {
                    aux_src.push(s.token * r + s.slot);
                    aux.push(v);
                }
            }
        }
        let out = sampled_softmax_loss(pos, &neg, &aux, tau)?;
        grads.loss += out.loss as f64 / b as f64;

        let mut d_o = vec![0.0f32; d];
        axpy(&mut d_o, out.d_pos * scale, &target_row);
        grads.sparse.add(batch.targets[i], out.d_pos * scale, o);
        for (j, &g) in out.d_neg.iter().enumerate() {
            axpy(&mut d_o, g * scale, negs(i * r + j));
            grads.sparse.add(batch.negatives[i * r + j], g * scale, o);
        }
        for (&src, &g) in aux_src.iter().zip(&out.d_aux) {
            axpy(&mut d_o, g * scale, negs(src));
            grads.sparse.add(batch.negatives[src], g * scale, o);
        }
        let d_x = model.dense.backward(&xs[i], &zs[i], &d_o, &mut grads.dense);
        let h = &batch.histories[i];
        let inv = 1.0 / h.len() as f32;
        for &id in h {
            grads.sparse.add(id, inv, &d_x);
        }
    }
    Ok(grads)
}

/// 1-based rank of each user's held-out item among all items. Ties go to
/// the smaller item id.
pub fn rank_test_items(model: &ToyModel, task: &ToyTask, cfg: &ToyConfig, users: usize) -> Vec<Option<usize>> {
    (0..users.min(task.num_users()))
        .into_par_iter()
        .map(|u| {
            let o = model.user_vector(&task.train[u], cfg.history);
            let truth = task.test[u];
            let s_t = dot(&o, model.items.row(truth));
            let better = (0..task.num_items as u64)
                .filter(|&i| {
                    let s = dot(&o, model.items.row(i));
                    s > s_t || (s == s_t && i < truth)
                })
                .count();
            Some(better + 1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    /// Steps completed.
    pub step: usize,
    /// Squared gradient norm on the fixed probe batch.
    pub probe_grad_norm_sq: f64,
    /// Loss on the probe batch.
    pub loss: f64,
    /// HR@K over the first `eval_users` users.
    pub hr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_hr: f64,
    pub final_ndcg: f64,
    /// Embedding rows gathered over the run.
    pub lookups: u64,
    pub reads_checked: usize,
    pub staleness_violations: usize,
    pub model: ToyModel,
}

enum SparseApply {
    Immediate,
    Delayed(usize),
}

/// Trains with sparse updates applied as each step finishes (sync) or held
/// back by `staleness.tau` steps (semi-async).
pub fn train(task: &ToyTask, cfg: &ToyConfig, staleness: &StalenessConfig, seed: u64) -> Result<TrainReport> {
    staleness.validate()?;
    match staleness.mode {
        Mode::Sync => run(task, cfg, SparseApply::Immediate, seed),
        Mode::SemiAsync => run(task, cfg, SparseApply::Delayed(staleness.tau), seed),
    }
}

/// The queued path for any `tau`, including `tau = 0`.
pub fn train_delayed(task: &ToyTask, cfg: &ToyConfig, tau: usize, seed: u64) -> Result<TrainReport> {
    run(task, cfg, SparseApply::Delayed(tau), seed)
}

fn run(task: &ToyTask, cfg: &ToyConfig, apply: SparseApply, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(task.num_users() >= 1, Validation, "toy task has no users");
    ensure!(task.train.iter().all(|s| s.len() >= 2), Validation, "every training prefix needs two items");
    let mut model = ToyModel::new(task.num_items, cfg, seed);
    let mut adam = Adam { m: model.dense.zeros_like(), v: model.dense.zeros_like(), t: 0 };
    let tau = match apply {
        SparseApply::Immediate => 0,
        SparseApply::Delayed(t) => t,
    };
    let mut tracker = StalenessTracker::new(tau);
    let mut queue: VecDeque<(usize, SparseGradient<f32>)> = VecDeque::new();
    let probe = Batch::draw(task, cfg, seed, u64::MAX)?;
    let (slr, dlr, wd, eps) = (cfg.sparse_lr as f32, cfg.dense_lr as f32, cfg.weight_decay as f32, cfg.eps as f32);
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
        final_hr: 0.0,
        final_ndcg: 0.0,
        lookups: 0,
        reads_checked: 0,
        staleness_violations: 0,
        model: model.clone(),
    };

    let apply_sparse = |model: &mut ToyModel, tracker: &mut StalenessTracker, step: usize, g: &SparseGradient<f32>| -> Result<()> {
        adagrad_step(&mut model.items, g, slr, eps)?;
        tracker.record_update(step, g.indices().iter().map(|&id| (0, id)))
    };

    for t in 0..cfg.steps {
        let batch = Batch::draw(task, cfg, seed, t as u64)?;
        tracker.check_read(t, batch.touched());
        report.lookups += batch.lookups() as u64;
        let grads = batch_grads(&model, &batch, cfg)?;
        ensure!(grads.loss.is_finite(), Numerical, "loss became non-finite at step {t}");
        report.losses.push(grads.loss);
        adam.step(&mut model.dense, &grads.dense, dlr, wd, eps);
        let sparse = grads.sparse.to_sparse_gradient();
        match apply {
            SparseApply::Immediate => apply_sparse(&mut model, &mut tracker, t, &sparse)?,
            SparseApply::Delayed(_) => {
                queue.push_back((t, sparse));
                // Step t+1 may read every update up to step t+1-τ-1.
                while queue.front().is_some_and(|(s, _)| s + tau <= t) {
                    let (s, g) = queue.pop_front().expect("front checked");
                    apply_sparse(&mut model, &mut tracker, s, &g)?;
                }
            }
        }
        if (t + 1) % cfg.eval_every == 0 {
            let g = batch_grads(&model, &probe, cfg)?;
            let ranks = rank_test_items(&model, task, cfg, cfg.eval_users);
            report.checkpoints.push(Checkpoint {
                step: t + 1,
                probe_grad_norm_sq: g.norm_sq(),
                loss: g.loss,
                hr: data::metrics_from_ranks(&ranks, cfg.k).0,
            });
        }
    }
    while let Some((s, g)) = queue.pop_front() {
        apply_sparse(&mut model, &mut tracker, s, &g)?;
    }
    let (hr, ndcg) = data::metrics_from_ranks(&rank_test_items(&model, task, cfg, task.num_users()), cfg.k);
    report.final_hr = hr;
    report.final_ndcg = ndcg;
    report.reads_checked = tracker.reads_checked;
    report.staleness_violations = tracker.violations;
    report.model = model;
    Ok(report)
}
