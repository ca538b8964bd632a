//! Semi-asynchronous sparse/dense training.
//!
//! The dense path stays synchronous while the sparse forward of batch `i + 1`
//! may start before the sparse backward of batch `i` lands. With delay `τ`
//! the forward at step `t` reads embeddings carrying the updates of steps
//! `0..t-τ`. This module holds the schedule DAG, the read-version rule and a
//! shadow store that checks it, the cross-step collision estimate `α`, the
//! delayed-SGD bound and a convergence probe on the toy recall task.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    SemiAsync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessConfig {
    pub tau: usize,
    pub mode: Mode,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self { tau: 1, mode: Mode::SemiAsync }
    }
}

impl StalenessConfig {
    pub fn sync() -> Self {
        Self { tau: 0, mode: Mode::Sync }
    }

    pub fn semi_async(tau: usize) -> Result<Self> {
        let c = Self { tau, mode: Mode::SemiAsync };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((self.tau == 0) == (self.mode == Mode::Sync), Config, "tau must be 0 exactly in sync mode, got {self:?}");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SparseFwd,
    DenseFwd,
    DenseBwd,
    SparseBwd,
}

impl Phase {
    pub const ORDER: [Phase; 4] = [Phase::SparseFwd, Phase::DenseFwd, Phase::DenseBwd, Phase::SparseBwd];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Event {
    pub phase: Phase,
    pub batch: usize,
}

/// Events listed batch by batch in phase order; `edges` are `(before, after)`
/// index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleDag {
    pub events: Vec<Event>,
    pub edges: Vec<(usize, usize)>,
}

impl ScheduleDag {
    pub fn index(&self, phase: Phase, batch: usize) -> usize {
        batch * 4 + Phase::ORDER.iter().position(|&p| p == phase).expect("known phase")
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.events.len()];
        for &(a, b) in &self.edges {
            out[a].push(b);
        }
        out
    }

    /// Whether `to` transitively depends on `from`.
    pub fn has_path(&self, from: usize, to: usize) -> bool {
        let succ = self.successors();
        let mut seen = vec![false; self.events.len()];
        let mut stack = vec![from];
        while let Some(x) = stack.pop() {
            if x == to {
                return true;
            }
            for &y in &succ[x] {
                if !std::mem::replace(&mut seen[y], true) {
                    stack.push(y);
                }
            }
        }
        false
    }

    /// Neither event depends on the other.
    pub fn can_overlap(&self, a: usize, b: usize) -> bool {
        a != b && !self.has_path(a, b) && !self.has_path(b, a)
    }

    /// Kahn's algorithm, smallest index first among ready events.
    pub fn topological_order(&self) -> Vec<usize> {
        let succ = self.successors();
        let mut indeg = vec![0; self.events.len()];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..indeg.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(indeg.len());
        while let Some(x) = ready.pop_first() {
            order.push(x);
            for &y in &succ[x] {
                indeg[y] -= 1;
                if indeg[y] == 0 {
                    ready.insert(y);
                }
            }
        }
        order
    }

    /// Whether every pair of events is ordered, i.e. only one execution order exists.
    pub fn is_total_order(&self) -> bool {
        let order = self.topological_order();
        order.windows(2).all(|w| self.edges.contains(&(w[0], w[1])) || self.has_path(w[0], w[1]))
    }
}

/// Dependency rules: the per-batch chain sparse_fwd → dense_fwd → dense_bwd →
/// sparse_bwd; dense_bwd(i) → dense_fwd(i+1); sparse_fwd(i) → sparse_fwd(i+1);
/// sparse_bwd(i) → sparse_bwd(i+1); and sparse_bwd(i) → sparse_fwd(i+1+τ).
pub fn semi_async_schedule(num_batches: usize, cfg: &StalenessConfig) -> Result<ScheduleDag> {
    cfg.validate()?;
    ensure!(num_batches >= 1, Validation, "need at least one batch");
    let events = (0..num_batches).flat_map(|batch| Phase::ORDER.map(|phase| Event { phase, batch })).collect();
    let mut dag = ScheduleDag { events, edges: Vec::new() };
    let idx = |p, b| b * 4 + Phase::ORDER.iter().position(|&q| q == p).unwrap();
    for i in 0..num_batches {
        dag.edges.push((idx(Phase::SparseFwd, i), idx(Phase::DenseFwd, i)));
        dag.edges.push((idx(Phase::DenseFwd, i), idx(Phase::DenseBwd, i)));
        dag.edges.push((idx(Phase::DenseBwd, i), idx(Phase::SparseBwd, i)));
        if i + 1 < num_batches {
            dag.edges.push((idx(Phase::DenseBwd, i), idx(Phase::DenseFwd, i + 1)));
            dag.edges.push((idx(Phase::SparseFwd, i), idx(Phase::SparseFwd, i + 1)));
            dag.edges.push((idx(Phase::SparseBwd, i), idx(Phase::SparseBwd, i + 1)));
        }
        if i + 1 + cfg.tau < num_batches {
            dag.edges.push((idx(Phase::SparseBwd, i), idx(Phase::SparseFwd, i + 1 + cfg.tau)));
        }
    }
    Ok(dag)
}

/// Number of sparse updates visible to the forward at step `t`: those of
/// steps `0..t-τ`.
pub fn read_version(t: usize, tau: usize) -> usize {
    t.saturating_sub(tau)
}

/// Shadow store that records which step last wrote each row and checks
/// every read against the staleness window.
#[derive(Debug, Clone, Default)]
pub struct StalenessTracker {
    tau: usize,
    /// Sparse updates applied so far, in step order.
    applied: usize,
    last_write: HashMap<(usize, u64), usize>,
    pub reads_checked: usize,
    pub violations: usize,
}

impl StalenessTracker {
    pub fn new(tau: usize) -> Self {
        Self { tau, ..Self::default() }
    }

    pub fn applied(&self) -> usize {
        self.applied
    }

    /// Records the update computed at `step`; updates must land in step order.
    pub fn record_update(&mut self, step: usize, rows: impl IntoIterator<Item = (usize, u64)>) -> Result<()> {
        ensure!(step == self.applied, Validation, "update for step {step} arrived after {} updates", self.applied);
        for r in rows {
            self.last_write.insert(r, step);
        }
        self.applied += 1;
        Ok(())
    }

    /// Checks a read of `rows` by the forward at step `t`: the store must hold
    /// between `t - τ` and `t` updates, and no row may carry a write from a
    /// step the reader should not see.
    pub fn check_read(&mut self, t: usize, rows: impl IntoIterator<Item = (usize, u64)>) -> bool {
        let window_ok = self.applied >= read_version(t, self.tau) && self.applied <= t;
        let mut ok = window_ok;
        for r in rows {
            self.reads_checked += 1;
            if self.last_write.get(&r).is_some_and(|&w| w >= t) {
                ok = false;
            }
        }
        if !ok {
            self.violations += 1;
        }
        ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsityEstimate {
    pub alpha: f64,
    /// Distinct IDs seen across all steps.
    pub n_emb: usize,
}

/// Mean over steps `t ≥ 1` of the fraction of step-`t` IDs that also
/// occurred in the previous `window` steps. Steps without IDs are skipped.
pub fn estimate_alpha(steps: &[Vec<u64>], window: usize) -> Result<SparsityEstimate> {
    ensure!(steps.len() >= 2, Validation, "need at least two steps, got {}", steps.len());
    ensure!(window >= 1, Validation, "window must be at least one step");
    let sets: Vec<HashSet<u64>> = steps.iter().map(|s| s.iter().copied().collect()).collect();
    let mut total = 0.0;
    let mut counted = 0usize;
    for t in 1..sets.len() {
        if sets[t].is_empty() {
            continue;
        }
        let lo = t.saturating_sub(window);
        let hits = sets[t].iter().filter(|id| sets[lo..t].iter().any(|s| s.contains(id))).count();
        total += hits as f64 / sets[t].len() as f64;
        counted += 1;
    }
    let n_emb = sets.iter().flatten().collect::<HashSet<_>>().len();
    Ok(SparsityEstimate { alpha: if counted == 0 { 0.0 } else { total / counted as f64 }, n_emb })
}

/// Expected [`estimate_alpha`] (window 1) when every step draws
/// `draws_per_step` IDs uniformly from `n_emb`: the chance a given ID shows
/// up among the previous step's draws.
pub fn uniform_alpha(n_emb: usize, draws_per_step: usize) -> f64 {
    1.0 - (1.0 - 1.0 / n_emb as f64).powi(draws_per_step as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundParams {
    pub l: f64,
    pub sigma: f64,
    pub t: f64,
    pub alpha: f64,
    pub tau: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self { l: 1.0, sigma: 1.0, t: 1000.0, alpha: 0.0, tau: 1.0, c1: 1.0, c2: 1.0, c3: 1.0 }
    }
}

/// `c1·√L·σ/√T + c2·L/T`, the plain SGD rate.
pub fn sgd_bound(p: &BoundParams) -> Result<f64> {
    check_bound_params(p)?;
    Ok(p.c1 * p.l.sqrt() * p.sigma / p.t.sqrt() + p.c2 * p.l / p.t)
}

/// `c1·√L·σ/√T + c2·L/T + c3·α·L·τ/T`.
pub fn eval_bound(p: &BoundParams) -> Result<f64> {
    Ok(sgd_bound(p)? + p.c3 * p.alpha * p.l * p.tau / p.t)
}

fn check_bound_params(p: &BoundParams) -> Result<()> {
    ensure!(p.t >= 1.0, Validation, "T must be at least 1");
    let all = [p.l, p.sigma, p.alpha, p.tau, p.c1, p.c2, p.c3];
    ensure!(all.iter().all(|x| *x >= 0.0 && x.is_finite()), Validation, "bound parameters must be finite and non-negative");
    ensure!(p.alpha <= 1.0, Validation, "alpha is a probability");
    Ok(())
}

/// Markdown table of `eval_bound` over an `(α, τ, T)` grid.
pub fn bound_table(base: &BoundParams, alphas: &[f64], taus: &[f64], ts: &[f64]) -> Result<String> {
    let mut out = String::from("| alpha | tau | T | bound |\n|---|---|---|---|\n");
    for &alpha in alphas {
        for &tau in taus {
            for &t in ts {
                let b = eval_bound(&BoundParams { alpha, tau, t, ..*base })?;
                out.push_str(&format!("| {alpha} | {tau} | {t} | {b:.6e} |\n"));
            }
        }
    }
    Ok(out)
}

/// Per-checkpoint output of [`convergence_probe`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbePoint {
    pub step: usize,
    /// Running mean of the squared probe-batch gradient norm.
    pub grad_norm_sq_avg: f64,
    pub loss: f64,
    pub hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub points: Vec<ProbePoint>,
    pub final_hr: f64,
    pub final_ndcg: f64,
    pub k: usize,
}

impl ProbeResult {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "grad_norm_sq_avg", "loss", &format!("hr@{}", self.k)])?;
        for p in &self.points {
            w.write_record([p.step.to_string(), p.grad_norm_sq_avg.to_string(), p.loss.to_string(), p.hr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains the toy recall model under `staleness` and samples the squared
/// gradient norm on a held-out probe batch every `cfg.eval_every` steps.
pub fn convergence_probe(
    task: &crate::toy::ToyTask,
    cfg: &crate::toy::ToyConfig,
    staleness: &StalenessConfig,
    seed: u64,
) -> Result<ProbeResult> {
    staleness.validate()?;
    let report = crate::toy::train(task, cfg, staleness, seed)?;
    if let Some(bad) = report.losses.iter().position(|l| !l.is_finite()) {
        bail!(Numerical, "loss became non-finite at step {bad}");
    }
    let mut sum = 0.0;
    let points = report
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            sum += c.probe_grad_norm_sq;
            ProbePoint { step: c.step, grad_norm_sq_avg: sum / (i + 1) as f64, loss: c.loss, hr: c.hr }
        })
        .collect();
    Ok(ProbeResult { points, final_hr: report.final_hr, final_ndcg: report.final_ndcg, k: cfg.k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn semi() -> StalenessConfig {
        StalenessConfig::semi_async(1).unwrap()
    }

    #[test]
    fn config_invariant() {
        assert!(StalenessConfig::semi_async(0).is_err());
        assert!(StalenessConfig { tau: 2, mode: Mode::Sync }.validate().is_err());
        assert!(StalenessConfig::sync().validate().is_ok());
    }

    #[test]
    fn single_batch_is_sequential() {
        for cfg in [StalenessConfig::sync(), semi()] {
            let dag = semi_async_schedule(1, &cfg).unwrap();
            assert_eq!(dag.topological_order(), vec![0, 1, 2, 3]);
            assert!(dag.is_total_order());
        }
    }

    #[test]
    fn sparse_forward_runs_ahead() {
        let dag = semi_async_schedule(2, &semi()).unwrap();
        let fwd1 = dag.index(Phase::SparseFwd, 1);
        assert!(dag.has_path(dag.index(Phase::SparseFwd, 0), fwd1));
        assert!(!dag.has_path(dag.index(Phase::SparseBwd, 0), fwd1));
    }

    #[test]
    fn overlap_facts() {
        let dag = semi_async_schedule(6, &semi()).unwrap();
        for i in 0..4 {
            assert!(dag.can_overlap(dag.index(Phase::DenseBwd, i), dag.index(Phase::SparseFwd, i + 1)));
            assert!(dag.can_overlap(dag.index(Phase::DenseFwd, i + 2), dag.index(Phase::SparseBwd, i + 1)));
        }
        assert!(!dag.is_total_order());
    }

    #[test]
    fn sync_collapses_to_chain() {
        let dag = semi_async_schedule(5, &StalenessConfig::sync()).unwrap();
        assert_eq!(dag.topological_order(), (0..20).collect::<Vec<_>>());
        for a in 0..20 {
            for b in a + 1..20 {
                assert!(dag.has_path(a, b), "{a} -> {b}");
            }
        }
    }

    #[test]
    fn dense_stays_synchronous() {
        let dag = semi_async_schedule(5, &StalenessConfig::semi_async(2).unwrap()).unwrap();
        for i in 0..4 {
            assert!(dag.has_path(dag.index(Phase::DenseBwd, i), dag.index(Phase::DenseFwd, i + 1)));
        }
    }

    #[test]
    fn read_versions() {
        assert_eq!(read_version(5, 0), 5);
        assert_eq!(read_version(5, 1), 4);
        assert_eq!(read_version(0, 3), 0);
    }

    #[test]
    fn tracker_flags_too_fresh_and_too_stale() {
        let mut tr = StalenessTracker::new(1);
        tr.record_update(0, [(0, 7)]).unwrap();
        // Step 1 may see step 0's write (version 1 is within [0, 1]).
        assert!(tr.check_read(1, [(0, 7)]));
        tr.record_update(1, [(0, 7)]).unwrap();
        // Step 1 must not see its own update.
        assert!(!tr.check_read(1, [(0, 7)]));
        assert_eq!(tr.violations, 1);
        assert!(tr.record_update(5, []).is_err());
        let mut strict = StalenessTracker::new(0);
        assert!(!strict.check_read(1, []));
    }

    #[test]
    fn alpha_examples() {
        let disjoint = vec![vec![1, 2], vec![3, 4], vec![5]];
        assert_eq!(estimate_alpha(&disjoint, 1).unwrap().alpha, 0.0);
        let same = vec![vec![1, 2, 3]; 4];
        let est = estimate_alpha(&same, 1).unwrap();
        assert_eq!((est.alpha, est.n_emb), (1.0, 3));
        assert!(estimate_alpha(&same[..1], 1).is_err());
        assert!((uniform_alpha(1000, 1) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn alpha_converges_to_closed_form() {
        use rand::Rng;
        let mut rng = crate::rng::stream(8, &[]);
        let (n, draws) = (500, 40);
        let steps: Vec<Vec<u64>> = (0..4000).map(|_| (0..draws).map(|_| rng.random_range(0..n)).collect()).collect();
        let est = estimate_alpha(&steps, 1).unwrap();
        let want = uniform_alpha(n as usize, draws);
        assert!((est.alpha - want).abs() < 0.01 * want.max(0.05), "{} vs {want}", est.alpha);
    }

    #[test]
    fn bound_examples() {
        let p = BoundParams { l: 4.0, sigma: 2.0, t: 100.0, alpha: 0.3, tau: 0.0, ..BoundParams::default() };
        assert_eq!(eval_bound(&p).unwrap(), sgd_bound(&p).unwrap());
        assert_eq!(sgd_bound(&p).unwrap(), 2.0 * 2.0 / 10.0 + 4.0 / 100.0);
        let p0 = BoundParams { alpha: 0.0, tau: 3.0, ..p };
        assert_eq!(eval_bound(&p0).unwrap(), sgd_bound(&p0).unwrap());
        let noisy = BoundParams { sigma: 1e6, t: 1e4, ..p };
        let doubled = BoundParams { t: 2e4, ..noisy };
        let ratio = eval_bound(&doubled).unwrap() / eval_bound(&noisy).unwrap();
        assert!((ratio - 0.5f64.sqrt()).abs() < 1e-6);
        assert!(eval_bound(&BoundParams { t: 0.5, ..p }).is_err());
        assert!(bound_table(&p, &[0.0, 0.1], &[1.0], &[10.0]).unwrap().lines().count() == 4);
    }

    proptest! {
        #[test]
        fn schedules_are_acyclic(n in 1usize..12, tau in 0usize..4) {
            let cfg = if tau == 0 { StalenessConfig::sync() } else { StalenessConfig::semi_async(tau).unwrap() };
            let dag = semi_async_schedule(n, &cfg).unwrap();
            let order = dag.topological_order();
            prop_assert_eq!(order.len(), 4 * n);
            let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(i, &e)| (e, i)).collect();
            for &(a, b) in &dag.edges {
                prop_assert!(pos[&a] < pos[&b]);
            }
        }

        #[test]
        fn semi_async_reads_respect_window(updates in prop::collection::vec(prop::collection::vec(0u64..20, 0..6), 1..30), tau in 0usize..4) {
            // Replays the delayed-update rule: before the forward of step t, apply
            // every pending update from steps < t - tau.
            let mut tr = StalenessTracker::new(tau);
            let mut next = 0;
            for t in 0..updates.len() {
                while next < read_version(t, tau) {
                    tr.record_update(next, updates[next].iter().map(|&r| (0, r))).unwrap();
                    next += 1;
                }
                prop_assert!(tr.check_read(t, updates[t].iter().map(|&r| (0, r))));
            }
            prop_assert_eq!(tr.violations, 0);
        }
    }
}
