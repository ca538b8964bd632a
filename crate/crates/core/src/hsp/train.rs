use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_shard_plan, ClusterTopology, CommKind, CommVolumeLog, ShardPlan};
use crate::embedding::{backward_accumulate, EmbeddingTable, IndexStats, KeyedJaggedTensor, Lookup, SparseGradient};
use crate::error::{bail, ensure, Result};
use crate::jagged::{JaggedTensor, Scalar};

const ID_BYTES: u64 = 8;
const ELEM_BYTES: u64 = 4;

/// Synthetic per-device ID batches with Zipf-distributed row popularity.
/// Every sample draws at least one ID from every table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdWorkload {
    pub table_rows: Vec<usize>,
    pub samples_per_device: usize,
    pub max_ids_per_sample: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for IdWorkload {
    fn default() -> Self {
        Self { table_rows: vec![1000; 16], samples_per_device: 32, max_ids_per_sample: 8, zipf_exponent: 1.1, seed: 0 }
    }
}

impl IdWorkload {
    pub fn table_name(k: usize) -> String {
        format!("t{k}")
    }

    pub fn batch(&self, step: usize, device: usize) -> KeyedJaggedTensor {
        let mut rng = crate::rng::stream(self.seed, &[step as u64, device as u64]);
        let ids: Vec<Vec<Vec<u64>>> = self
            .table_rows
            .iter()
            .map(|&rows| {
                let zipf = Zipf::new(rows as f64, self.zipf_exponent).expect("rows >= 1 and exponent > 0");
                (0..self.samples_per_device)
                    .map(|_| {
                        let n = rng.random_range(1..=self.max_ids_per_sample.max(1));
                        (0..n).map(|_| zipf.sample(&mut rng) as u64 - 1).collect()
                    })
                    .collect()
            })
            .collect();
        let keys = (0..self.table_rows.len()).map(Self::table_name).collect();
        KeyedJaggedTensor::from_nested(keys, &ids).expect("generated layout is consistent")
    }

    pub fn init_tables(&self, dim: usize, scale: f64, seed: u64) -> Vec<EmbeddingTable<f64>> {
        self.table_rows
            .iter()
            .enumerate()
            .map(|(k, &rows)| {
                EmbeddingTable::random(Self::table_name(k), rows, dim, scale, &mut crate::rng::stream(seed, &[u64::MAX, k as u64]))
            })
            .collect()
    }
}

fn unique_sorted(ids: &[u64]) -> Vec<u64> {
    let mut u = ids.to_vec();
    u.sort_unstable();
    u.dedup();
    u
}

/// Two-phase lookup: each device sends its deduplicated IDs to the owning
/// device of its group and receives the rows back. Device `d` reads from
/// `replicas[group_of(d)]`.
pub fn route_lookup<T: Scalar>(
    batches: &[KeyedJaggedTensor],
    replicas: &[Vec<EmbeddingTable<T>>],
    plan: &ShardPlan,
    topo: &ClusterTopology,
    step: usize,
) -> Result<(Vec<Lookup<T>>, CommVolumeLog)> {
    ensure!(batches.len() == topo.num_devices, Shape, "{} batches for {} devices", batches.len(), topo.num_devices);
    ensure!(replicas.len() == topo.num_groups, Shape, "{} replicas for {} groups", replicas.len(), topo.num_groups);
    ensure!(plan.group_size == topo.group_size(), Validation, "shard plan was built for another group size");
    let mut id_bytes = BTreeMap::new();
    let mut emb_bytes = BTreeMap::new();
    let mut results = Vec::with_capacity(batches.len());
    for (d, kjt) in batches.iter().enumerate() {
        let g = topo.group_of(d);
        let tables = kjt.resolve_tables(&replicas[g])?;
        let mut per_key = Vec::with_capacity(tables.len());
        for (k, table) in tables.iter().enumerate() {
            let t = replicas[g].iter().position(|r| std::ptr::eq(r, *table)).expect("resolved from this replica");
            let Some(&local) = plan.owner.get(t) else {
                bail!(UnknownKey, "table `{}` has no owner in the shard plan", table.name);
            };
            let owner = topo.device(g, local);
            let ids = &kjt.values()[kjt.key_range(k)];
            let uniq = unique_sorted(ids);
            for &id in &uniq {
                table.check_id(id)?;
            }
            let u = uniq.len() as u64;
            *id_bytes.entry((d, owner)).or_insert(0) += ID_BYTES * u;
            *emb_bytes.entry((owner, d)).or_insert(0) += ELEM_BYTES * table.dim() as u64 * u;
            let dim = table.dim();
            let gathered: Vec<T> = uniq.iter().flat_map(|&id| table.row(id).iter().copied()).collect();
            let mut values = Vec::with_capacity(ids.len() * dim);
            for id in ids {
                let slot = uniq.binary_search(id).expect("id is in its own unique set");
                values.extend_from_slice(&gathered[slot * dim..(slot + 1) * dim]);
            }
            per_key.push(JaggedTensor::new(values, kjt.jagged_ids(k).offsets().to_vec(), dim)?);
        }
        results.push(Lookup { per_key, stats: IndexStats { total_processed: kjt.values().len() } });
    }
    let mut log = CommVolumeLog::default();
    log.push_exchange(step, CommKind::AllToAllIds, id_bytes);
    log.push_exchange(step, CommKind::AllToAllEmb, emb_bytes);
    Ok((results, log))
}

/// Pairwise reduction: neighbours `(0,1), (2,3), ...` are merged level by
/// level, an odd tail carried up unchanged. For `parts` made of aligned
/// power-of-two blocks, reducing each block first and then the block results
/// gives the same bits as reducing everything at once.
pub fn tree_reduce<T: Scalar>(parts: &[SparseGradient<T>], dim: usize) -> SparseGradient<T> {
    let mut level: Vec<SparseGradient<T>> = parts.to_vec();
    if level.is_empty() {
        return SparseGradient::empty(dim);
    }
    while level.len() > 1 {
        level = level.chunks(2).map(|c| if c.len() == 2 { c[0].merge(&c[1]) } else { c[0].clone() }).collect();
    }
    level.pop().expect("non-empty")
}

/// `per_group[g][t]` holds group `g`'s gradient for table `t`. Returns the
/// per-table sum over groups, reduced in [`tree_reduce`] order.
pub fn sparse_all_reduce<T: Scalar>(per_group: &[Vec<SparseGradient<T>>]) -> Result<Vec<SparseGradient<T>>> {
    ensure!(!per_group.is_empty(), Validation, "no groups to reduce");
    let tables = per_group[0].len();
    ensure!(per_group.iter().all(|g| g.len() == tables), Shape, "groups disagree on the number of tables");
    (0..tables)
        .map(|t| {
            let dim = per_group[0][t].dim();
            ensure!(per_group.iter().all(|g| g[t].dim() == dim), Shape, "table {t} gradients differ in width");
            let parts: Vec<_> = per_group.iter().map(|g| g[t].clone()).collect();
            Ok(tree_reduce(&parts, dim))
        })
        .collect()
}

/// Sparse AdaGrad: for every touched element, `S += G²` then
/// `W -= lr·G/√(S+eps)`. Zero gradient elements leave `W` and `S` alone.
pub fn adagrad_step<T: Scalar>(table: &mut EmbeddingTable<T>, grad: &SparseGradient<T>, lr: T, eps: T) -> Result<()> {
    ensure!(grad.dim() == table.dim(), Shape, "gradient width {} for table width {}", grad.dim(), table.dim());
    for &id in grad.indices() {
        table.check_id(id)?;
    }
    for (i, &id) in grad.indices().iter().enumerate() {
        let (w, s) = table.row_and_state_mut(id);
        for ((w, s), &g) in w.iter_mut().zip(s.iter_mut()).zip(grad.row(i)) {
            if g == T::zero() {
                continue;
            }
            *s = *s + g * g;
            *w = *w - lr * g / (*s + eps).sqrt();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HspConfig {
    pub dim: usize,
    pub lr: f64,
    pub eps: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for HspConfig {
    fn default() -> Self {
        Self { dim: 16, lr: 0.05, eps: 1e-8, init_scale: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct HspRun {
    pub plan: ShardPlan,
    /// Final tables of every group.
    pub replicas: Vec<Vec<EmbeddingTable<f64>>>,
    /// Hash of group 0's weight and accumulator bits after each step.
    pub fingerprints: Vec<u64>,
    /// Summed `0.5·‖e − y‖²` over all devices, per step.
    pub losses: Vec<f64>,
    pub log: CommVolumeLog,
}

pub fn replica_fingerprint(tables: &[EmbeddingTable<f64>]) -> u64 {
    let mut h = DefaultHasher::new();
    for t in tables {
        t.weights().iter().for_each(|w| w.to_bits().hash(&mut h));
        t.optimizer_state().iter().for_each(|s| s.to_bits().hash(&mut h));
    }
    h.finish()
}

fn replicas_identical(a: &[EmbeddingTable<f64>], b: &[EmbeddingTable<f64>]) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        bits(x.weights()) == bits(y.weights()) && bits(x.optimizer_state()) == bits(y.optimizer_state())
    })
}

/// Runs `steps` of sparse training with the loss `0.5·‖e − y‖²` against
/// random targets `y`. Device `d` always trains on `workload.batch(step, d)`,
/// so runs with different `M` see the same global workload. Fails if the
/// group replicas ever disagree.
pub fn hsp_train(steps: usize, workload: &IdWorkload, topo: &ClusterTopology, cfg: &HspConfig) -> Result<HspRun> {
    topo.validate()?;
    ensure!(!workload.table_rows.is_empty(), Validation, "workload has no tables");
    let plan = build_shard_plan(&workload.table_rows, topo);
    let init = workload.init_tables(cfg.dim, cfg.init_scale, cfg.seed);
    let mut replicas = vec![init; topo.num_groups];
    let mut log = CommVolumeLog::default();
    let mut fingerprints = Vec::with_capacity(steps);
    let mut losses = Vec::with_capacity(steps);
    let num_tables = workload.table_rows.len();
    let (n, m, i) = (topo.num_devices, topo.num_groups, topo.group_size());

    for step in 0..steps {
        let batches: Vec<_> = (0..n).map(|d| workload.batch(step, d)).collect();
        let (lookups, fwd_log) = route_lookup(&batches, &replicas, &plan, topo, step)?;
        log.records.extend(fwd_log.records);

        let per_device: Vec<(f64, Vec<SparseGradient<f64>>)> = lookups
            .par_iter()
            .zip(&batches)
            .enumerate()
            .map(|(d, (lookup, kjt))| {
                let mut rng = crate::rng::stream(cfg.seed, &[step as u64, d as u64, 1]);
                let mut loss = 0.0;
                let grads: Vec<JaggedTensor<f64>> = lookup
                    .per_key
                    .iter()
                    .map(|e| {
                        let values = e
                            .values()
                            .iter()
                            .map(|&x| {
                                let r = x - rng.random_range(-1.0..1.0);
                                loss += 0.5 * r * r;
                                r
                            })
                            .collect();
                        JaggedTensor::new(values, e.offsets().to_vec(), e.dim()).expect("same layout")
                    })
                    .collect();
                backward_accumulate(&grads, kjt).map(|g| (loss, g))
            })
            .collect::<Result<_>>()?;
        losses.push(per_device.iter().map(|(l, _)| l).sum());

        // Backward all-to-all: gradient rows travel back to their owner.
        let mut grad_bytes = BTreeMap::new();
        for (d, (_, grads)) in per_device.iter().enumerate() {
            for (t, g) in grads.iter().enumerate() {
                let owner = plan.owner_device(topo, topo.group_of(d), t);
                *grad_bytes.entry((d, owner)).or_insert(0) += ELEM_BYTES * cfg.dim as u64 * g.nnz() as u64;
            }
        }
        log.push_exchange(step, CommKind::AllToAllEmb, grad_bytes);

        // Each owner reduces its group's contributions.
        let partials: Vec<Vec<SparseGradient<f64>>> = (0..m)
            .map(|g| {
                (0..num_tables)
                    .map(|t| {
                        let parts: Vec<_> = (0..i).map(|l| per_device[topo.device(g, l)].1[t].clone()).collect();
                        tree_reduce(&parts, cfg.dim)
                    })
                    .collect()
            })
            .collect();

        // Owners of the same table exchange touched rows across groups.
        let mut reduce_bytes = BTreeMap::new();
        for t in 0..num_tables {
            for g in 0..m {
                let payload = partials[g][t].nnz() as u64 * (ID_BYTES + ELEM_BYTES * cfg.dim as u64);
                for h in (0..m).filter(|&h| h != g) {
                    *reduce_bytes.entry((plan.owner_device(topo, g, t), plan.owner_device(topo, h, t))).or_insert(0) +=
                        payload;
                }
            }
        }
        log.push_exchange(step, CommKind::AllReduceGrad, reduce_bytes);

        for replica in replicas.iter_mut() {
            let global = sparse_all_reduce(&partials)?;
            for (table, g) in replica.iter_mut().zip(&global) {
                adagrad_step(table, g, cfg.lr, cfg.eps)?;
            }
        }
        for (g, replica) in replicas.iter().enumerate().skip(1) {
            if !replicas_identical(&replicas[0], replica) {
                bail!(Numerical, "group {g} diverged from group 0 at step {step}");
            }
        }
        fingerprints.push(replica_fingerprint(&replicas[0]));
    }
    Ok(HspRun { plan, replicas, fingerprints, losses, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::lookup_jagged;

    fn small_workload(seed: u64) -> IdWorkload {
        IdWorkload { table_rows: vec![50, 30, 80, 20], samples_per_device: 4, max_ids_per_sample: 5, zipf_exponent: 1.1, seed }
    }

    #[test]
    fn adagrad_scalar_examples() {
        let mut t = EmbeddingTable::from_weights("w", 1, 1, vec![3.0f64]).unwrap();
        adagrad_step(&mut t, &SparseGradient::new(vec![0], vec![1.0], 1).unwrap(), 1.0, 0.0).unwrap();
        assert_eq!(t.weights(), &[2.0]);
        assert_eq!(t.optimizer_state(), &[1.0]);
        let before = t.clone();
        adagrad_step(&mut t, &SparseGradient::new(vec![0], vec![0.0], 1).unwrap(), 1.0, 0.0).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn adagrad_matches_scalar_loop() {
        let mut rng = crate::rng::stream(3, &[]);
        let mut t = EmbeddingTable::<f64>::random("w", 5, 3, 1.0, &mut rng);
        let (mut w, mut s) = (t.weights().to_vec(), vec![0.0; 15]);
        for _ in 0..3 {
            let g = SparseGradient::new(vec![1, 4], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), 3).unwrap();
            adagrad_step(&mut t, &g, 0.1, 1e-6).unwrap();
            for (k, &id) in g.indices().iter().enumerate() {
                for j in 0..3 {
                    let (idx, gv) = (id as usize * 3 + j, g.row(k)[j]);
                    s[idx] += gv * gv;
                    w[idx] -= 0.1 * gv / (s[idx] + 1e-6).sqrt();
                }
            }
        }
        assert_eq!(t.weights(), w.as_slice());
        assert_eq!(t.optimizer_state(), s.as_slice());
    }

    #[test]
    fn all_reduce_examples() {
        let a = SparseGradient::new(vec![1, 3], vec![1.0, 2.0], 1).unwrap();
        let b = SparseGradient::new(vec![0, 2], vec![5.0, 6.0], 1).unwrap();
        assert_eq!(sparse_all_reduce(&[vec![a.clone()]]).unwrap(), vec![a.clone()]);
        let joined = sparse_all_reduce(&[vec![a], vec![b]]).unwrap();
        assert_eq!(joined[0].indices(), &[0, 1, 2, 3]);
        assert_eq!(joined[0].values(), &[5.0, 1.0, 6.0, 2.0]);
    }

    #[test]
    fn all_reduce_matches_dense_scatter_add() {
        let mut rng = crate::rng::stream(4, &[]);
        for _ in 0..50 {
            let groups = rng.random_range(1..6);
            let parts: Vec<Vec<SparseGradient<f64>>> = (0..groups)
                .map(|_| {
                    let mut idx: Vec<u64> = (0..rng.random_range(0..10)).map(|_| rng.random_range(0..20)).collect();
                    idx.sort_unstable();
                    idx.dedup();
                    let vals = (0..idx.len() * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
                    vec![SparseGradient::new(idx, vals, 2).unwrap()]
                })
                .collect();
            let got = sparse_all_reduce(&parts).unwrap()[0].to_dense(20);
            let mut want = vec![0.0; 40];
            for p in &parts {
                for (a, b) in want.iter_mut().zip(p[0].to_dense(20)) {
                    *a += b;
                }
            }
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn routed_lookup_equals_monolithic() {
        let w = small_workload(5);
        let tables = w.init_tables(4, 1.0, 9);
        for m in [1, 2, 4] {
            let topo = ClusterTopology::new(4, m).unwrap();
            let plan = build_shard_plan(&w.table_rows, &topo);
            let batches: Vec<_> = (0..4).map(|d| w.batch(0, d)).collect();
            let replicas = vec![tables.clone(); m];
            let (got, log) = route_lookup(&batches, &replicas, &plan, &topo, 0).unwrap();
            for (d, kjt) in batches.iter().enumerate() {
                assert_eq!(got[d].per_key, lookup_jagged(kjt, &tables).unwrap().per_key);
            }
            assert_eq!(log.cross_group_all_to_all(&topo), 0);
        }
    }

    #[test]
    fn local_ownership_sends_nothing() {
        let w = IdWorkload { table_rows: vec![10], ..small_workload(1) };
        let topo = ClusterTopology::new(2, 2).unwrap();
        let plan = build_shard_plan(&w.table_rows, &topo);
        let tables = w.init_tables(2, 1.0, 0);
        let batches: Vec<_> = (0..2).map(|d| w.batch(0, d)).collect();
        let (_, log) = route_lookup(&batches, &[tables.clone(), tables], &plan, &topo, 0).unwrap();
        assert!(log.records.is_empty());
    }

    #[test]
    fn groups_match_centralized_run() {
        let w = small_workload(11);
        let cfg = HspConfig { dim: 4, ..HspConfig::default() };
        let central = hsp_train(20, &w, &ClusterTopology::new(4, 1).unwrap(), &cfg).unwrap();
        for m in [2, 4] {
            let run = hsp_train(20, &w, &ClusterTopology::new(4, m).unwrap(), &cfg).unwrap();
            assert_eq!(run.fingerprints, central.fingerprints);
            assert!(replicas_identical(&run.replicas[0], &central.replicas[0]));
        }
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let w = small_workload(2);
        let cfg = HspConfig { dim: 3, lr: 0.0, ..HspConfig::default() };
        let run = hsp_train(5, &w, &ClusterTopology::new(4, 2).unwrap(), &cfg).unwrap();
        let init = w.init_tables(3, cfg.init_scale, cfg.seed);
        for (a, b) in run.replicas[1].iter().zip(&init) {
            assert_eq!(a.weights(), b.weights());
        }
    }

    #[test]
    fn silent_group_halves_the_aggregate() {
        let g = SparseGradient::new(vec![0, 2], vec![0.5, -1.0], 1).unwrap();
        let silent = SparseGradient::empty(1);
        let sum = sparse_all_reduce(&[vec![g.clone()], vec![silent]]).unwrap();
        assert_eq!(sum[0], g);
        let both = sparse_all_reduce(&[vec![g.clone()], vec![g.clone()]]).unwrap();
        assert_eq!(both[0].values(), &[1.0, -2.0]);
    }
}
