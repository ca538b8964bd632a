//! Hierarchical sparse parallelism on a simulated cluster.
//!
//! `N` devices form `M` groups of `I = N / M` consecutive devices. Each group
//! holds a full replica of every embedding table, sharded table-wise over its
//! own devices, so lookup all-to-all traffic never leaves the group. Groups
//! exchange only the touched rows of the aggregated sparse gradient and then
//! apply the same AdaGrad step, which keeps every replica identical to a
//! single-group run.

mod train;

pub use train::{
    adagrad_step, hsp_train, replica_fingerprint, route_lookup, sparse_all_reduce, tree_reduce, HspConfig, HspRun,
    IdWorkload,
};

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterTopology {
    pub num_devices: usize,
    pub num_groups: usize,
    /// Devices sharing the fast intra-node link.
    pub devices_per_node: usize,
    /// Bytes per second.
    pub intra_bw: f64,
    pub inter_bw: f64,
    /// Seconds added to every message.
    pub per_message_latency: f64,
}

impl Default for ClusterTopology {
    fn default() -> Self {
        Self {
            num_devices: 16,
            num_groups: 1,
            devices_per_node: 8,
            intra_bw: 56e9,
            inter_bw: 12.5e9,
            per_message_latency: 10e-6,
        }
    }
}

impl ClusterTopology {
    pub fn new(num_devices: usize, num_groups: usize) -> Result<Self> {
        let t = Self { num_devices, num_groups, ..Self::default() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_devices >= 1 && self.num_groups >= 1, Config, "need at least one device and one group");
        ensure!(
            self.num_devices % self.num_groups == 0,
            Config,
            "{} devices do not split into {} groups",
            self.num_devices,
            self.num_groups
        );
        ensure!(self.devices_per_node >= 1, Config, "devices_per_node must be positive");
        ensure!(self.intra_bw > 0.0 && self.inter_bw > 0.0, Config, "bandwidths must be positive");
        ensure!(self.per_message_latency >= 0.0, Config, "per-message latency must be non-negative");
        Ok(())
    }

    /// Devices per group, `I`.
    pub fn group_size(&self) -> usize {
        self.num_devices / self.num_groups
    }

    pub fn group_of(&self, device: usize) -> usize {
        device / self.group_size()
    }

    pub fn device(&self, group: usize, local: usize) -> usize {
        group * self.group_size() + local
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        a / self.devices_per_node == b / self.devices_per_node
    }

    pub fn bandwidth(&self, src: usize, dst: usize) -> f64 {
        if self.same_node(src, dst) {
            self.intra_bw
        } else {
            self.inter_bw
        }
    }
}

/// Table-wise sharding inside one group, replicated in every group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShardPlan {
    /// Local device index (within the group) owning each table.
    pub owner: Vec<usize>,
    pub group_size: usize,
}

impl ShardPlan {
    pub fn owner_device(&self, topo: &ClusterTopology, group: usize, table: usize) -> usize {
        topo.device(group, self.owner[table])
    }

    /// Rows held by each local device.
    pub fn rows_per_device(&self, table_rows: &[usize]) -> Vec<usize> {
        let mut rows = vec![0; self.group_size];
        for (t, &o) in self.owner.iter().enumerate() {
            rows[o] += table_rows[t];
        }
        rows
    }
}

/// Tables sorted by descending row count (stable) are dealt round-robin to
/// the `I` devices of a group.
pub fn build_shard_plan(table_rows: &[usize], topo: &ClusterTopology) -> ShardPlan {
    let i = topo.group_size().max(1);
    let mut order: Vec<usize> = (0..table_rows.len()).collect();
    order.sort_by_key(|&t| std::cmp::Reverse(table_rows[t]));
    let mut owner = vec![0; table_rows.len()];
    for (rank, &t) in order.iter().enumerate() {
        owner[t] = rank % i;
    }
    ShardPlan { owner, group_size: i }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    AllToAllIds,
    /// Embedding rows, forward results and backward gradients alike.
    AllToAllEmb,
    AllReduceGrad,
}

impl CommKind {
    pub const ALL: [CommKind; 3] = [CommKind::AllToAllIds, CommKind::AllToAllEmb, CommKind::AllReduceGrad];

    pub fn as_str(self) -> &'static str {
        match self {
            CommKind::AllToAllIds => "all_to_all_ids",
            CommKind::AllToAllEmb => "all_to_all_emb",
            CommKind::AllReduceGrad => "all_reduce_grad",
        }
    }

    pub fn is_all_to_all(self) -> bool {
        self != CommKind::AllReduceGrad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommRecord {
    pub step: usize,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub kind: CommKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommVolumeLog {
    pub records: Vec<CommRecord>,
}

impl CommVolumeLog {
    /// Logs one message per `(src, dst)` pair, in pair order. Self-sends and
    /// empty payloads are dropped.
    pub(crate) fn push_exchange(&mut self, step: usize, kind: CommKind, bytes: BTreeMap<(usize, usize), u64>) {
        for ((src, dst), b) in bytes {
            if src != dst && b > 0 {
                self.records.push(CommRecord { step, src, dst, bytes: b, kind });
            }
        }
    }

    pub fn total_bytes(&self, kind: CommKind) -> u64 {
        self.records.iter().filter(|r| r.kind == kind).map(|r| r.bytes).sum()
    }

    pub fn all_to_all_bytes(&self) -> u64 {
        self.records.iter().filter(|r| r.kind.is_all_to_all()).map(|r| r.bytes).sum()
    }

    /// Distinct all-to-all peers each device sent to within `step`.
    pub fn all_to_all_fan_out(&self, step: usize, num_devices: usize) -> Vec<usize> {
        let mut peers = vec![std::collections::BTreeSet::new(); num_devices];
        for r in self.records.iter().filter(|r| r.step == step && r.kind.is_all_to_all()) {
            peers[r.src].insert(r.dst);
        }
        peers.iter().map(|p| p.len()).collect()
    }

    /// All-to-all messages whose endpoints sit in different groups.
    pub fn cross_group_all_to_all(&self, topo: &ClusterTopology) -> usize {
        self.records
            .iter()
            .filter(|r| r.kind.is_all_to_all() && topo.group_of(r.src) != topo.group_of(r.dst))
            .count()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "src", "dst", "bytes", "kind"])?;
        for r in &self.records {
            w.write_record([r.step.to_string(), r.src.to_string(), r.dst.to_string(), r.bytes.to_string(), r.kind.as_str().into()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Modeled seconds per message kind: `Σ (per_message_latency + bytes / bw)`
/// with the intra- or inter-node bandwidth picked by device placement.
pub fn comm_latency(log: &CommVolumeLog, topo: &ClusterTopology) -> BTreeMap<CommKind, f64> {
    let mut out: BTreeMap<CommKind, f64> = CommKind::ALL.iter().map(|&k| (k, 0.0)).collect();
    for r in &log.records {
        *out.get_mut(&r.kind).expect("all kinds present") +=
            topo.per_message_latency + r.bytes as f64 / topo.bandwidth(r.src, r.dst);
    }
    out
}

/// Sum of the two all-to-all kinds from [`comm_latency`].
pub fn all_to_all_latency(log: &CommVolumeLog, topo: &ClusterTopology) -> f64 {
    comm_latency(log, topo).iter().filter(|(k, _)| k.is_all_to_all()).map(|(_, v)| v).sum()
}
