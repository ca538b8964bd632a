//! Discrete-event simulation of the six-stage training pipeline.
//!
//! Each batch passes through dataloader, feature all-to-all and unique, a
//! wait-for-unique barrier, embedding forward, the dense module and embedding
//! backward. Stages run on the host, the device compute engine or the device
//! communication engine. A non-preemptive list scheduler starts every ready
//! stage as soon as its resource frees up, earlier batches first, with at most
//! `depth` batches in flight. Cross-batch sparse/dense edges come from
//! [`crate::semi_async::semi_async_schedule`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, ensure, Result};
use crate::semi_async::{semi_async_schedule, Phase, StalenessConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dataloader,
    FeatureA2aAndUnique,
    WaitUnique,
    EmbForward,
    DenseModule,
    EmbBackward,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Dataloader,
        Stage::FeatureA2aAndUnique,
        Stage::WaitUnique,
        Stage::EmbForward,
        Stage::DenseModule,
        Stage::EmbBackward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dataloader => "dataloader",
            Stage::FeatureA2aAndUnique => "feature_a2a_and_unique",
            Stage::WaitUnique => "wait_unique",
            Stage::EmbForward => "emb_forward",
            Stage::DenseModule => "dense_module",
            Stage::EmbBackward => "emb_backward",
        }
    }

    pub fn default_resource(self) -> Resource {
        match self {
            Stage::Dataloader => Resource::Host,
            Stage::WaitUnique => Resource::Barrier,
            Stage::DenseModule => Resource::DeviceCompute,
            _ => Resource::DeviceComm,
        }
    }

    fn index(self) -> usize {
        Self::ORDER.iter().position(|&s| s == self).expect("listed stage")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Host,
    DeviceCompute,
    DeviceComm,
    /// Occupies no resource; any number may run at once.
    Barrier,
}

impl Resource {
    pub fn as_str(self) -> &'static str {
        match self {
            Resource::Host => "host",
            Resource::DeviceCompute => "device_compute",
            Resource::DeviceComm => "device_comm",
            Resource::Barrier => "barrier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum DurationModel {
    Constant { ms: f64 },
    PerToken { fixed_ms: f64, per_token_ms: f64 },
}

impl DurationModel {
    pub fn for_tokens(&self, tokens: u64) -> f64 {
        match *self {
            DurationModel::Constant { ms } => ms,
            DurationModel::PerToken { fixed_ms, per_token_ms } => fixed_ms + per_token_ms * tokens as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub resource: Resource,
    pub duration: DurationModel,
}

impl StageSpec {
    pub fn constant(stage: Stage, ms: f64) -> Self {
        Self { stage, resource: stage.default_resource(), duration: DurationModel::Constant { ms } }
    }
}

/// Six constant stages on their default resources, durations in stage order.
pub fn constant_stages(ms: [f64; 6]) -> Vec<StageSpec> {
    Stage::ORDER.iter().zip(ms).map(|(&s, d)| StageSpec::constant(s, d)).collect()
}

fn validate_stages(stages: &[StageSpec]) -> Result<()> {
    ensure!(
        stages.iter().map(|s| s.stage).eq(Stage::ORDER),
        Config,
        "pipeline needs the six stages exactly once, in order"
    );
    for s in stages {
        ensure!(
            matches!(s.duration, DurationModel::Constant { ms } if ms >= 0.0 && ms.is_finite())
                || matches!(s.duration, DurationModel::PerToken { fixed_ms, per_token_ms }
                    if fixed_ms >= 0.0 && per_token_ms >= 0.0 && (fixed_ms + per_token_ms).is_finite()),
            Config,
            "stage {} has a negative or non-finite duration",
            s.stage.as_str()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelineEvent {
    pub batch: usize,
    pub stage: Stage,
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTimeline {
    /// Indexed by `batch * 6 + stage`.
    pub events: Vec<TimelineEvent>,
    pub depth: usize,
    pub semi_async: bool,
    pub num_batches: usize,
    /// `(before, after)` event index pairs the scheduler honoured.
    pub deps: Vec<(usize, usize)>,
}

impl PipelineTimeline {
    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    pub fn intervals(&self, r: Resource) -> Vec<(f64, f64)> {
        let mut v: Vec<_> = self.events.iter().filter(|e| e.resource == r).map(|e| (e.start, e.end)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["batch", "stage", "resource", "start", "end"])?;
        for e in &self.events {
            w.write_record([
                e.batch.to_string(),
                e.stage.as_str().into(),
                e.resource.as_str().into(),
                format!("{:.6}", e.start),
                format!("{:.6}", e.end),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One text row per resource, `width` columns wide. Each cell shows the
    /// last digit of the batch occupying it, `.` when idle.
    pub fn gantt(&self, width: usize) -> String {
        let span = self.makespan().max(f64::MIN_POSITIVE);
        let mut out = String::new();
        for r in [Resource::Host, Resource::DeviceComm, Resource::DeviceCompute] {
            let mut row = vec!['.'; width];
            for e in self.events.iter().filter(|e| e.resource == r && e.end > e.start) {
                let a = ((e.start / span) * width as f64).floor() as usize;
                let b = (((e.end / span) * width as f64).ceil() as usize).min(width);
                for c in &mut row[a.min(width)..b] {
                    *c = char::from_digit((e.batch % 10) as u32, 10).expect("single digit");
                }
            }
            let _ = writeln!(out, "{:>15} |{}|", r.as_str(), row.into_iter().collect::<String>());
        }
        out
    }
}

fn event_id(batch: usize, stage: Stage) -> usize {
    batch * 6 + stage.index()
}

fn stage_of_phase(p: Phase) -> Stage {
    match p {
        Phase::SparseFwd => Stage::EmbForward,
        Phase::DenseFwd | Phase::DenseBwd => Stage::DenseModule,
        Phase::SparseBwd => Stage::EmbBackward,
    }
}

fn dependency_edges(num_batches: usize, depth: usize, semi_async: bool) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for b in 0..num_batches {
        for w in Stage::ORDER.windows(2) {
            edges.push((event_id(b, w[0]), event_id(b, w[1])));
        }
        if b >= depth {
            edges.push((event_id(b - depth, Stage::EmbBackward), event_id(b, Stage::Dataloader)));
        }
    }
    let staleness = if semi_async { StalenessConfig::semi_async(1)? } else { StalenessConfig::sync() };
    let dag = semi_async_schedule(num_batches, &staleness)?;
    for &(a, b) in &dag.edges {
        let (ea, eb) = (dag.events[a], dag.events[b]);
        let (ia, ib) = (event_id(ea.batch, stage_of_phase(ea.phase)), event_id(eb.batch, stage_of_phase(eb.phase)));
        if ia != ib && !edges.contains(&(ia, ib)) {
            edges.push((ia, ib));
        }
    }
    Ok(edges)
}

#[derive(PartialEq)]
struct Finish(f64, usize);

impl Eq for Finish {}

impl PartialOrd for Finish {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Finish {
    // Min-heap on end time, then event id.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Constant-duration schedule; see [`build_schedule_with_tokens`].
pub fn build_schedule(stages: &[StageSpec], num_batches: usize, depth: usize, semi_async: bool) -> Result<PipelineTimeline> {
    build_schedule_with_tokens(stages, &vec![0; num_batches], depth, semi_async)
}

/// List-schedules one event per `(batch, stage)`. An event becomes ready
/// when its predecessors have ended; ready events claim free resources in
/// `(batch, stage)` order; barrier events start as soon as they are ready.
pub fn build_schedule_with_tokens(
    stages: &[StageSpec],
    batch_tokens: &[u64],
    depth: usize,
    semi_async: bool,
) -> Result<PipelineTimeline> {
    validate_stages(stages)?;
    let num_batches = batch_tokens.len();
    ensure!(num_batches >= 1, Validation, "need at least one batch");
    ensure!(depth >= 1, Config, "pipeline depth must be at least 1");
    let deps = dependency_edges(num_batches, depth, semi_async)?;
    let n = num_batches * 6;
    let mut preds = vec![Vec::new(); n];
    for &(a, b) in &deps {
        preds[b].push(a);
    }
    let duration: Vec<f64> = (0..n).map(|id| stages[id % 6].duration.for_tokens(batch_tokens[id / 6])).collect();
    let resource: Vec<Resource> = (0..n).map(|id| stages[id % 6].resource).collect();

    let mut start = vec![f64::NAN; n];
    let mut end = vec![f64::NAN; n];
    let mut done = vec![false; n];
    let mut busy = [false; 3];
    let slot = |r: Resource| match r {
        Resource::Host => Some(0),
        Resource::DeviceCompute => Some(1),
        Resource::DeviceComm => Some(2),
        Resource::Barrier => None,
    };
    let mut running = BinaryHeap::new();
    let mut pending: Vec<usize> = (0..n).collect();
    let mut now = 0.0;
    while !pending.is_empty() || !running.is_empty() {
        pending.retain(|&id| {
            if !preds[id].iter().all(|&p| done[p]) {
                return true;
            }
            match slot(resource[id]) {
                Some(s) if busy[s] => return true,
                Some(s) => busy[s] = true,
                None => {}
            }
            start[id] = now;
            end[id] = now + duration[id];
            running.push(Finish(end[id], id));
            false
        });
        let Some(Finish(t, id)) = running.pop() else {
            bail!(Config, "pipeline dependencies contain a cycle");
        };
        now = t;
        let mut finished = vec![id];
        while running.peek().is_some_and(|f| f.0 == now) {
            finished.push(running.pop().expect("peeked").1);
        }
        for id in finished {
            done[id] = true;
            if let Some(s) = slot(resource[id]) {
                busy[s] = false;
            }
        }
    }
    let events = (0..n)
        .map(|id| TimelineEvent { batch: id / 6, stage: Stage::ORDER[id % 6], resource: resource[id], start: start[id], end: end[id] })
        .collect();
    Ok(PipelineTimeline { events, depth, semi_async, num_batches, deps })
}

/// Violations of resource exclusivity, dependency order and work
/// conservation. Empty for every timeline [`build_schedule`] returns.
pub fn check_timeline(t: &PipelineTimeline) -> Vec<String> {
    let mut issues = Vec::new();
    for r in [Resource::Host, Resource::DeviceCompute, Resource::DeviceComm] {
        let iv: Vec<_> = t.intervals(r).into_iter().filter(|(a, b)| b > a).collect();
        for w in iv.windows(2) {
            if w[1].0 < w[0].1 {
                issues.push(format!("{} double-booked at {}", r.as_str(), w[1].0));
            }
        }
    }
    let mut ready = vec![0.0f64; t.events.len()];
    for &(a, b) in &t.deps {
        if t.events[b].start < t.events[a].end {
            issues.push(format!("event {b} starts before its predecessor {a} ends"));
        }
        ready[b] = ready[b].max(t.events[a].end);
    }
    for (id, e) in t.events.iter().enumerate() {
        if e.resource == Resource::Barrier {
            if e.start != ready[id] {
                issues.push(format!("barrier event {id} waited without cause"));
            }
            continue;
        }
        // The resource must be busy throughout [ready, start).
        let mut covered = ready[id];
        for (a, b) in t.intervals(e.resource) {
            if a <= covered && b > covered {
                covered = b;
            }
        }
        if covered < e.start {
            issues.push(format!("{} idle at {covered} while event {id} was ready", e.resource.as_str()));
        }
    }
    issues
}

fn covered_length(intervals: &[(f64, f64)], a: f64, b: f64) -> f64 {
    intervals.iter().map(|&(s, e)| (e.min(b) - s.max(a)).max(0.0)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub makespan: f64,
    pub num_batches: usize,
    pub computing: f64,
    pub communication: f64,
    pub comm_not_overlapped: f64,
    pub free: f64,
}

impl UtilizationReport {
    pub fn computing_ratio(&self) -> f64 {
        self.computing / self.makespan
    }

    pub fn communication_ratio(&self) -> f64 {
        self.communication / self.makespan
    }

    pub fn not_overlapped_ratio(&self) -> f64 {
        self.comm_not_overlapped / self.makespan
    }

    pub fn free_ratio(&self) -> f64 {
        self.free / self.makespan
    }

    pub fn comm_overlapped(&self) -> f64 {
        self.communication - self.comm_not_overlapped
    }

    pub const CSV_HEADER: &'static str = "label,computing_ms,computing_pct,communication_ms,communication_pct,\
not_overlapped_ms,not_overlapped_pct,free_ms,free_pct";

    /// Per-batch latencies and ratios in computing, communication,
    /// not-overlapped, free order.
    pub fn columns(&self) -> [f64; 8] {
        let per = |x: f64| x / self.num_batches as f64;
        [
            per(self.computing),
            100.0 * self.computing_ratio(),
            per(self.communication),
            100.0 * self.communication_ratio(),
            per(self.comm_not_overlapped),
            100.0 * self.not_overlapped_ratio(),
            per(self.free),
            100.0 * self.free_ratio(),
        ]
    }

    pub fn csv_row(&self, label: &str) -> String {
        let cols: Vec<String> = self.columns().iter().map(|c| format!("{c:.2}")).collect();
        format!("{label},{}", cols.join(","))
    }

    pub fn markdown_row(&self, label: &str) -> String {
        let cols: Vec<String> = self.columns().iter().map(|c| format!("{c:.2}")).collect();
        format!("| {label} | {} |", cols.join(" | "))
    }
}

pub fn utilization_report(t: &PipelineTimeline) -> UtilizationReport {
    let makespan = t.makespan();
    let compute = t.intervals(Resource::DeviceCompute);
    let comm = t.intervals(Resource::DeviceComm);
    let computing: f64 = compute.iter().map(|(a, b)| b - a).sum();
    let communication: f64 = comm.iter().map(|(a, b)| b - a).sum();
    let overlapped: f64 = comm.iter().map(|&(a, b)| covered_length(&compute, a, b)).sum();
    let comm_not_overlapped = communication - overlapped;
    UtilizationReport {
        makespan,
        num_batches: t.num_batches,
        computing,
        communication,
        comm_not_overlapped,
        free: makespan - computing - comm_not_overlapped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeComparison {
    pub sync: UtilizationReport,
    pub semi_async: UtilizationReport,
}

impl ModeComparison {
    /// Communication time not hidden behind compute, `(sync, semi_async)`.
    pub fn unmasked_sparse_comm(&self) -> (f64, f64) {
        (self.sync.comm_not_overlapped, self.semi_async.comm_not_overlapped)
    }

    pub fn unmasked_ratio(&self) -> (f64, f64) {
        (self.sync.not_overlapped_ratio(), self.semi_async.not_overlapped_ratio())
    }
}

pub fn compare_modes(stages: &[StageSpec], num_batches: usize, depth: usize) -> Result<ModeComparison> {
    Ok(ModeComparison {
        sync: utilization_report(&build_schedule(stages, num_batches, depth, false)?),
        semi_async: utilization_report(&build_schedule(stages, num_batches, depth, true)?),
    })
}

/// Target shares of the makespan, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioTarget {
    pub computing: f64,
    pub not_overlapped: f64,
    pub free: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub stages: Vec<StageSpec>,
    pub report: UtilizationReport,
    pub iterations: usize,
}

/// Stage durations from a communication scale `c` and a host scale `h`.
/// Communication splits 1:2:2 over feature all-to-all, embedding forward and
/// embedding backward; the barrier takes a tenth of the dataloader time.
fn scaled_stages(dense_ms: f64, c: f64, h: f64) -> Vec<StageSpec> {
    constant_stages([h, 0.2 * c, 0.1 * h, 0.4 * c, dense_ms, 0.4 * c])
}

/// Finds stage durations around a fixed dense time whose semi-async schedule
/// hits `target`'s computing and free shares (not-overlapped follows, since
/// the three sum to one). Newton's method with a finite-difference Jacobian
/// over the communication and host scales.
pub fn calibrate(target: RatioTarget, dense_ms: f64, num_batches: usize, depth: usize) -> Result<Calibration> {
    ensure!(dense_ms > 0.0, Validation, "dense time must be positive");
    ensure!(
        (target.computing + target.not_overlapped + target.free - 1.0).abs() < 1e-3,
        Validation,
        "target ratios must sum to one"
    );
    let eval = |x: [f64; 2]| -> Result<(UtilizationReport, [f64; 2])> {
        let r = utilization_report(&build_schedule(&scaled_stages(dense_ms, x[0], x[1]), num_batches, depth, true)?);
        Ok((r, [r.computing_ratio() - target.computing, r.free_ratio() - target.free]))
    };
    let total = num_batches as f64 * dense_ms / target.computing;
    let mut x = [target.not_overlapped * total / 1.5, target.free * total / 1.1];
    for iter in 0..100 {
        let (report, f) = eval(x)?;
        if f[0].abs() < 1e-9 && f[1].abs() < 1e-9 {
            return Ok(Calibration { stages: scaled_stages(dense_ms, x[0], x[1]), report, iterations: iter });
        }
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x;
            xp[j] += h;
            let (_, fp) = eval(xp)?;
            jac[0][j] = (fp[0] - f[0]) / h;
            jac[1][j] = (fp[1] - f[1]) / h;
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        ensure!(det.abs() > 1e-300, Numerical, "calibration Jacobian is singular at {x:?}");
        let dx = [(jac[1][1] * f[0] - jac[0][1] * f[1]) / det, (jac[0][0] * f[1] - jac[1][0] * f[0]) / det];
        x = [(x[0] - dx[0]).max(1e-9), (x[1] - dx[1]).max(1e-9)];
    }
    bail!(Numerical, "calibration did not converge")
}
