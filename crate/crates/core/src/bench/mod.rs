//! Experiment configuration, workload generation and report emission.
//!
//! A run is described by one TOML file ([`ExperimentConfig`]). Every
//! experiment produces one table plus a list of named checks; the table is
//! written as CSV (preceded by the resolved config as `#` comments) and as
//! markdown. Latency columns are either counters or cost-model outputs and
//! say so in their name; nothing here reads a wall clock.

mod experiments;
mod workload;

pub use experiments::run_experiment;
pub use workload::{
    batch_with_total, fit_zipf_exponent, reference_batch, workload_stats, zipf_token_counts, LengthDist, WorkloadStats,
    REFERENCE_BATCH, REFERENCE_MAX_LEN, REFERENCE_VALID,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ColumnMap;
use crate::error::{bail, ensure, Error, Result};
use crate::hsp::ClusterTopology;
use crate::pipeline::RatioTarget;
use crate::toy::{ToyConfig, ToyTaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 2, head_dim: 16, layers: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub lengths: LengthDist,
    pub num_tables: usize,
    pub table_rows: usize,
    /// Item pool for negative sampling.
    pub pool_size: u64,
    /// Cores for the grouped lookup.
    pub num_cores: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_len: 256,
            lengths: LengthDist::Zipf { exponent: 1.2 },
            num_tables: 4,
            table_rows: 10_000,
            pool_size: 10_000,
            num_cores: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub num_negatives: usize,
    pub share_k: usize,
    pub temperature: f64,
    pub segment_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { num_negatives: 128, share_k: 4, temperature: 0.05, segment_size: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeFlags {
    pub semi_async: bool,
    pub hsp: bool,
    pub reallocate: bool,
    pub fp16_neg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub num_workers: usize,
    pub global_batch: usize,
    /// Token counts are drawn from `Zipf(max_tokens, zipf_exponent)`.
    pub max_tokens: u64,
    pub zipf_exponent: f64,
    /// Cost-model seconds per token.
    pub per_token_cost: f64,
    pub fixed_overhead: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            num_workers: 16,
            global_batch: 1024,
            max_tokens: 4096,
            zipf_exponent: 1.2,
            per_token_cost: 1e-6,
            fixed_overhead: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HspBenchConfig {
    pub steps: usize,
    /// Group counts to compare; each must divide `topology.num_devices`.
    pub groups: Vec<usize>,
    pub num_tables: usize,
    pub table_rows: usize,
    pub samples_per_device: usize,
    pub max_ids_per_sample: usize,
    pub zipf_exponent: f64,
    pub dim: usize,
    pub lr: f64,
}

impl Default for HspBenchConfig {
    fn default() -> Self {
        Self { steps: 10, groups: vec![1, 2, 4, 8], num_tables: 16, table_rows: 1000, samples_per_device: 32, max_ids_per_sample: 8, zipf_exponent: 1.1, dim: 16, lr: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiAsyncBenchConfig {
    pub tau: usize,
    /// Window for the collision estimate.
    pub alpha_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for SemiAsyncBenchConfig {
    fn default() -> Self {
        Self { tau: 1, alpha_window: 1, c1: 1.0, c2: 1.0, c3: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineBenchConfig {
    pub num_batches: usize,
    pub depth: usize,
    pub dense_ms: f64,
    pub target: RatioTarget,
    /// Allowed gap between simulated and target ratios, in percentage points.
    pub tolerance_pp: f64,
}

impl Default for PipelineBenchConfig {
    fn default() -> Self {
        Self {
            num_batches: 16,
            depth: 6,
            dense_ms: 1712.0,
            target: RatioTarget { computing: 0.9429, not_overlapped: 0.0539, free: 0.0033 },
            tolerance_pp: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBenchConfig {
    pub task: ToyTaskConfig,
    pub train: ToyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Delimited interaction log; required by the `preprocess` experiment.
    pub input: Option<PathBuf>,
    pub columns: ColumnMap,
    pub core: usize,
    /// Sequence file written next to the reports.
    pub sequence_file: String,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { input: None, columns: ColumnMap::default(), core: 5, sequence_file: "sequences.txt".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
    pub topology: ClusterTopology,
    pub sampling: SamplingConfig,
    pub modes: ModeFlags,
    pub balance: BalanceConfig,
    pub hsp: HspBenchConfig,
    pub semi_async: SemiAsyncBenchConfig,
    pub pipeline: PipelineBenchConfig,
    pub toy: ToyBenchConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("reports"),
            model: ModelConfig::default(),
            workload: WorkloadConfig::default(),
            topology: ClusterTopology::default(),
            sampling: SamplingConfig::default(),
            modes: ModeFlags::default(),
            balance: BalanceConfig::default(),
            hsp: HspBenchConfig::default(),
            semi_async: SemiAsyncBenchConfig::default(),
            pipeline: PipelineBenchConfig::default(),
            toy: ToyBenchConfig { task: ToyTaskConfig::default(), train: ToyConfig { steps: 1000, ..ToyConfig::default() } },
            preprocess: PreprocessConfig::default(),
        }
    }
}

/// Overrides the seed.
pub const ENV_SEED: &str = "JAGREC_SEED";
/// Overrides the output directory.
pub const ENV_OUT_DIR: &str = "JAGREC_OUT_DIR";

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Applies [`ENV_SEED`] and [`ENV_OUT_DIR`] from `lookup`.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = lookup(ENV_SEED) {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("{ENV_SEED}={s} is not a u64")))?;
        }
        if let Some(d) = lookup(ENV_OUT_DIR) {
            self.out_dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_with(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        ensure!(m.dim >= 1 && m.heads >= 1 && m.head_dim >= 1 && m.layers >= 1, Config, "model sizes must be positive");
        let w = &self.workload;
        ensure!(w.batch_size >= 1 && w.num_tables >= 1 && w.table_rows >= 1, Config, "workload sizes must be positive");
        ensure!(w.pool_size >= 1 && w.num_cores >= 1, Config, "pool size and core count must be positive");
        w.lengths.validate(w.max_len)?;
        self.topology.validate()?;
        let s = &self.sampling;
        ensure!(s.num_negatives >= 1 && s.share_k >= 1 && s.segment_size >= 1, Config, "sampling sizes must be positive");
        ensure!(s.temperature > 0.0, Config, "temperature must be positive");
        let b = &self.balance;
        ensure!(b.num_workers >= 1 && b.global_batch >= 1 && b.max_tokens >= 1, Config, "balance sizes must be positive");
        ensure!(b.zipf_exponent > 0.0, Config, "balance Zipf exponent must be positive");
        ensure!(b.per_token_cost > 0.0 && b.fixed_overhead >= 0.0, Config, "balance costs must be positive");
        let h = &self.hsp;
        ensure!(h.steps >= 1 && !h.groups.is_empty() && h.dim >= 1, Config, "hsp needs steps, groups and dim");
        ensure!(h.num_tables >= 1 && h.table_rows >= 1 && h.lr > 0.0, Config, "hsp tables and learning rate must be positive");
        for &g in &h.groups {
            ClusterTopology { num_groups: g, ..self.topology }.validate()?;
        }
        ensure!(h.zipf_exponent > 0.0 && h.samples_per_device >= 1 && h.max_ids_per_sample >= 1, Config, "hsp workload must be non-empty");
        let sa = &self.semi_async;
        ensure!(sa.tau >= 1 && sa.alpha_window >= 1, Config, "semi-async needs tau >= 1 and alpha_window >= 1");
        ensure!([sa.c1, sa.c2, sa.c3].iter().all(|c| *c >= 0.0), Config, "bound constants must be non-negative");
        let p = &self.pipeline;
        ensure!(p.num_batches >= 1 && p.depth >= 1 && p.dense_ms > 0.0 && p.tolerance_pp >= 0.0, Config, "pipeline settings must be positive");
        let t = &p.target;
        ensure!(
            [t.computing, t.not_overlapped, t.free].iter().all(|x| (0.0..=1.0).contains(x))
                && (t.computing + t.not_overlapped + t.free - 1.0).abs() < 1e-3,
            Config,
            "pipeline target ratios must be fractions summing to one"
        );
        self.toy.task.validate()?;
        self.toy.train.validate()?;
        ensure!(self.preprocess.core >= 1, Config, "core threshold must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExperimentKind {
    Jagged,
    Lookup,
    Balance,
    Hsp,
    SemiAsync,
    Pipeline,
    Negsample,
    TrainToy,
    Preprocess,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Jagged,
        ExperimentKind::Lookup,
        ExperimentKind::Balance,
        ExperimentKind::Hsp,
        ExperimentKind::SemiAsync,
        ExperimentKind::Pipeline,
        ExperimentKind::Negsample,
        ExperimentKind::TrainToy,
        ExperimentKind::Preprocess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Jagged => "jagged",
            ExperimentKind::Lookup => "lookup",
            ExperimentKind::Balance => "balance",
            ExperimentKind::Hsp => "hsp",
            ExperimentKind::SemiAsync => "semi_async",
            ExperimentKind::Pipeline => "pipeline",
            ExperimentKind::Negsample => "negsample",
            ExperimentKind::TrainToy => "train_toy",
            ExperimentKind::Preprocess => "preprocess",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    /// Accepts both `semi_async` and `semi-async` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        match Self::ALL.iter().find(|k| k.as_str() == norm) {
            Some(&k) => Ok(k),
            None => bail!(Config, "unknown experiment `{s}`"),
        }
    }
}

/// A named pass/fail assertion evaluated by an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width must match the column set");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell parsed as `f64`.
    pub fn value(&self, row: usize, column: &str) -> Option<f64> {
        self.rows.get(row)?.get(self.column(column)?)?.parse().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    Csv,
    Md,
    #[default]
    Both,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Md),
            "both" => Ok(Format::Both),
            _ => bail!(Config, "unknown format `{s}` (csv, md or both)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub kind: String,
    /// `counter` or `model`: how latency-like columns were obtained.
    pub basis: &'static str,
    pub config_toml: String,
    pub table: ReportTable,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("# experiment: {}\n# basis: {}\n", self.kind, self.basis);
        for line in self.config_toml.lines() {
            out.push_str(&format!("# {line}\n"));
        }
        for line in self.check_lines() {
            out.push_str(&format!("# {line}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.table.columns)?;
        for row in &self.table.rows {
            w.write_record(row)?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
        Ok(out)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {}\n\nBasis: {}.\n\n", self.kind, self.basis);
        out.push_str(&format!("| {} |\n", self.table.columns.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(self.table.columns.len())));
        for row in &self.table.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out.push('\n');
        for line in self.check_lines() {
            out.push_str(&format!("- {line}\n"));
        }
        out
    }

    /// Writes `<kind>.csv` and/or `<kind>.md` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, format: Format) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        if format != Format::Md {
            let p = dir.join(format!("{}.csv", self.kind));
            std::fs::write(&p, self.to_csv()?)?;
            written.push(p);
        }
        if format != Format::Csv {
            let p = dir.join(format!("{}.md", self.kind));
            std::fs::write(&p, self.to_markdown())?;
            written.push(p);
        }
        Ok(written)
    }
}
