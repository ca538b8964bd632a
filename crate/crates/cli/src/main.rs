use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use jagrec::bench::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport, Format};

#[derive(Parser)]
#[command(name = "jagrec", version, about = "Run jagrec experiments and write CSV/markdown reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Jagged vs padded attention: score elements and oracle error.
    Jagged(Common),
    /// Jagged, padded and per-core grouped embedding lookups.
    Lookup(Common),
    /// Fixed-count vs token-reallocated worker loads.
    Balance(Common),
    /// Hierarchical sparse parallelism across group counts.
    Hsp(Common),
    /// Sync vs semi-async training on the toy task, with the bound.
    SemiAsync(Common),
    /// Calibrated pipeline utilization in both modes.
    Pipeline(Common),
    /// Negative-sample memory, segmentation and sharing checks.
    Negsample(Common),
    /// Toy model training curve.
    TrainToy(Common),
    /// Filter a raw interaction log and write user sequences.
    Preprocess(Common),
    /// Every experiment, plus a combined `report.md`.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run experiments concurrently; each report is unchanged.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
    Both,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and JAGREC_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory (and JAGREC_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    format: FormatArg,
}

impl Common {
    fn resolve(&self) -> jagrec::Result<(ExperimentConfig, Format)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        let format = match self.format {
            FormatArg::Csv => Format::Csv,
            FormatArg::Md => Format::Md,
            FormatArg::Both => Format::Both,
        };
        Ok((cfg, format))
    }
}

fn emit(report: &ExperimentReport, cfg: &ExperimentConfig, format: Format) -> jagrec::Result<bool> {
    for path in report.write(&cfg.out_dir, format)? {
        println!("wrote {}", path.display());
    }
    for c in &report.checks {
        println!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, report.kind, c.name, c.detail);
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> jagrec::Result<bool> {
    let (common, kind) = match &cli.command {
        Command::Jagged(c) => (c, ExperimentKind::Jagged),
        Command::Lookup(c) => (c, ExperimentKind::Lookup),
        Command::Balance(c) => (c, ExperimentKind::Balance),
        Command::Hsp(c) => (c, ExperimentKind::Hsp),
        Command::SemiAsync(c) => (c, ExperimentKind::SemiAsync),
        Command::Pipeline(c) => (c, ExperimentKind::Pipeline),
        Command::Negsample(c) => (c, ExperimentKind::Negsample),
        Command::TrainToy(c) => (c, ExperimentKind::TrainToy),
        Command::Preprocess(c) => (c, ExperimentKind::Preprocess),
        Command::Report { common, parallel } => {
            let (cfg, format) = common.resolve()?;
            // Preprocessing needs a real log, so it only joins when one is configured.
            let kinds: Vec<_> = ExperimentKind::ALL
                .into_iter()
                .filter(|k| *k != ExperimentKind::Preprocess || cfg.preprocess.input.is_some())
                .collect();
            let reports: Vec<_> = if *parallel {
                kinds.par_iter().map(|&k| run_experiment(&cfg, k)).collect::<jagrec::Result<_>>()?
            } else {
                kinds.iter().map(|&k| run_experiment(&cfg, k)).collect::<jagrec::Result<_>>()?
            };
            let mut ok = true;
            let mut combined = String::from("# jagrec report\n\n");
            for r in &reports {
                ok &= emit(r, &cfg, format)?;
                combined.push_str(&r.to_markdown());
                combined.push('\n');
            }
            let path = cfg.out_dir.join("report.md");
            std::fs::write(&path, combined)?;
            println!("wrote {}", path.display());
            return Ok(ok);
        }
    };
    let (cfg, format) = common.resolve()?;
    let report = run_experiment(&cfg, kind)?;
    emit(&report, &cfg, format)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
