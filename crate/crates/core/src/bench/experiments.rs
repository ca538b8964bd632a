use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use rand::Rng;

use super::{workload_stats, reference_batch, Check, ExperimentConfig, ExperimentKind, ExperimentReport, ReportTable, REFERENCE_MAX_LEN};
use crate::balance::{fixed_count_assign, global_token_reallocate, imbalance_report, samples_from_counts, SyncModel};
use crate::data;
use crate::embedding::{build_core_partition, lookup_grouped, lookup_jagged, lookup_padded, EmbeddingTable, KeyedJaggedTensor};
use crate::error::Result;
use crate::hsp::{all_to_all_latency, hsp_train, ClusterTopology, CommKind, HspConfig, IdWorkload};
use crate::jagged::{compute_rab, jagged_attention, AttentionConfig, JaggedTensor, RabSpec};
use crate::negsample::{monolithic_logits, neg_memory_model, plan_sharing, segmented_logits};
use crate::pipeline::{calibrate, check_timeline, build_schedule, utilization_report};
use crate::semi_async::{estimate_alpha, eval_bound, BoundParams, StalenessConfig};
use crate::toy::{train, ToyTask};

/// Shortest round-trip decimal, so ratio columns can be recomputed exactly.
fn num(x: f64) -> String {
    format!("{x}")
}

fn cells<const N: usize>(items: [String; N]) -> Vec<String> {
    items.into()
}

fn rel_gap(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Runs one experiment. Everything except `preprocess` is synthetic and
/// driven by `cfg.seed`; `preprocess` also writes its sequence file under
/// `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (basis, table, checks) = match kind {
        ExperimentKind::Jagged => jagged(cfg)?,
        ExperimentKind::Lookup => lookup(cfg)?,
        ExperimentKind::Balance => balance(cfg)?,
        ExperimentKind::Hsp => hsp(cfg)?,
        ExperimentKind::SemiAsync => semi_async(cfg)?,
        ExperimentKind::Pipeline => pipeline(cfg)?,
        ExperimentKind::Negsample => negsample(cfg)?,
        ExperimentKind::TrainToy => train_toy(cfg)?,
        ExperimentKind::Preprocess => preprocess(cfg)?,
    };
    Ok(ExperimentReport { kind: kind.as_str().to_string(), basis, config_toml: cfg.to_toml(), table, checks })
}

type Outcome = (&'static str, ReportTable, Vec<Check>);

fn sample_lengths(cfg: &ExperimentConfig, tag: u64) -> Result<Vec<usize>> {
    let w = &cfg.workload;
    w.lengths.sample(w.batch_size, w.max_len, &mut crate::rng::stream(cfg.seed, &[tag]))
}

fn random_jagged(lengths: &[usize], dim: usize, rng: &mut impl Rng) -> Result<JaggedTensor<f64>> {
    let n: usize = lengths.iter().sum::<usize>() * dim;
    JaggedTensor::from_lengths((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), lengths, dim)
}

/// Causal attention over a `B x Lmax` layout with padded keys masked out.
/// Materializes a full `Lmax x Lmax` score buffer for every row and head.
fn padded_attention(q: &JaggedTensor<f64>, k: &JaggedTensor<f64>, v: &JaggedTensor<f64>, ts: &JaggedTensor<i64>, spec: &RabSpec<f64>, heads: usize, hd: usize) -> Result<Vec<f64>> {
    let lmax = q.max_len();
    let width = heads * hd;
    let (dq, dk, dv) = (
        crate::jagged::jagged_to_dense(q, lmax, 0.0)?,
        crate::jagged::jagged_to_dense(k, lmax, 0.0)?,
        crate::jagged::jagged_to_dense(v, lmax, 0.0)?,
    );
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Vec::with_capacity(q.values().len());
    let mut scores = vec![0.0; lmax * lmax];
    for b in 0..q.num_rows() {
        let len = q.row_len(b);
        let t = ts.row(b);
        let mut row_out = vec![0.0; lmax * width];
        for h in 0..heads {
            let off = h * hd;
            for a in 0..lmax {
                for j in 0..lmax {
                    let valid = a < len && j < len && j <= a;
                    scores[a * lmax + j] = if valid {
                        let dot: f64 = (0..hd).map(|x| dq[[b, a, off + x]] * dk[[b, j, off + x]]).sum();
                        dot * scale + spec.bias(t[a], t[j], a, j)
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
            for a in 0..len {
                let row = &mut scores[a * lmax..(a + 1) * lmax];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|s| (s - max).exp()).sum();
                for j in 0..lmax {
                    let w = (row[j] - max).exp() / denom;
                    for x in 0..hd {
                        row_out[a * width + off + x] += w * dv[[b, j, off + x]];
                    }
                }
            }
        }
        out.extend_from_slice(&row_out[..len * width]);
    }
    Ok(out)
}

fn jagged(cfg: &ExperimentConfig) -> Result<Outcome> {
    let lengths = sample_lengths(cfg, 1)?;
    let (heads, hd) = (cfg.model.heads, cfg.model.head_dim);
    let mut rng = crate::rng::stream(cfg.seed, &[2]);
    let (q, k, v) = (
        random_jagged(&lengths, heads * hd, &mut rng)?,
        random_jagged(&lengths, heads * hd, &mut rng)?,
        random_jagged(&lengths, heads * hd, &mut rng)?,
    );
    let mut stamps = Vec::new();
    for &l in &lengths {
        let mut t = 0i64;
        for _ in 0..l {
            t += rng.random_range(0..5000);
            stamps.push(t);
        }
    }
    let ts = JaggedTensor::from_lengths(stamps, &lengths, 1)?;
    let pos = 16;
    let spec = RabSpec::new(
        (0..32).map(|_| rng.random_range(-0.5..0.5)).collect(),
        (0..2 * pos + 1).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )?;
    let rab = compute_rab(&ts, &spec)?;
    let attn = AttentionConfig { num_heads: heads, head_dim: hd, causal: true };
    let (out, stats) = jagged_attention(&q, &k, &v, Some(&rab), &attn)?;
    let reference = padded_attention(&q, &k, &v, &ts, &spec, heads, hd)?;
    let max_err = out.values().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let w = workload_stats(&lengths, cfg.workload.max_len)?;
    let lmax = q.max_len();
    let mut table = ReportTable::new(&[
        "layout", "sequences", "valid_tokens", "token_slots", "score_elements", "padded_score_elements", "score_fraction",
        "padding_ratio", "p50", "p90", "p99", "max_abs_err",
    ]);
    let sum_sq: usize = lengths.iter().map(|l| l * l).sum();
    let padded_scores = lengths.len() * lmax * lmax;
    for (layout, slots, scores, err) in [("padded", w.padded_slots, padded_scores, 0.0), ("jagged", w.valid_tokens, stats.score_elements, max_err)] {
        table.push(cells([
            layout.into(),
            w.num_sequences.to_string(),
            w.valid_tokens.to_string(),
            slots.to_string(),
            scores.to_string(),
            padded_scores.to_string(),
            num(scores as f64 / padded_scores.max(1) as f64),
            num(w.padding_ratio),
            w.p50.to_string(),
            w.p90.to_string(),
            w.p99.to_string(),
            num(err),
        ]));
    }
    let checks = vec![
        Check::new("jagged_matches_padded", max_err <= 1e-10, format!("max abs err {max_err:e} (limit 1e-10)")),
        Check::new("score_elements_sum_sq", stats.score_elements == sum_sq, format!("{} vs sum L^2 {sum_sq}", stats.score_elements)),
        Check::new("padded_score_elements", stats.padded_score_elements == padded_scores, format!("{} vs B*Lmax^2 {padded_scores}", stats.padded_score_elements)),
    ];
    Ok(("counter", table, checks))
}

/// One-table KJT with the given lengths and uniform IDs.
fn single_table_kjt(lengths: &[usize], rows: usize, rng: &mut impl Rng) -> Result<KeyedJaggedTensor> {
    let total: usize = lengths.iter().sum();
    let values = (0..total).map(|_| rng.random_range(0..rows as u64)).collect();
    KeyedJaggedTensor::new(vec!["t0".into()], lengths.len(), lengths.to_vec(), values)
}

fn lookup(cfg: &ExperimentConfig) -> Result<Outcome> {
    // Counters do not depend on the embedding width, so a narrow table keeps
    // the padded baseline's dense output small.
    const DIM: usize = 2;
    let w = &cfg.workload;
    let mut rng = crate::rng::stream(cfg.seed, &[3]);
    let mut table = ReportTable::new(&[
        "batch", "tables", "sequences", "max_len", "padded_indices", "jagged_indices", "pad_indices", "padding_ratio",
        "cores", "min_core_ids", "max_core_ids",
    ]);
    let mut checks = Vec::new();

    let mut cases = vec![("reference", reference_batch(), REFERENCE_MAX_LEN, 1)];
    cases.push(("workload", sample_lengths(cfg, 4)?, w.max_len, w.num_tables));
    for (name, lengths, max_len, num_tables) in cases {
        let b = lengths.len();
        let mut all_lengths = Vec::new();
        let mut values = Vec::new();
        let mut tables = Vec::new();
        for t in 0..num_tables {
            let kjt = single_table_kjt(&lengths, w.table_rows, &mut rng)?;
            all_lengths.extend_from_slice(kjt.lengths());
            values.extend_from_slice(kjt.values());
            tables.push(EmbeddingTable::<f32>::random(format!("t{t}"), w.table_rows, DIM, 0.1, &mut rng));
        }
        let keys = (0..num_tables).map(|t| format!("t{t}")).collect();
        let kjt = KeyedJaggedTensor::new(keys, b, all_lengths, values)?;
        let jag = lookup_jagged(&kjt, &tables)?;
        let (_, padded) = lookup_padded(&kjt, &tables, max_len)?;
        let plan = build_core_partition(&kjt, w.num_cores);
        let (grouped, work) = lookup_grouped(&kjt, &tables, &plan)?;
        let totals = plan.per_core_totals();
        let (jp, pp) = (jag.stats.total_processed, padded.total_processed);
        table.push(cells([
            name.into(),
            num_tables.to_string(),
            b.to_string(),
            max_len.to_string(),
            pp.to_string(),
            jp.to_string(),
            (pp - jp).to_string(),
            num((pp - jp) as f64 / pp as f64),
            w.num_cores.to_string(),
            totals.iter().min().unwrap().to_string(),
            totals.iter().max().unwrap().to_string(),
        ]));
        let valid: usize = lengths.iter().sum::<usize>() * num_tables;
        checks.push(Check::new(format!("{name}_jagged_indices"), jp == valid, format!("{jp} processed vs {valid} valid")));
        checks.push(Check::new(format!("{name}_padded_indices"), pp == b * max_len * num_tables, format!("{pp} processed")));
        let bits = |l: &crate::embedding::Lookup<f32>| l.per_key.iter().flat_map(|j| j.values().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        checks.push(Check::new(format!("{name}_grouped_bit_exact"), bits(&grouped) == bits(&jag), "grouped vs jagged lookup"));
        let spread = (0..num_tables)
            .map(|t| {
                let c: Vec<usize> = work.counts.iter().map(|core| core[t]).collect();
                c.iter().max().unwrap() - c.iter().min().unwrap()
            })
            .max()
            .unwrap_or(0);
        checks.push(Check::new(format!("{name}_core_spread"), spread <= 1, format!("largest per-table core spread {spread}")));
    }
    Ok(("counter", table, checks))
}

fn balance(cfg: &ExperimentConfig) -> Result<Outcome> {
    let b = &cfg.balance;
    let counts = crate::bench::zipf_token_counts(b.global_batch, b.max_tokens, b.zipf_exponent, cfg.seed)?;
    let samples = samples_from_counts(&counts)?;
    let sync = SyncModel { fixed_overhead: b.fixed_overhead };
    let fixed = imbalance_report(&fixed_count_assign(&samples, b.num_workers), b.per_token_cost, &sync)?;
    let realloc = imbalance_report(&global_token_reallocate(&samples, b.num_workers), b.per_token_cost, &sync)?;
    let mut table = ReportTable::new(&[
        "strategy", "selected", "max_load_tokens", "min_load_tokens", "max_token_diff", "imbalance_delay_model_ms",
        "step_latency_model_ms", "imbalance_ratio",
    ]);
    for (name, r, selected) in [("fixed_count", &fixed, !cfg.modes.reallocate), ("global_reallocate", &realloc, cfg.modes.reallocate)] {
        let (max, min) = (*r.loads.iter().max().unwrap(), *r.loads.iter().min().unwrap());
        let delay_ms = (max - min) as f64 * b.per_token_cost * 1e3;
        let latency_ms = max as f64 * b.per_token_cost * 1e3 + b.fixed_overhead * 1e3;
        table.push(cells([
            name.into(),
            selected.to_string(),
            max.to_string(),
            min.to_string(),
            r.max_token_diff.to_string(),
            num(delay_ms),
            num(latency_ms),
            num(if latency_ms > 0.0 { delay_ms / latency_ms } else { 0.0 }),
        ]));
    }
    let factor = fixed.max_token_diff as f64 / realloc.max_token_diff.max(1) as f64;
    let checks = vec![
        Check::new("diff_reduction_10x", factor >= 10.0, format!("{} -> {} ({factor:.1}x)", fixed.max_token_diff, realloc.max_token_diff)),
        Check::new("fixed_ratio_above_30pct", fixed.imbalance_ratio > 0.30, format!("{:.2}%", fixed.imbalance_ratio * 100.0)),
        Check::new("realloc_ratio_below_5pct", realloc.imbalance_ratio < 0.05, format!("{:.2}%", realloc.imbalance_ratio * 100.0)),
    ];
    Ok(("model", table, checks))
}

fn hsp(cfg: &ExperimentConfig) -> Result<Outcome> {
    let h = &cfg.hsp;
    let workload = IdWorkload {
        table_rows: vec![h.table_rows; h.num_tables],
        samples_per_device: h.samples_per_device,
        max_ids_per_sample: h.max_ids_per_sample,
        zipf_exponent: h.zipf_exponent,
        seed: cfg.seed,
    };
    let hcfg = HspConfig { dim: h.dim, lr: h.lr, seed: cfg.seed, ..HspConfig::default() };
    let mut table = ReportTable::new(&[
        "groups", "group_size", "all_to_all_bytes", "all_reduce_bytes", "all_to_all_model_ms", "all_to_all_model_ms_first",
        "all_to_all_reduction", "max_fan_out", "cross_group_messages", "fingerprints_match_first",
    ]);
    let mut checks = Vec::new();
    let mut first: Option<(Vec<u64>, f64, u64)> = None;
    for &m in &h.groups {
        let topo = ClusterTopology { num_groups: m, ..cfg.topology };
        let run = hsp_train(h.steps, &workload, &topo, &hcfg)?;
        let latency_ms = all_to_all_latency(&run.log, &topo) * 1e3;
        let bytes = run.log.all_to_all_bytes();
        let fan_out = (0..h.steps).flat_map(|s| run.log.all_to_all_fan_out(s, topo.num_devices)).max().unwrap_or(0);
        let cross = run.log.cross_group_all_to_all(&topo);
        let (fp0, lat0, bytes0) = first.get_or_insert_with(|| (run.fingerprints.clone(), latency_ms, bytes)).clone();
        let same = run.fingerprints == fp0;
        table.push(cells([
            m.to_string(),
            topo.group_size().to_string(),
            bytes.to_string(),
            run.log.total_bytes(CommKind::AllReduceGrad).to_string(),
            num(latency_ms),
            num(lat0),
            num(1.0 - latency_ms / lat0),
            fan_out.to_string(),
            cross.to_string(),
            same.to_string(),
        ]));
        checks.push(Check::new(format!("m{m}_matches_first"), same, "per-step replica fingerprints"));
        checks.push(Check::new(format!("m{m}_no_cross_group"), cross == 0, format!("{cross} cross-group all-to-all messages")));
        checks.push(Check::new(format!("m{m}_fan_out"), fan_out <= topo.group_size() - 1, format!("max fan-out {fan_out}, I-1 = {}", topo.group_size() - 1)));
        checks.push(Check::new(format!("m{m}_bytes_not_above_first"), bytes <= bytes0, format!("{bytes} vs {bytes0}")));
    }
    Ok(("model", table, checks))
}

fn semi_async(cfg: &ExperimentConfig) -> Result<Outcome> {
    let task = ToyTask::generate(&cfg.toy.task)?;
    let tcfg = cfg.toy.train;
    let tau = cfg.semi_async.tau;
    let sync = train(&task, &tcfg, &StalenessConfig::sync(), cfg.seed)?;
    let semi = train(&task, &tcfg, &StalenessConfig::semi_async(tau)?, cfg.seed)?;

    // Collision rate of the per-step global ID stream of the HSP workload.
    let h = &cfg.hsp;
    let workload = IdWorkload {
        table_rows: vec![h.table_rows],
        samples_per_device: h.samples_per_device,
        max_ids_per_sample: h.max_ids_per_sample,
        zipf_exponent: h.zipf_exponent,
        seed: cfg.seed,
    };
    let steps: Vec<Vec<u64>> = (0..h.steps.max(2))
        .map(|s| (0..cfg.topology.num_devices).flat_map(|d| workload.batch(s, d).values().to_vec()).collect())
        .collect();
    let alpha = estimate_alpha(&steps, cfg.semi_async.alpha_window)?.alpha;
    let sa = &cfg.semi_async;
    let bound = |tau: usize| {
        eval_bound(&BoundParams { l: 1.0, sigma: 1.0, t: tcfg.steps as f64, alpha, tau: tau as f64, c1: sa.c1, c2: sa.c2, c3: sa.c3 })
    };

    let mut table = ReportTable::new(&[
        "mode", "tau", "steps", "final_loss", "hr", "ndcg", "k", "reads_checked", "staleness_violations", "alpha", "bound",
    ]);
    for (mode, t, r) in [("sync", 0, &sync), ("semi_async", tau, &semi)] {
        table.push(cells([
            mode.into(),
            t.to_string(),
            tcfg.steps.to_string(),
            num(*r.losses.last().unwrap_or(&f64::NAN)),
            num(r.final_hr),
            num(r.final_ndcg),
            tcfg.k.to_string(),
            r.reads_checked.to_string(),
            r.staleness_violations.to_string(),
            num(alpha),
            num(bound(t)?),
        ]));
    }
    let gap = rel_gap(semi.final_hr, sync.final_hr);
    let checks = vec![
        Check::new("no_staleness_violations", semi.staleness_violations == 0 && sync.staleness_violations == 0, format!("{} reads checked", semi.reads_checked)),
        Check::new("hr_within_5pct", gap <= 0.05, format!("HR@{} {:.4} vs {:.4} ({:.2}%)", tcfg.k, semi.final_hr, sync.final_hr, gap * 100.0)),
    ];
    Ok(("counter", table, checks))
}

fn pipeline(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.pipeline;
    let cal = calibrate(p.target, p.dense_ms, p.num_batches, p.depth)?;
    let mut table = ReportTable::new(&[
        "mode", "batches", "makespan_model_ms", "computing_model_ms", "communication_model_ms", "not_overlapped_model_ms",
        "free_model_ms", "computing_ratio", "not_overlapped_ratio", "free_ratio",
    ]);
    let mut checks = Vec::new();
    let mut not_overlapped = Vec::new();
    for (mode, semi) in [("sync", false), ("semi_async", true)] {
        let timeline = build_schedule(&cal.stages, p.num_batches, p.depth, semi)?;
        let violations = check_timeline(&timeline);
        checks.push(Check::new(format!("{mode}_schedule_valid"), violations.is_empty(), violations.first().cloned().unwrap_or_else(|| "no violations".into())));
        let r = utilization_report(&timeline);
        table.push(cells([
            mode.into(),
            r.num_batches.to_string(),
            num(r.makespan),
            num(r.computing),
            num(r.communication),
            num(r.comm_not_overlapped),
            num(r.free),
            num(r.computing / r.makespan),
            num(r.comm_not_overlapped / r.makespan),
            num(r.free / r.makespan),
        ]));
        not_overlapped.push(r.not_overlapped_ratio());
        if semi {
            let tol = p.tolerance_pp / 100.0;
            for (name, got, want) in [
                ("computing", r.computing_ratio(), p.target.computing),
                ("not_overlapped", r.not_overlapped_ratio(), p.target.not_overlapped),
                ("free", r.free_ratio(), p.target.free),
            ] {
                let diff = (got - want).abs();
                checks.push(Check::new(
                    format!("{name}_within_tolerance"),
                    diff <= tol,
                    format!("{:.2}% vs target {:.2}% (|diff| {:.3}pp)", got * 100.0, want * 100.0, diff * 100.0),
                ));
            }
        }
    }
    checks.push(Check::new(
        "semi_async_unmasks_less",
        not_overlapped[1] <= not_overlapped[0],
        format!("not-overlapped {:.2}% sync vs {:.2}% semi-async", not_overlapped[0] * 100.0, not_overlapped[1] * 100.0),
    ));
    Ok(("model", table, checks))
}

fn negsample(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (w, s, d) = (&cfg.workload, &cfg.sampling, cfg.model.dim as u64);
    let seg = s.segment_size as u64;
    let mut table = ReportTable::new(&[
        "case", "batch", "seq_len", "dim", "negatives", "bytes_per_elem", "segment_size", "full_bytes", "offloaded_peak_bytes",
        "peak_fraction",
    ]);
    let reference = (8u64, 8192u64, 1024u64, 128u64, 4u64);
    let configured = (w.batch_size as u64, w.max_len as u64, d, s.num_negatives as u64, 4u64);
    let mut checks = Vec::new();
    for (case, (b, l, dd, r, bytes)) in [("reference", reference), ("configured", configured)] {
        let m = neg_memory_model(b, l, dd, r, bytes, seg)?;
        table.push(cells([
            case.into(),
            b.to_string(),
            l.to_string(),
            dd.to_string(),
            r.to_string(),
            bytes.to_string(),
            seg.to_string(),
            m.full_bytes.to_string(),
            m.offloaded_peak_bytes.to_string(),
            num(m.offloaded_peak_bytes as f64 / m.full_bytes as f64),
        ]));
        if case == "reference" {
            checks.push(Check::new("reference_full_bytes", m.full_bytes == 34_359_738_368, format!("{} bytes", m.full_bytes)));
        }
    }

    // Segmented and monolithic logits on one configured batch.
    let lengths = sample_lengths(cfg, 5)?;
    let t: usize = lengths.iter().sum();
    let (r, dim) = (s.num_negatives, cfg.model.dim);
    let mut rng = crate::rng::stream(cfg.seed, &[6]);
    let out: Vec<f32> = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<f32> = (0..t * r * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mono = monolithic_logits(&out, &neg, r, dim)?;
    let (segd, stats) = segmented_logits(&out, &neg, r, dim, s.segment_size)?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let cap = 2 * s.segment_size as u64 * r as u64 * dim as u64 * 4;
    checks.push(Check::new("segmented_bit_exact", bits(&segd) == bits(&mono), format!("{} logits", mono.len())));
    checks.push(Check::new("high_water_two_segments", stats.high_water_bytes <= cap, format!("{} <= {cap} bytes", stats.high_water_bytes)));
    let one = plan_sharing(t, r, 1, cfg.seed)?.lookups();
    let shared = plan_sharing(t, r, s.share_k, cfg.seed)?.lookups();
    checks.push(Check::new("sharing_adds_no_lookups", one == shared, format!("k=1: {one}, k={}: {shared}", s.share_k)));
    Ok(("model", table, checks))
}

fn train_toy(cfg: &ExperimentConfig) -> Result<Outcome> {
    let task = ToyTask::generate(&cfg.toy.task)?;
    let mut tcfg = cfg.toy.train;
    tcfg.fp16_neg |= cfg.modes.fp16_neg;
    let staleness = if cfg.modes.semi_async { StalenessConfig::semi_async(cfg.semi_async.tau)? } else { StalenessConfig::sync() };
    let report = train(&task, &tcfg, &staleness, cfg.seed)?;
    let mut table = ReportTable::new(&["step", "probe_loss", "probe_grad_norm_sq", "hr"]);
    for c in &report.checkpoints {
        table.push(cells([c.step.to_string(), num(c.loss), num(c.probe_grad_norm_sq), num(c.hr)]));
    }
    let finite = report.losses.iter().all(|l| l.is_finite());
    let (first, last) = (report.losses.first().copied().unwrap_or(0.0), report.losses.last().copied().unwrap_or(0.0));
    let checks = vec![
        Check::new("losses_finite", finite, format!("{} steps", report.losses.len())),
        Check::new("loss_decreases", last < first, format!("{first:.4} -> {last:.4}")),
        Check::new("no_staleness_violations", report.staleness_violations == 0, format!("{} reads checked", report.reads_checked)),
        Check::new("final_metrics", true, format!("HR@{k} {:.4}, NDCG@{k} {:.4}, {} lookups", report.final_hr, report.final_ndcg, report.lookups, k = tcfg.k)),
    ];
    Ok(("counter", table, checks))
}

fn log_counts(log: &data::InteractionLog) -> [String; 3] {
    let users: BTreeSet<u64> = log.records.iter().map(|r| r.user_id).collect();
    let items: BTreeSet<u64> = log.records.iter().map(|r| r.item_id).collect();
    [log.records.len().to_string(), users.len().to_string(), items.len().to_string()]
}

fn preprocess(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.preprocess;
    let Some(input) = &p.input else {
        crate::error::bail!(Config, "preprocess needs `preprocess.input`");
    };
    let raw = data::read_log(BufReader::new(File::open(input)?), &p.columns)?;
    let filtered = data::filter_interactions(&raw);
    let core = data::k_core_filter(&filtered, p.core);
    let again = data::k_core_filter(&core.log, p.core);
    let seqs = data::group_sequences(&core.log);

    let mut table = ReportTable::new(&["stage", "records", "users", "items", "skipped_rows"]);
    let push = |table: &mut ReportTable, stage: &str, log: &data::InteractionLog| {
        let [r, u, i] = log_counts(log);
        table.push(vec![stage.into(), r, u, i, log.skipped.to_string()]);
    };
    push(&mut table, "raw", &raw);
    push(&mut table, "filtered", &filtered);
    push(&mut table, &format!("{}_core", p.core), &core.log);

    let mut checks = vec![
        Check::new("core_filter_idempotent", again.log.records == core.log.records, format!("{} rounds to reach the fixed point", core.rounds)),
        Check::new("non_empty", !core.is_empty(), format!("{} records after filtering", core.log.records.len())),
    ];
    if !core.is_empty() {
        let split = data::leave_one_out_split(&seqs)?;
        let exhaustive = seqs.users.iter().all(|(u, s)| {
            split.train.get(u).map(|t| t.len() + 1) == Some(s.len()) && split.test.get(u) == s.last().map(|(i, _)| i)
        });
        checks.push(Check::new("split_disjoint_exhaustive", exhaustive && split.train.len() == seqs.users.len(), format!("{} users", split.test.len())));
        std::fs::create_dir_all(&cfg.out_dir)?;
        let mut out = BufWriter::new(File::create(cfg.out_dir.join(&p.sequence_file))?);
        data::write_sequence_file(&seqs, &mut out)?;
        out.flush()?;
    }
    Ok(("counter", table, checks))
}
