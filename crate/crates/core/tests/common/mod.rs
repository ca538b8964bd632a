//! Reference implementations written from the definitions, independent of
//! the library code paths they are compared against.
#![allow(dead_code)]

use jagrec::embedding::KeyedJaggedTensor;
use jagrec::jagged::{compute_rab, jagged_attention, AttentionConfig, AttentionStats, RabSpec};
use jagrec::pipeline::{PipelineTimeline, Resource};
use jagrec::{JaggedTensor, Scalar};
use rand::Rng;

/// Log2 time bucket: 0 for a zero delta, else `1 + floor(log2 |dt|)`, capped.
pub fn time_bucket(dt: i64, buckets: usize) -> usize {
    if dt == 0 {
        0
    } else {
        (1 + dt.unsigned_abs().ilog2() as usize).min(buckets - 1)
    }
}

pub fn rab(rtb: &[f64], rpb: &[f64], tq: i64, tk: i64, qpos: usize, kpos: usize) -> f64 {
    let p = (rpb.len() / 2) as i64;
    let rel = (kpos as i64 - qpos as i64).clamp(-p, p);
    rtb[time_bucket(tq - tk, rtb.len())] + rpb[(rel + p) as usize]
}

pub struct AttnCase {
    pub lengths: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub ts: Vec<i64>,
    pub rtb: Vec<f64>,
    pub rpb: Vec<f64>,
}

impl AttnCase {
    pub fn random(rng: &mut impl Rng, max_b: usize, max_l: usize, max_width: usize, heads: (usize, usize)) -> Self {
        let b = rng.random_range(1..=max_b);
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(0..=max_l)).collect();
        let h = rng.random_range(heads.0..=heads.1);
        let head_dim = rng.random_range(1..=(max_width / h).max(1));
        let total: usize = lengths.iter().sum();
        let width = h * head_dim;
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (q, k, v) = (draw(total * width), draw(total * width), draw(total * width));
        let mut ts = Vec::with_capacity(total);
        for &l in &lengths {
            let mut t = rng.random_range(0..1000i64);
            for _ in 0..l {
                t += rng.random_range(0..4000);
                ts.push(t);
            }
        }
        let buckets = rng.random_range(1..=24);
        let p = rng.random_range(1..=20);
        let rtb = (0..buckets).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rpb = (0..2 * p + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { lengths, heads: h, head_dim, causal: rng.random_bool(0.5), q, k, v, ts, rtb, rpb }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Pads every row to the longest, builds a boolean mask and a full bias
    /// matrix, and runs masked softmax attention over the padded block.
    pub fn dense_oracle(&self) -> Vec<f64> {
        let (w, hd) = (self.width(), self.head_dim);
        let lmax = self.lengths.iter().copied().max().unwrap_or(0);
        let mut out = Vec::new();
        let mut start = 0;
        for &len in &self.lengths {
            let at = |x: &[f64], t: usize, c: usize| if t < len { x[(start + t) * w + c] } else { 0.0 };
            let mask = |a: usize, b: usize| a < len && b < len && (!self.causal || b <= a);
            for a in 0..len {
                let mut row = vec![0.0; w];
                for h in 0..self.heads {
                    let scores: Vec<f64> = (0..lmax)
                        .map(|b| {
                            if !mask(a, b) {
                                return f64::NEG_INFINITY;
                            }
                            let dot: f64 = (0..hd).map(|x| at(&self.q, a, h * hd + x) * at(&self.k, b, h * hd + x)).sum();
                            dot / (hd as f64).sqrt() + rab(&self.rtb, &self.rpb, self.ts[start + a], self.ts[start + b], a, b)
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (b, s) in scores.iter().enumerate() {
                        let p = (s - m).exp() / z;
                        for x in 0..hd {
                            row[h * hd + x] += p * at(&self.v, b, h * hd + x);
                        }
                    }
                }
                out.extend(row);
            }
            start += len;
        }
        out
    }

    /// Runs the library path at precision `T`, returning values as `f64`.
    pub fn run_jagged<T: Scalar>(&self) -> jagrec::Result<(Vec<f64>, AttentionStats)> {
        let cast = |x: &[f64]| x.iter().map(|&v| T::from(v).unwrap()).collect::<Vec<T>>();
        let jt = |x: &[f64]| JaggedTensor::from_lengths(cast(x), &self.lengths, self.width());
        let (q, k, v) = (jt(&self.q)?, jt(&self.k)?, jt(&self.v)?);
        let ts = JaggedTensor::from_lengths(self.ts.clone(), &self.lengths, 1)?;
        let bias = compute_rab(&ts, &RabSpec::new(cast(&self.rtb), cast(&self.rpb))?)?;
        let cfg = AttentionConfig { num_heads: self.heads, head_dim: self.head_dim, causal: self.causal };
        let (out, stats) = jagged_attention(&q, &k, &v, Some(&bias), &cfg)?;
        Ok((out.values().iter().map(|x| x.to_f64().unwrap()).collect(), stats))
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_kjt(rng: &mut impl Rng, max_keys: usize, max_batch: usize, max_len: usize, rows: u64) -> KeyedJaggedTensor {
    let keys = rng.random_range(1..=max_keys);
    let b = rng.random_range(0..=max_batch);
    let lengths: Vec<usize> = (0..keys * b).map(|_| rng.random_range(0..=max_len)).collect();
    let values = (0..lengths.iter().sum::<usize>()).map(|_| rng.random_range(0..rows)).collect();
    KeyedJaggedTensor::new((0..keys).map(|k| format!("t{k}")).collect(), b, lengths, values).unwrap()
}

/// Checks a timeline against the pipeline rules directly: one event per
/// (batch, stage) with the right duration, no overlap on a resource, stages
/// of a batch in order, at most `depth` batches in flight, and embedding
/// reads no staler than the mode allows.
pub fn schedule_violations(t: &PipelineTimeline, durations: &[f64; 6]) -> Vec<String> {
    const EPS: f64 = 1e-9;
    let mut bad = Vec::new();
    if t.events.len() != t.num_batches * 6 {
        bad.push(format!("{} events for {} batches", t.events.len(), t.num_batches));
        return bad;
    }
    let ev = |b: usize, s: usize| &t.events[b * 6 + s];
    for b in 0..t.num_batches {
        for s in 0..6 {
            let e = ev(b, s);
            if e.batch != b || (e.end - e.start - durations[s]).abs() > EPS || e.start < -EPS {
                bad.push(format!("batch {b} stage {s} has wrong identity or duration"));
            }
            if s > 0 && e.start + EPS < ev(b, s - 1).end {
                bad.push(format!("batch {b} stage {s} starts before stage {}", s - 1));
            }
        }
        if b >= t.depth && ev(b, 0).start + EPS < ev(b - t.depth, 5).end {
            bad.push(format!("batch {b} starts with more than {} in flight", t.depth));
        }
        // Embedding forward of batch b reads the table after batch b-1-tau's backward.
        let lag = if t.semi_async { 2 } else { 1 };
        if b >= lag && ev(b, 3).start + EPS < ev(b - lag, 5).end {
            bad.push(format!("batch {b} reads embeddings before batch {} wrote them", b - lag));
        }
    }
    for r in [Resource::Host, Resource::DeviceCompute, Resource::DeviceComm] {
        let mut iv: Vec<(f64, f64)> =
            t.events.iter().filter(|e| e.resource == r && e.end > e.start).map(|e| (e.start, e.end)).collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        if iv.windows(2).any(|w| w[1].0 + EPS < w[0].1) {
            bad.push(format!("{} runs two events at once", r.as_str()));
        }
    }
    bad
}

pub fn hr_oracle(ranked: &[Vec<u64>], truth: &[u64], k: usize) -> f64 {
    let mut hits = 0;
    for (r, t) in ranked.iter().zip(truth) {
        for (i, x) in r.iter().enumerate() {
            if i < k && x == t {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / truth.len() as f64
}

pub fn ndcg_oracle(ranked: &[Vec<u64>], truth: &[u64], k: usize) -> f64 {
    let mut sum = 0.0;
    for (r, t) in ranked.iter().zip(truth) {
        for (i, x) in r.iter().enumerate() {
            if i < k && x == t {
                sum += 1.0 / ((i + 2) as f64).log2();
                break;
            }
        }
    }
    sum / truth.len() as f64
}

/// Stage durations with occasional zeros and a wide spread of scales.
pub fn random_stage_ms(rng: &mut impl Rng) -> [f64; 6] {
    std::array::from_fn(|_| if rng.random_bool(0.1) { 0.0 } else { 10f64.powf(rng.random_range(-1.0..2.0)) })
}
