use serde::Serialize;

use crate::error::{ensure, Result};
use crate::jagged::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NegMemory {
    /// Device bytes when every token's negative embeddings stay resident.
    pub full_bytes: u64,
    /// Device bytes with segmented offloading: the live segment buffers plus
    /// the `B·L·R` logit tensor.
    pub offloaded_peak_bytes: u64,
}

/// `full = B·L·D·R·bytes`; offloaded peak uses two buffers of
/// `segment_size` tokens, or one buffer when a single segment covers all
/// `B·L` tokens.
pub fn neg_memory_model(b: u64, l: u64, d: u64, r: u64, bytes_per_elem: u64, segment_size: u64) -> Result<NegMemory> {
    ensure!(
        [b, l, d, r, bytes_per_elem, segment_size].iter().all(|&x| x > 0),
        Validation,
        "memory model inputs must be positive"
    );
    let tokens = b * l;
    let seg = segment_size.min(tokens);
    let buffers = tokens.div_ceil(seg).min(2);
    Ok(NegMemory {
        full_bytes: tokens * d * r * bytes_per_elem,
        offloaded_peak_bytes: buffers * seg * r * d * bytes_per_elem + tokens * r * bytes_per_elem,
    })
}

/// Contiguous split of `[0, t_valid)` into segments of `segment_size` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPlan {
    pub segment_size: usize,
    pub t_valid: usize,
}

impl SegmentPlan {
    pub fn new(segment_size: usize, t_valid: usize) -> Result<Self> {
        ensure!(segment_size >= 1, Validation, "segment size must be at least 1");
        Ok(Self { segment_size, t_valid })
    }

    pub fn num_segments(&self) -> usize {
        self.t_valid.div_ceil(self.segment_size)
    }

    pub fn segment(&self, s: usize) -> std::ops::Range<usize> {
        let a = s * self.segment_size;
        a..(a + self.segment_size).min(self.t_valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transfer {
    pub segment: usize,
    /// Which of the two device buffers received it.
    pub buffer: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct OffloadStats {
    /// Peak bytes of negative embeddings resident on the device.
    pub high_water_bytes: u64,
    /// Host-to-device copies in issue order.
    pub transfers: Vec<Transfer>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `logits[p][j] = ⟨output[p], neg[p][j]⟩` over all tokens at once.
pub fn monolithic_logits<T: Scalar>(output: &[T], neg: &[T], r: usize, d: usize) -> Result<Vec<T>> {
    check_shapes(output, neg, r, d)?;
    Ok(logits_for(output, neg, r, d, 0..output.len() / d))
}

fn check_shapes<T>(output: &[T], neg: &[T], r: usize, d: usize) -> Result<()> {
    ensure!(r >= 1 && d >= 1, Validation, "R and D must be positive");
    ensure!(output.len() % d == 0, Shape, "output length {} is not a multiple of D={d}", output.len());
    ensure!(neg.len() == output.len() * r, Shape, "{} negative values for {} tokens x R={r} x D={d}", neg.len(), output.len() / d);
    Ok(())
}

fn logits_for<T: Scalar>(output: &[T], neg: &[T], r: usize, d: usize, tokens: std::ops::Range<usize>) -> Vec<T> {
    let first = tokens.start;
    let mut out = Vec::with_capacity(tokens.len() * r);
    for p in tokens {
        let o = &output[p * d..(p + 1) * d];
        for j in 0..r {
            let off = ((p - first) * r + j) * d;
            out.push(dot(o, &neg[off..off + d]));
        }
    }
    out
}

/// Same logits as [`monolithic_logits`], fetched segment by segment from the
/// host slice `neg_host`. Segment `s + 1` is copied into the idle buffer
/// before segment `s` is consumed, so at most two segments are resident.
pub fn segmented_logits<T: Scalar>(
    output: &[T],
    neg_host: &[T],
    r: usize,
    d: usize,
    segment_size: usize,
) -> Result<(Vec<T>, OffloadStats)> {
    check_shapes(output, neg_host, r, d)?;
    let plan = SegmentPlan::new(segment_size, output.len() / d)?;
    let elem = std::mem::size_of::<T>() as u64;
    let mut stats = OffloadStats::default();
    let mut buffers: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    let mut resident = 0u64;
    let fetch = |s: usize, buffers: &mut [Vec<T>; 2], resident: &mut u64, stats: &mut OffloadStats| {
        let range = plan.segment(s);
        let slot = s % 2;
        buffers[slot].clear();
        buffers[slot].extend_from_slice(&neg_host[range.start * r * d..range.end * r * d]);
        let bytes = buffers[slot].len() as u64 * elem;
        *resident += bytes;
        stats.high_water_bytes = stats.high_water_bytes.max(*resident);
        stats.transfers.push(Transfer { segment: s, buffer: slot, bytes });
    };
    let mut logits = Vec::with_capacity(plan.t_valid * r);
    if plan.num_segments() > 0 {
        fetch(0, &mut buffers, &mut resident, &mut stats);
    }
    for s in 0..plan.num_segments() {
        if s + 1 < plan.num_segments() {
            fetch(s + 1, &mut buffers, &mut resident, &mut stats);
        }
        let range = plan.segment(s);
        logits.extend(logits_for(output, &buffers[s % 2], r, d, range));
        resident -= buffers[s % 2].len() as u64 * elem;
        buffers[s % 2].clear();
    }
    Ok((logits, stats))
}
