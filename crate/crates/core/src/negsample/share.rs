use rand::seq::{index, SliceRandom};

use crate::error::{ensure, Result};
use crate::jagged::Scalar;

/// Where an expanded candidate comes from: negative `slot` of `token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Source {
    pub token: usize,
    pub slot: usize,
}

/// Per-token candidate sets of size `k·R`: the token's own `R` negatives plus
/// `(k−1)·R` negatives drawn without replacement from the other tokens, in a
/// per-token shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharePlan {
    pub num_tokens: usize,
    pub r: usize,
    pub k: usize,
    /// `num_tokens × k·R`, row-major.
    pub sources: Vec<Source>,
}

impl SharePlan {
    pub fn width(&self) -> usize {
        self.k * self.r
    }

    pub fn token(&self, i: usize) -> &[Source] {
        &self.sources[i * self.width()..(i + 1) * self.width()]
    }

    /// Embedding rows the plan reads: always the `T·R` sampled negatives.
    pub fn lookups(&self) -> usize {
        self.num_tokens * self.r
    }
}

pub fn plan_sharing(num_tokens: usize, r: usize, k: usize, seed: u64) -> Result<SharePlan> {
    ensure!(r >= 1 && k >= 1, Validation, "R and k must be at least 1");
    ensure!(k == 1 || num_tokens >= 2, Validation, "sharing with k={k} needs at least two tokens");
    ensure!(k <= num_tokens.max(1), Validation, "k={k} asks for more auxiliaries than {} other tokens hold", num_tokens.saturating_sub(1));
    let aux = (k - 1) * r;
    let mut sources = Vec::with_capacity(num_tokens * k * r);
    for i in 0..num_tokens {
        let mut rng = crate::rng::stream(seed, &[i as u64]);
        let mut set: Vec<Source> = (0..r).map(|slot| Source { token: i, slot }).collect();
        if aux > 0 {
            for idx in index::sample(&mut rng, (num_tokens - 1) * r, aux) {
                let other = idx / r;
                set.push(Source { token: if other >= i { other + 1 } else { other }, slot: idx % r });
            }
        }
        set.shuffle(&mut rng);
        sources.extend(set);
    }
    Ok(SharePlan { num_tokens, r, k, sources })
}

/// Expands each token's `R` logits to `k·R` by reusing logit values already
/// computed for other tokens.
pub fn share_logits<T: Scalar>(self_logits: &[T], r: usize, k: usize, seed: u64) -> Result<(Vec<T>, SharePlan)> {
    ensure!(r >= 1 && self_logits.len() % r == 0, Shape, "{} logits do not split into rows of {r}", self_logits.len());
    let plan = plan_sharing(self_logits.len() / r, r, k, seed)?;
    let out = plan.sources.iter().map(|s| self_logits[s.token * r + s.slot]).collect();
    Ok((out, plan))
}

/// Scores every planned candidate against the token's own output:
/// `⟨o_i, n_{source}⟩`. Uses only the already-fetched negative embeddings.
pub fn cross_token_logits<T: Scalar>(plan: &SharePlan, output: &[T], neg: &[T], d: usize) -> Result<Vec<T>> {
    ensure!(output.len() == plan.num_tokens * d, Shape, "output holds {} values, plan wants {} x {d}", output.len(), plan.num_tokens);
    ensure!(neg.len() == plan.num_tokens * plan.r * d, Shape, "negative embeddings do not match the plan");
    let mut out = Vec::with_capacity(plan.sources.len());
    for i in 0..plan.num_tokens {
        let o = &output[i * d..(i + 1) * d];
        for s in plan.token(i) {
            let n = &neg[(s.token * plan.r + s.slot) * d..(s.token * plan.r + s.slot + 1) * d];
            out.push(o.iter().zip(n).fold(T::zero(), |acc, (&a, &b)| acc + a * b));
        }
    }
    Ok(out)
}
