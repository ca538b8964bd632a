use std::io::Write;

use crate::error::{bail, ensure, Result};
use crate::jagged::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Gradients with respect to the raw scores, before division by `τ`.
    pub d_pos: T,
    pub d_neg: Vec<T>,
    pub d_aux: Vec<T>,
}

/// `−log(exp(l⁺) / (exp(l⁺) + Σ exp(l⁻) + Σ exp(l_aux)))` with every
/// `l = score/τ`. An empty `aux` is the plain sampled softmax.
pub fn sampled_softmax_loss<T: Scalar>(pos: T, neg: &[T], aux: &[T], tau: T) -> Result<LossOutput<T>> {
    ensure!(tau > T::zero() && tau.is_finite(), Validation, "temperature must be positive");
    let all = || std::iter::once(&pos).chain(neg).chain(aux);
    ensure!(all().all(|x| !x.is_nan() && *x != T::infinity()), Numerical, "scores must be finite or -inf");
    let m = all().fold(T::neg_infinity(), |a, &x| a.max(x / tau));
    if m == T::neg_infinity() {
        bail!(Numerical, "every score is -inf");
    }
    let e = |s: T| (s / tau - m).exp();
    let z = all().fold(T::zero(), |acc, &s| acc + e(s));
    let loss = m + z.ln() - pos / tau;
    let grad = |s: T| e(s) / z / tau;
    Ok(LossOutput {
        loss,
        d_pos: grad(pos) - T::one() / tau,
        d_neg: neg.iter().map(|&s| grad(s)).collect(),
        d_aux: aux.iter().map(|&s| grad(s)).collect(),
    })
}

/// One CSV row per token: loss, positive gradient and `;`-joined negative and
/// auxiliary gradients.
pub fn write_loss_dump(rows: &[LossOutput<f64>], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["token", "loss", "d_pos", "d_neg", "d_aux"])?;
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";");
    for (i, r) in rows.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:e}", r.loss), format!("{:e}", r.d_pos), join(&r.d_neg), join(&r.d_aux)])?;
    }
    w.flush()?;
    Ok(())
}
