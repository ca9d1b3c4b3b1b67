use super::model::Output;
use super::real::Real;
use crate::error::{Error, Result};
use crate::preproc::PointTarget;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub cross_entropy: T,
    pub regression: T,
    /// d value / d logits, `[n][4]`.
    pub d_logits: Vec<T>,
    /// d value / d votes, `[n][2]`.
    pub d_votes: Vec<T>,
}

/// Mean cross-entropy over all points plus `vote_weight` times the mean
/// squared euclidean vote error over foreground points.
pub fn loss<T: Real>(out: &Output<T>, targets: &[PointTarget], vote_weight: f64) -> Result<LossOutput<T>> {
    let n = out.n;
    if n == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} predictions",
            targets.len()
        )));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let n_fg = targets.iter().filter(|t| t.has_vote).count();
    let mut ce = T::zero();
    let mut d_logits = vec![T::zero(); n * 4];
    for (s, t) in targets.iter().enumerate() {
        let label = t.class_label.index();
        let row = &out.logits[s * 4..s * 4 + 4];
        // log-sum-exp for a stable log-probability
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        ce = ce + (lse - row[label]);
        for k in 0..4 {
            let y = if k == label { T::one() } else { T::zero() };
            d_logits[s * 4 + k] = (out.probs[s * 4 + k] - y) * inv_n;
        }
    }
    ce = ce * inv_n;

    let mut reg = T::zero();
    let mut d_votes = vec![T::zero(); n * 2];
    if n_fg > 0 {
        let w = T::lit(vote_weight);
        let inv_fg = T::lit(1.0 / n_fg as f64);
        let two = T::lit(2.0);
        for (s, t) in targets.iter().enumerate().filter(|(_, t)| t.has_vote) {
            let ex = out.votes[s * 2] - T::lit(t.vote_offset.0);
            let ey = out.votes[s * 2 + 1] - T::lit(t.vote_offset.1);
            reg = reg + ex * ex + ey * ey;
            d_votes[s * 2] = two * w * ex * inv_fg;
            d_votes[s * 2 + 1] = two * w * ey * inv_fg;
        }
        reg = reg * inv_fg;
    }
    let value = ce + T::lit(vote_weight) * reg;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossOutput {
        value,
        cross_entropy: ce,
        regression: reg,
        d_logits,
        d_votes,
    })
}
