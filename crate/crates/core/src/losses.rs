//! Training objective.
//!
//! All tape-level terms take label targets `y` and probabilities as `[B, L]`
//! variables and reduce to a batch mean, so the weights do not depend on
//! batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_decoder::DecoderTrace;
use crate::numerics::{Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
            beta: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn new(lambda0: f64, lambda1: f64, lambda2: f64, beta: f64) -> Result<Self> {
        let w = Self {
            lambda0,
            lambda1,
            lambda2,
            beta,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of each term. `kl` is the unweighted alignment term, so
/// `total = lambda0*bce + lambda1*int + lambda2*rank + beta*kl`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub int: f64,
    pub rank: f64,
    pub kl: f64,
    pub total: f64,
}

/// Tape handles of each scalar term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub bce: Var,
    pub int: Var,
    pub rank: Var,
    pub kl: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            bce: tape.value(self.bce).item(),
            int: tape.value(self.int).item(),
            rank: tape.value(self.rank).item(),
            kl: tape.value(self.kl).item(),
            total: tape.value(self.total).item(),
        }
    }
}

fn check_pair(tape: &Tape, op: &'static str, y: Var, p: Var) -> Result<(usize, usize)> {
    let (sy, sp) = (tape.value(y).shape(), tape.value(p).shape());
    if sy != sp || sy.len() != 2 {
        return Err(Error::shape(op, sy, sp));
    }
    Ok((sy[0], sy[1]))
}

/// Per-sample binary cross-entropy averaged over labels, shape `[B]`.
pub fn bce(tape: &mut Tape, y: Var, p: Var) -> Result<Var> {
    let (_, l) = check_pair(tape, "bce", y, p)?;
    let one_minus_y = {
        let t = tape.value(y).clone();
        let data = t.data().iter().map(|v| 1.0 - v).collect();
        tape.constant(Tensor::new(t.shape().to_vec(), data)?)
    };
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.ln(pc)?;
    let q = tape.scale(pc, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.ln(q)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(one_minus_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let per_sample = tape.sum_last(ll)?;
    tape.scale(per_sample, -1.0 / l as f64)
}

/// Batch mean of `bce(y, p_f) + bce(y, p_l)`.
pub fn loss_bce(tape: &mut Tape, y: Var, p_feature: Var, p_label: Var) -> Result<Var> {
    let a = bce(tape, y, p_feature)?;
    let b = bce(tape, y, p_label)?;
    let s = tape.add(a, b)?;
    tape.mean(s)
}

/// Summed BCE over the intermediate readouts of both branches. Each list
/// must hold exactly `depth - 1` entries.
pub fn loss_int(
    tape: &mut Tape,
    y: Var,
    intermediates_feature: &[Var],
    intermediates_label: &[Var],
    depth: usize,
) -> Result<Var> {
    let want = depth.saturating_sub(1);
    if depth == 0 || intermediates_feature.len() != want || intermediates_label.len() != want {
        return Err(Error::Contract(format!(
            "expected {want} intermediate readouts per branch, got {} and {}",
            intermediates_feature.len(),
            intermediates_label.len()
        )));
    }
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for (&f, &l) in intermediates_feature.iter().zip(intermediates_label) {
        let term = loss_bce(tape, y, f, l)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Pair weights `y_r (1 - y_s) / (|Y| |Ybar|)` for the ranking loss, shape
/// `[B, L, L]`. Rows with no positives or no negatives get zero weight.
pub fn ranking_weights(y: &Tensor) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 2 {
        return Err(Error::shape("ranking_weights", s, &[2]));
    }
    let (b, l) = (s[0], s[1]);
    let mut w = vec![0.0; b * l * l];
    for i in 0..b {
        let row = y.row(i);
        let pos = row.iter().filter(|&&v| v > 0.5).count();
        let neg = l - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        let c = 1.0 / (pos * neg) as f64;
        for r in (0..l).filter(|&r| row[r] > 0.5) {
            for t in (0..l).filter(|&t| row[t] <= 0.5) {
                w[(i * l + r) * l + t] = c;
            }
        }
    }
    Tensor::new(vec![b, l, l], w)
}

/// Batch mean of the pairwise exponential ranking loss.
pub fn ranking_loss(tape: &mut Tape, y: Var, p: Var) -> Result<Var> {
    check_pair(tape, "ranking_loss", y, p)?;
    let weights = ranking_weights(tape.value(y))?;
    let weights = tape.constant(weights);
    let diff = tape.pairwise_diff(p)?;
    let neg = tape.scale(diff, -1.0)?;
    let e = tape.exp(neg)?;
    let weighted = tape.mul(e, weights)?;
    let per_sample = tape.sum_last(weighted)?;
    let per_sample = tape.sum_last(per_sample)?;
    tape.mean(per_sample)
}

/// Combines every term. `kl` is the per-sample unweighted alignment term
/// `[B]`; the decoder depth is read from the traces.
pub fn total_loss(
    tape: &mut Tape,
    y: Var,
    trace_feature: &DecoderTrace,
    trace_label: &DecoderTrace,
    kl: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let depth = trace_feature.attention.len();
    if trace_label.attention.len() != depth {
        return Err(Error::Contract("branch traces have different depths".into()));
    }
    let bce = loss_bce(tape, y, trace_feature.probs, trace_label.probs)?;
    let int = loss_int(tape, y, &trace_feature.intermediates, &trace_label.intermediates, depth)?;
    let rf = ranking_loss(tape, y, trace_feature.probs)?;
    let rl = ranking_loss(tape, y, trace_label.probs)?;
    let rank = tape.add(rf, rl)?;
    let kl = tape.mean(kl)?;
    let mut total = tape.scale(bce, weights.lambda0)?;
    for (term, w) in [(int, weights.lambda1), (rank, weights.lambda2), (kl, weights.beta)] {
        let scaled = tape.scale(term, w)?;
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms {
        bce,
        int,
        rank,
        kl,
        total,
    })
}
