//! Motion regression, blink and emotion cross-entropies, blink smoothness,
//! and their weighted sum. Tape builders sum over every leading axis; the
//! batch loss divides by the clip count.

use elp_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ElpError, Result};
use crate::motion::{BlinkSequence, EmotionVector, MotionSequence};
use crate::network::{Batch, ForwardVars};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 5.0,
            lambda3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ElpError::invalid(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Squared per-frame norms in the motion term instead of plain norms.
    pub squared_l2: bool,
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l2: f64,
    pub ce1: f64,
    pub ce2: f64,
    pub reg: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("L_L2", parts.l2),
        ("L_CE1", parts.ce1),
        ("L_CE2", parts.ce2),
        ("L_reg", parts.reg),
    ] {
        if !v.is_finite() {
            return Err(ElpError::NonFiniteLoss(name));
        }
    }
    Ok(parts.l2 + weights.lambda1 * parts.ce1 + weights.lambda2 * parts.ce2 + weights.lambda3 * parts.reg)
}

fn frame_norms(tape: &mut Tape, pred: Var, gt: Var, squared: bool) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let sq = tape.mul(d, d)?;
    let axis = tape.shape(sq)?.len() - 1;
    let per_frame = tape.sum_axis(sq, axis)?;
    Ok(if squared {
        per_frame
    } else {
        tape.sqrt(per_frame)?
    })
}

/// `sum_t |beta_pred - beta| + |pose_pred - pose|` over all frames.
pub fn motion_l2_var(
    tape: &mut Tape,
    (beta_pred, pose_pred): (Var, Var),
    (beta_gt, pose_gt): (Var, Var),
    squared: bool,
) -> Result<Var> {
    let a = frame_norms(tape, beta_pred, beta_gt, squared)?;
    let b = frame_norms(tape, pose_pred, pose_gt, squared)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum(s)?)
}

/// `-sum [y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_ce_var(tape: &mut Tape, prob: Var, target: Var) -> Result<Var> {
    let p = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.shift(q, 1.0)?;
    let log_q = tape.log(q)?;
    let not_target = tape.scale(target, -1.0)?;
    let not_target = tape.shift(not_target, 1.0)?;
    let a = tape.mul(target, log_p)?;
    let b = tape.mul(not_target, log_q)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    Ok(tape.scale(s, -1.0)?)
}

/// `ln(1 + e^z)` without overflow.
fn softplus(tape: &mut Tape, z: Var) -> Result<Var> {
    let pos = tape.relu(z)?;
    let a = tape.abs(z)?;
    let a = tape.scale(a, -1.0)?;
    let e = tape.exp(a)?;
    let e = tape.shift(e, 1.0)?;
    let l = tape.log(e)?;
    Ok(tape.add(pos, l)?)
}

/// `(ln p, ln(1 - p))` for `p = sigmoid(logit)`, finite for every finite logit.
pub fn log_sigmoid_pair(tape: &mut Tape, logit: Var) -> Result<(Var, Var)> {
    let neg = tape.scale(logit, -1.0)?;
    let sp_neg = softplus(tape, neg)?;
    let sp_pos = softplus(tape, logit)?;
    Ok((tape.scale(sp_neg, -1.0)?, tape.scale(sp_pos, -1.0)?))
}

/// Log-sum-exp over the columns `keep` of a `[B, N]` input, as `[B, 1]`.
fn logsumexp_columns(tape: &mut Tape, logits: Var, keep: &[usize]) -> Result<Var> {
    let (b, n) = {
        let s = tape.shape(logits)?;
        (s[0], s[1])
    };
    let values = tape.value(logits)?;
    let shift: Vec<f64> = (0..b)
        .flat_map(|r| {
            let m = keep
                .iter()
                .map(|&c| values[r * n + c])
                .fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat_n(m, keep.len())
        })
        .collect();
    let cols = keep
        .iter()
        .map(|&c| tape.slice(logits, 1, c, 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let x = tape.concat(&cols, 1)?;
    let m = tape.constant([b, keep.len()], shift.clone())?;
    let centered = tape.sub(x, m)?;
    let e = tape.exp(centered)?;
    let s = tape.sum_axis(e, 1)?;
    let l = tape.log(s)?;
    let l = tape.reshape(l, [b, 1])?;
    let row_max: Vec<f64> = shift.chunks(keep.len()).map(|c| c[0]).collect();
    let m = tape.constant([b, 1], row_max)?;
    Ok(tape.add(l, m)?)
}

/// `(ln p_i, ln(1 - p_i))` for `p = softmax(logits)` over the last axis of a
/// `[B, N]` input. With `N = 1` the second part is `ln(1e-7)`, the clamped value.
pub fn log_softmax_pair(tape: &mut Tape, logits: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(logits)?.to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(ElpError::invalid(format!("log_softmax_pair expects [B, N], got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    let all: Vec<usize> = (0..n).collect();
    let lse = logsumexp_columns(tape, logits, &all)?;
    let lse_wide = tape.concat(&vec![lse; n], 1)?;
    let log_p = tape.sub(logits, lse_wide)?;
    if n == 1 {
        let c = tape.constant([b, 1], vec![PROB_CLAMP.ln(); b])?;
        return Ok((log_p, c));
    }
    let others = (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            logsumexp_columns(tape, logits, &keep)
        })
        .collect::<Result<Vec<_>>>()?;
    let others = tape.concat(&others, 1)?;
    let log_q = tape.sub(others, lse_wide)?;
    Ok((log_p, log_q))
}

/// `-sum [y ln p + (1 - y) ln(1 - p)]` from log-probabilities. Equals
/// [`binary_ce_var`] wherever `p` lies inside the clamp interval, and its
/// gradient never vanishes on a wrong saturated prediction.
pub fn binary_ce_log_var(tape: &mut Tape, (log_p, log_q): (Var, Var), target: Var) -> Result<Var> {
    let not_target = tape.scale(target, -1.0)?;
    let not_target = tape.shift(not_target, 1.0)?;
    let a = tape.mul(target, log_p)?;
    let b = tape.mul(not_target, log_q)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    Ok(tape.scale(s, -1.0)?)
}

/// Total variation along the last axis; zero when it has fewer than two entries.
pub fn blink_reg_var(tape: &mut Tape, prob: Var) -> Result<Var> {
    let shape = tape.shape(prob)?.to_vec();
    let axis = shape.len().saturating_sub(1);
    let t = shape.last().copied().unwrap_or(1);
    if t < 2 {
        return Ok(tape.scalar_constant(0.0)?);
    }
    let later = tape.slice(prob, axis, 1, t - 1)?;
    let earlier = tape.slice(prob, axis, 0, t - 1)?;
    let d = tape.sub(later, earlier)?;
    let d = tape.abs(d)?;
    Ok(tape.sum(d)?)
}

/// Component and total handles of one batch loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l2: Var,
    pub ce1: Var,
    pub ce2: Var,
    pub reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn parts(&self, tape: &Tape) -> Result<LossParts> {
        Ok(LossParts {
            l2: tape.item(self.l2)?,
            ce1: tape.item(self.ce1)?,
            ce2: tape.item(self.ce2)?,
            reg: tape.item(self.reg)?,
        })
    }
}

/// Weighted objective of a forward pass, each term averaged over clips.
pub fn batch_loss(tape: &mut Tape, out: &ForwardVars, batch: &Batch, config: &LossConfig) -> Result<LossVars> {
    let (b, t) = (batch.size, batch.frames);
    if batch.blink.len() != b * t {
        return Err(ElpError::invalid("batch carries no listener targets"));
    }
    let beta_shape = tape.shape(out.beta)?.to_vec();
    let pose_shape = tape.shape(out.pose)?.to_vec();
    let beta_gt = tape.constant(beta_shape, batch.beta.clone())?;
    let pose_gt = tape.constant(pose_shape, batch.pose.clone())?;
    let blink_gt = tape.constant([b, t], batch.blink.clone())?;
    let n = tape.shape(out.emotion_probs)?[1];
    let mut onehot = vec![0.0; b * n];
    for (i, &e) in batch.emotions.iter().enumerate() {
        onehot[i * n + e] = 1.0;
    }
    let emotion_gt = tape.constant([b, n], onehot)?;

    let inv = 1.0 / b as f64;
    let l2 = motion_l2_var(tape, (out.beta, out.pose), (beta_gt, pose_gt), config.squared_l2)?;
    let l2 = tape.scale(l2, inv)?;
    let blink_logs = log_sigmoid_pair(tape, out.blink_logit)?;
    let ce1 = binary_ce_log_var(tape, blink_logs, blink_gt)?;
    let ce1 = tape.scale(ce1, inv)?;
    let emotion_logs = log_softmax_pair(tape, out.emotion_logits)?;
    let ce2 = binary_ce_log_var(tape, emotion_logs, emotion_gt)?;
    let ce2 = tape.scale(ce2, inv)?;
    let reg = blink_reg_var(tape, out.blink_prob)?;
    let reg = tape.scale(reg, inv)?;
    let total = weighted_total_var(tape, [l2, ce1, ce2, reg], &config.weights)?;
    Ok(LossVars {
        l2,
        ce1,
        ce2,
        reg,
        total,
    })
}

pub fn weighted_total_var(tape: &mut Tape, [l2, ce1, ce2, reg]: [Var; 4], w: &LossWeights) -> Result<Var> {
    let a = tape.scale(ce1, w.lambda1)?;
    let b = tape.scale(ce2, w.lambda2)?;
    let c = tape.scale(reg, w.lambda3)?;
    let s = tape.add(l2, a)?;
    let s = tape.add(s, b)?;
    Ok(tape.add(s, c)?)
}

pub fn motion_l2(pred: &MotionSequence, gt: &MotionSequence, squared: bool) -> Result<f64> {
    if pred.beta().dim() != gt.beta().dim() || pred.pose().dim() != gt.pose().dim() {
        return Err(ElpError::LengthMismatch {
            what: "motion_l2 shapes",
            left: pred.frames(),
            right: gt.frames(),
        });
    }
    let mut tape = Tape::new();
    let mut leaf = |a: ndarray::ArrayView2<'_, f64>| {
        tape.constant([a.nrows(), a.ncols()], a.iter().copied().collect())
    };
    let vars = [leaf(pred.beta())?, leaf(pred.pose())?, leaf(gt.beta())?, leaf(gt.pose())?];
    let l = motion_l2_var(&mut tape, (vars[0], vars[1]), (vars[2], vars[3]), squared)?;
    Ok(tape.item(l)?)
}

fn binary_ce(prob: &[f64], target: Vec<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant([prob.len()], prob.to_vec())?;
    let y = tape.constant([target.len()], target)?;
    let l = binary_ce_var(&mut tape, p, y)?;
    Ok(tape.item(l)?)
}

pub fn blink_ce(pred_prob: &[f64], gt: &BlinkSequence) -> Result<f64> {
    if pred_prob.len() != gt.len() {
        return Err(ElpError::LengthMismatch {
            what: "blink_ce",
            left: pred_prob.len(),
            right: gt.len(),
        });
    }
    binary_ce(pred_prob, gt.as_f64())
}

pub fn blink_reg(pred_prob: &[f64]) -> Result<f64> {
    if pred_prob.len() < 2 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let p = tape.constant([pred_prob.len()], pred_prob.to_vec())?;
    let l = blink_reg_var(&mut tape, p)?;
    Ok(tape.item(l)?)
}

/// Per-class binary cross-entropy of a simplex prediction against a one-hot label.
pub fn emotion_ce(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let e = EmotionVector::from_one_hot(gt)?;
    if pred.len() != e.count() {
        return Err(ElpError::LengthMismatch {
            what: "emotion_ce",
            left: pred.len(),
            right: e.count(),
        });
    }
    binary_ce(pred, e.to_vec())
}
