//! Blendshape interpolation of predicted blinks into expression coefficients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ElpError, Result};
use crate::motion::BlinkSequence;

/// Maximal run of closed frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlinkGroup {
    pub start: usize,
    pub len: usize,
}

/// Expression vector of a fully closed eye.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureBlendshape {
    beta_c: Array1<f64>,
}

impl ClosureBlendshape {
    pub fn new(beta_c: Array1<f64>) -> Result<Self> {
        if !beta_c.iter().all(|v| v.is_finite()) {
            return Err(ElpError::invalid("closure blendshape must be finite"));
        }
        Ok(Self { beta_c })
    }

    /// Unit weight on `index`, zeros elsewhere.
    pub fn unit(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(ElpError::invalid(format!(
                "closure index {index} outside expression width {dim}"
            )));
        }
        let mut beta_c = Array1::zeros(dim);
        beta_c[index] = 1.0;
        Ok(Self { beta_c })
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.beta_c.view()
    }
}

pub fn group_blinks(phi: &BlinkSequence) -> Vec<BlinkGroup> {
    let mut groups = Vec::new();
    let mut start = None;
    for (t, &v) in phi.values().iter().enumerate() {
        match (v, start) {
            (1, None) => start = Some(t),
            (0, Some(s)) => {
                groups.push(BlinkGroup { start: s, len: t - s });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        groups.push(BlinkGroup {
            start: s,
            len: phi.len() - s,
        });
    }
    groups
}

/// Interpolation weights of group frame `j` (0-based) in a group of length
/// `len`: `(from_start, weight)` where `from_start` selects the first half
/// (`beta1 -> beta_c`) and `weight` is the fraction toward the half's target.
fn schedule(j: usize, len: usize) -> (bool, f64) {
    let first = len.div_ceil(2);
    let second = len / 2;
    if j < first {
        (true, (j + 1) as f64 / first as f64)
    } else {
        (false, (j - first + 1) as f64 / (second + 1) as f64)
    }
}

pub fn apply_blink(
    beta: ArrayView2<'_, f64>,
    phi: &BlinkSequence,
    beta_c: &ClosureBlendshape,
) -> Result<Array2<f64>> {
    let (t, d) = beta.dim();
    if phi.len() != t {
        return Err(ElpError::LengthMismatch {
            what: "apply_blink frames",
            left: t,
            right: phi.len(),
        });
    }
    if beta_c.values().len() != d {
        return Err(ElpError::WidthMismatch {
            what: "closure blendshape",
            expected: d,
            found: beta_c.values().len(),
        });
    }
    let mut out = beta.to_owned();
    let c = beta_c.values();
    for g in group_blinks(phi) {
        let end = g.start + g.len;
        let b1 = beta.row(if g.start == 0 { g.start } else { g.start - 1 });
        let b2 = beta.row(if end == t { end - 1 } else { end });
        for j in 0..g.len {
            let (first_half, w) = schedule(j, g.len);
            let (from, to) = if first_half { (b1, c) } else { (c, b2) };
            let row = &from * (1.0 - w) + &to * w;
            out.row_mut(g.start + j).assign(&row);
        }
    }
    Ok(out)
}
