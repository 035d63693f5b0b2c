//! Multi-head Gumbel-Softmax discretization and the emotion-partitioned
//! codeword space.
//!
//! Tape-level builders (`*_var`) operate on batched `[B, T, H, V]` tensors and
//! are what the networks use; the array-level functions wrap them for single
//! clips so both paths share one implementation.

use std::io::Write;

use elp_autodiff::{Tape, Var};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElpError, Result};
use crate::motion::EmotionVector;

const UNIFORM_CLAMP: f64 = 1e-12;

/// Encoder output of shape `T x H x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits {
    logits: Array3<f64>,
}

impl HeadLogits {
    pub fn new(logits: Array3<f64>) -> Result<Self> {
        let (_, h, v) = logits.dim();
        if h == 0 || v == 0 {
            return Err(ElpError::invalid("head logits need H >= 1 and V >= 1"));
        }
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(ElpError::invalid("head logits contain non-finite values"));
        }
        Ok(Self { logits })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.logits
    }
}

/// Gumbel-Softmax sample of shape `T x H x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSpace {
    onehot: Array3<f64>,
}

impl BaseSpace {
    pub fn new(onehot: Array3<f64>) -> Self {
        Self { onehot }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.onehot
    }
}

/// Emotion-gated expansion of shape `T x H x (N*V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSpace {
    expanded: Array3<f64>,
    categories: usize,
}

impl TransformedSpace {
    pub fn values(&self) -> &Array3<f64> {
        &self.expanded
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn emotions(&self) -> usize {
        self.expanded.dim().2 / self.categories
    }
}

/// 1-based codewords, `T x H`, each in `1..=max_code`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodewordGrid {
    codes: Array2<usize>,
    max_code: usize,
}

impl CodewordGrid {
    pub fn new(codes: Array2<usize>, max_code: usize) -> Result<Self> {
        if let Some(&code) = codes.iter().find(|&&c| c == 0 || c > max_code) {
            return Err(ElpError::CodeOutOfRange {
                code,
                max: max_code,
            });
        }
        Ok(Self { codes, max_code })
    }

    pub fn codes(&self) -> &Array2<usize> {
        &self.codes
    }

    pub fn max_code(&self) -> usize {
        self.max_code
    }

    pub fn frames(&self) -> usize {
        self.codes.nrows()
    }

    pub fn heads(&self) -> usize {
        self.codes.ncols()
    }

    /// Frames as rows, heads as columns, no header.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        for row in self.codes.rows() {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Codewords plus the number of fibers whose maximum was tied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codewords {
    pub grid: CodewordGrid,
    pub ties: usize,
}

/// Exponential temperature annealing from `start` to `end` over `steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.5,
            steps: 10_000,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite()) {
            return Err(ElpError::invalid("temperatures must be positive and finite"));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        let frac = step as f64 / self.steps as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// `n` standard Gumbel draws with the uniform clamped away from 0 and 1.
pub fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

/// One-hot of the first maximum of every `width`-long fiber of `values`,
/// with the 0-based argmax per fiber and the tie count.
pub fn fiber_argmax(values: &[f64], width: usize) -> (Vec<usize>, usize) {
    let mut ties = 0;
    let idx = values
        .chunks(width)
        .map(|fiber| {
            let best = crate::motion::argmax(fiber);
            if fiber.iter().filter(|&&v| v == fiber[best]).count() > 1 {
                ties += 1;
            }
            best
        })
        .collect();
    (idx, ties)
}

fn one_hot_from(idx: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; idx.len() * width];
    for (f, &i) in idx.iter().enumerate() {
        out[f * width + i] = 1.0;
    }
    out
}

/// Gumbel-Softmax over the last axis of `logits`.
///
/// `noise` (same length as `logits`) is added before the temperature; `None`
/// means zero noise. In hard mode the forward value is the one-hot of the
/// argmax and the gradient is that of the soft sample.
pub fn gumbel_softmax_var(
    tape: &mut Tape,
    logits: Var,
    noise: Option<&[f64]>,
    tau: f64,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ElpError::invalid(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(logits)?.to_vec();
    let axis = shape.len().checked_sub(1).ok_or_else(|| ElpError::invalid("scalar logits"))?;
    let perturbed = match noise {
        Some(g) => {
            let g = tape.constant(shape.clone(), g.to_vec())?;
            tape.add(logits, g)?
        }
        None => logits,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    let soft = tape.softmax(scaled, axis)?;
    if !hard {
        return Ok(soft);
    }
    let (idx, _) = fiber_argmax(tape.value(soft)?, shape[axis]);
    let hard_values = one_hot_from(&idx, shape[axis]);
    Ok(tape.straight_through(soft, hard_values)?)
}

/// Deterministic inference discretization: one-hot of the logit argmax.
pub fn argmax_one_hot_var(tape: &mut Tape, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits)?.to_vec();
    let width = *shape.last().ok_or_else(|| ElpError::invalid("scalar logits"))?;
    let (idx, _) = fiber_argmax(tape.value(logits)?, width);
    Ok(tape.constant(shape, one_hot_from(&idx, width))?)
}

/// Places each clip's `[T, H, V]` base block into its emotion's slot of an
/// `[T, H, N*V]` tensor; other slots are exact zeros.
pub fn split_rearrange_var(tape: &mut Tape, base: Var, emotions: &[EmotionVector]) -> Result<Var> {
    let shape = tape.shape(base)?.to_vec();
    if shape.len() != 4 {
        return Err(ElpError::invalid(format!(
            "base space must be [B, T, H, V], got {shape:?}"
        )));
    }
    let [b, t, h, v] = [shape[0], shape[1], shape[2], shape[3]];
    if emotions.len() != b {
        return Err(ElpError::LengthMismatch {
            what: "split_rearrange batch/emotions",
            left: b,
            right: emotions.len(),
        });
    }
    let mut clips = Vec::with_capacity(b);
    for (i, e) in emotions.iter().enumerate() {
        let n = e.count();
        let clip = tape.slice(base, 0, i, 1)?;
        let before = e.slot();
        let after = n - 1 - before;
        let mut blocks = Vec::with_capacity(3);
        if before > 0 {
            blocks.push(tape.constant([1, t, h, before * v], vec![0.0; t * h * before * v])?);
        }
        blocks.push(clip);
        if after > 0 {
            blocks.push(tape.constant([1, t, h, after * v], vec![0.0; t * h * after * v])?);
        }
        clips.push(if blocks.len() == 1 {
            clip
        } else {
            tape.concat(&blocks, 3)?
        });
    }
    Ok(if clips.len() == 1 {
        clips[0]
    } else {
        tape.concat(&clips, 0)?
    })
}

fn tape_array3(tape: &Tape, v: Var) -> Result<Array3<f64>> {
    let shape = tape.shape(v)?;
    let dims = (shape[shape.len() - 3], shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok(Array3::from_shape_vec(dims, tape.value(v)?.to_vec()).expect("shape checked by tape"))
}

fn logits_leaf(tape: &mut Tape, logits: &Array3<f64>) -> Result<Var> {
    let (t, h, v) = logits.dim();
    Ok(tape.constant([1, t, h, v], logits.iter().copied().collect())?)
}

pub fn gumbel_softmax(
    logits: &HeadLogits,
    tau: f64,
    hard: bool,
    rng: &mut impl Rng,
) -> Result<BaseSpace> {
    let noise = sample_gumbel(rng, logits.values().len());
    gumbel_softmax_with_noise(logits, Some(&noise), tau, hard)
}

/// As [`gumbel_softmax`] with caller-supplied noise; `None` injects zeros.
pub fn gumbel_softmax_with_noise(
    logits: &HeadLogits,
    noise: Option<&[f64]>,
    tau: f64,
    hard: bool,
) -> Result<BaseSpace> {
    if let Some(g) = noise {
        if g.len() != logits.values().len() {
            return Err(ElpError::LengthMismatch {
                what: "gumbel noise",
                left: g.len(),
                right: logits.values().len(),
            });
        }
    }
    let mut tape = Tape::new();
    let x = logits_leaf(&mut tape, logits.values())?;
    let y = gumbel_softmax_var(&mut tape, x, noise, tau, hard)?;
    Ok(BaseSpace::new(tape_array3(&tape, y)?))
}

pub fn split_rearrange(base: &BaseSpace, e: &EmotionVector) -> Result<TransformedSpace> {
    let mut tape = Tape::new();
    let x = logits_leaf(&mut tape, base.values())?;
    let y = split_rearrange_var(&mut tape, x, std::slice::from_ref(e))?;
    Ok(TransformedSpace {
        expanded: tape_array3(&tape, y)?,
        categories: base.values().dim().2,
    })
}

/// 1-based argmax of every fiber along the last axis.
pub fn codewords_from_values(values: &Array3<f64>) -> Result<Codewords> {
    let (t, h, width) = values.dim();
    let flat: Vec<f64> = values.iter().copied().collect();
    let (idx, ties) = fiber_argmax(&flat, width);
    let codes = Array2::from_shape_vec((t, h), idx.into_iter().map(|i| i + 1).collect())
        .expect("one code per fiber");
    Ok(Codewords {
        grid: CodewordGrid::new(codes, width)?,
        ties,
    })
}

pub fn to_codewords(transformed: &TransformedSpace) -> Result<Codewords> {
    codewords_from_values(transformed.values())
}

pub fn embed_codewords(grid: &CodewordGrid) -> Array3<f64> {
    let (t, h) = grid.codes().dim();
    let mut out = Array3::zeros((t, h, grid.max_code()));
    for ((ti, hi), &c) in grid.codes().indexed_iter() {
        out[[ti, hi, c - 1]] = 1.0;
    }
    out
}

/// Codes allowed for emotion `slot` with `categories` per block (1-based, inclusive).
pub fn emotion_block(slot: usize, categories: usize) -> (usize, usize) {
    (slot * categories + 1, (slot + 1) * categories)
}

/// Natural log of the number of distinct per-frame configurations, `H ln(N V)`.
pub fn log_configuration_count(heads: usize, codes: usize) -> f64 {
    heads as f64 * (codes as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(values: Vec<f64>, v: usize) -> HeadLogits {
        let n = values.len() / v;
        HeadLogits::new(Array3::from_shape_vec((n, 1, v), values).unwrap()).unwrap()
    }

    #[test]
    fn zero_noise_low_temperature_picks_dominant_logit() {
        let y = gumbel_softmax_with_noise(&logits(vec![5.0, 0.0, 0.0], 3), None, 0.1, false)
            .unwrap();
        let v = y.values();
        assert!((v[[0, 0, 0]] - 1.0).abs() < 1e-3);
        assert!(v[[0, 0, 1]] < 1e-3 && v[[0, 0, 2]] < 1e-3);
    }

    #[test]
    fn hard_fibers_are_exact_one_hots() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = Array3::from_shape_fn((7, 3, 5), |_| rng.random_range(-2.0..2.0));
        let y = gumbel_softmax(&HeadLogits::new(raw).unwrap(), 0.7, true, &mut rng).unwrap();
        for fiber in y.values().as_slice().unwrap().chunks(5) {
            assert_eq!(fiber.iter().sum::<f64>(), 1.0);
            assert_eq!(fiber.iter().filter(|&&x| x != 0.0).count(), 1);
        }
    }

    #[test]
    fn soft_fibers_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = Array3::from_shape_fn((4, 2, 6), |_| rng.random_range(-3.0..3.0));
        let y = gumbel_softmax(&HeadLogits::new(raw).unwrap(), 1.3, false, &mut rng).unwrap();
        for fiber in y.values().as_slice().unwrap().chunks(6) {
            assert!((fiber.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = logits(vec![0.0, 1.0], 2);
        assert!(gumbel_softmax(&l, 0.0, false, &mut rng).is_err());
        assert!(gumbel_softmax(&l, -1.0, true, &mut rng).is_err());
    }

    #[test]
    fn split_rearrange_places_blocks() {
        let base = BaseSpace::new(Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap());
        let a = split_rearrange(&base, &EmotionVector::new(0, 2).unwrap()).unwrap();
        assert_eq!(a.values().as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
        let b = split_rearrange(&base, &EmotionVector::new(1, 2).unwrap()).unwrap();
        assert_eq!(b.values().as_slice().unwrap(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(to_codewords(&a).unwrap().grid.codes()[[0, 0]], 2);
        assert_eq!(to_codewords(&b).unwrap().grid.codes()[[0, 0]], 4);
    }

    #[test]
    fn ties_resolve_low_and_are_counted() {
        let values = Array3::from_shape_vec((1, 2, 3), vec![0.4, 0.4, 0.2, 0.1, 0.8, 0.1]).unwrap();
        let cw = codewords_from_values(&values).unwrap();
        assert_eq!(cw.grid.codes().as_slice().unwrap(), &[1, 2]);
        assert_eq!(cw.ties, 1);
    }

    #[test]
    fn embed_and_range_checks() {
        let grid = CodewordGrid::new(Array2::from_shape_vec((1, 1), vec![4]).unwrap(), 4).unwrap();
        assert_eq!(embed_codewords(&grid).as_slice().unwrap(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(CodewordGrid::new(Array2::from_elem((1, 1), 5), 4).is_err());
        assert!(CodewordGrid::new(Array2::from_elem((1, 1), 0), 4).is_err());
    }

    #[test]
    fn schedule_anneals_exponentially() {
        let s = TemperatureSchedule {
            start: 1.0,
            end: 0.5,
            steps: 100,
        };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(50) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.at(100), 0.5);
        assert_eq!(s.at(1000), 0.5);
    }

    #[test]
    fn configuration_count_is_h_log_nv() {
        assert!((log_configuration_count(128, 192) - 128.0 * 192f64.ln()).abs() < 1e-9);
        assert!((log_configuration_count(1, 6) - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn csv_export_is_integer_matrix() {
        let grid =
            CodewordGrid::new(Array2::from_shape_vec((2, 2), vec![1, 3, 2, 4]).unwrap(), 4).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,3\n2,4\n");
    }
}
