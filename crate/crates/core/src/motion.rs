//! Motion, audio, blink and emotion domain types, plus the per-frame speaker
//! style feature and blink extraction from eye landmarks.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ElpError, Result};

pub const DEFAULT_FPS: f64 = 25.0;
pub const BETA_DIM: usize = 100;
pub const POSE_DIM: usize = 6;
pub const AUDIO_DIM: usize = 29;
pub const AUDIO_EMBED_DIM: usize = 128;

fn ensure_finite(what: &'static str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ElpError::invalid(format!("{what} contains non-finite values")))
    }
}

/// Expression and head-pose coefficients sharing one frame axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    beta: Array2<f64>,
    pose: Array2<f64>,
    fps: f64,
}

impl MotionSequence {
    pub fn new(beta: Array2<f64>, pose: Array2<f64>, fps: f64) -> Result<Self> {
        if beta.nrows() != pose.nrows() {
            return Err(ElpError::LengthMismatch {
                what: "motion beta/pose",
                left: beta.nrows(),
                right: pose.nrows(),
            });
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(ElpError::invalid(format!("fps must be positive, got {fps}")));
        }
        ensure_finite("beta", &beta)?;
        ensure_finite("pose", &pose)?;
        Ok(Self { beta, pose, fps })
    }

    pub fn frames(&self) -> usize {
        self.beta.nrows()
    }

    pub fn beta(&self) -> ArrayView2<'_, f64> {
        self.beta.view()
    }

    pub fn pose(&self) -> ArrayView2<'_, f64> {
        self.pose.view()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn beta_dim(&self) -> usize {
        self.beta.ncols()
    }

    pub fn pose_dim(&self) -> usize {
        self.pose.ncols()
    }

    /// Frame-wise `[beta | pose]`.
    pub fn stacked(&self) -> Array2<f64> {
        concatenate![Axis(1), self.beta, self.pose]
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>) {
        (self.beta, self.pose)
    }
}

/// Precomputed per-frame acoustic features.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    feats: Array2<f64>,
}

impl AudioFeatureSequence {
    pub fn new(feats: Array2<f64>) -> Result<Self> {
        ensure_finite("audio", &feats)?;
        Ok(Self { feats })
    }

    pub fn frames(&self) -> usize {
        self.feats.nrows()
    }

    pub fn dim(&self) -> usize {
        self.feats.ncols()
    }

    pub fn feats(&self) -> ArrayView2<'_, f64> {
        self.feats.view()
    }
}

/// Binary per-frame eyelid state; 1 marks a closing frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlinkSequence {
    phi: Vec<u8>,
}

impl BlinkSequence {
    pub fn new(phi: Vec<u8>) -> Result<Self> {
        if let Some(pos) = phi.iter().position(|&v| v > 1) {
            return Err(ElpError::invalid(format!(
                "blink value {} at frame {pos} is not binary",
                phi[pos]
            )));
        }
        Ok(Self { phi })
    }

    pub fn zeros(frames: usize) -> Self {
        Self { phi: vec![0; frames] }
    }

    pub fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        Self {
            phi: flags.into_iter().map(u8::from).collect(),
        }
    }

    /// Thresholds probabilities at `threshold` (strictly greater is a blink).
    pub fn from_probabilities(prob: &[f64], threshold: f64) -> Self {
        Self::from_flags(prob.iter().map(|&p| p > threshold))
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.phi
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.phi.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn count_closed(&self) -> usize {
        self.phi.iter().filter(|&&v| v == 1).count()
    }

    /// Number of maximal runs of 1s.
    pub fn count_events(&self) -> usize {
        let mut prev = 0;
        let mut n = 0;
        for &v in &self.phi {
            if v == 1 && prev == 0 {
                n += 1;
            }
            prev = v;
        }
        n
    }
}

/// One-hot emotion label over `n` slots, stored by slot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmotionVector {
    slot: usize,
    n: usize,
}

impl EmotionVector {
    pub fn new(slot: usize, n: usize) -> Result<Self> {
        if slot >= n {
            return Err(ElpError::invalid(format!(
                "emotion slot {slot} outside 0..{n}"
            )));
        }
        Ok(Self { slot, n })
    }

    /// Accepts only exact one-hot vectors.
    pub fn from_one_hot(e: &[f64]) -> Result<Self> {
        let ones = e.iter().filter(|&&v| v == 1.0).count();
        let zeros = e.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != e.len() {
            return Err(ElpError::NotOneHot(e.to_vec()));
        }
        let slot = e.iter().position(|&v| v == 1.0).unwrap_or(0);
        Ok(Self { slot, n: e.len() })
    }

    /// Argmax with ties broken toward the lowest index.
    pub fn from_argmax(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(ElpError::invalid("argmax of an empty score vector"));
        }
        Self::new(argmax(scores), scores.len())
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        v[self.slot] = 1.0;
        v
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub type Point = [f64; 2];
/// Six landmarks of one eye, ordered p1..p6 (p1/p4 are the corners).
pub type EyeLandmarks = [Point; 6];

/// Per-frame landmarks of both eyes.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeLandmarkSequence {
    frames: Vec<[EyeLandmarks; 2]>,
}

impl EyeLandmarkSequence {
    pub fn new(frames: Vec<[EyeLandmarks; 2]>) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &[[EyeLandmarks; 2]] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-frame style feature: audio encoding followed by motion std blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStyleSequence {
    s_sty: Array2<f64>,
}

impl SpeakerStyleSequence {
    pub fn frames(&self) -> usize {
        self.s_sty.nrows()
    }

    pub fn width(&self) -> usize {
        self.s_sty.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.s_sty.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.s_sty
    }
}

/// Window over which the fluctuation statistics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StdWindow {
    /// One std per clip, replicated on every frame.
    Clip,
    /// Centered window of `2 * half_width + 1` frames, truncated at the edges.
    Sliding { half_width: usize },
}

impl Default for StdWindow {
    fn default() -> Self {
        Self::Clip
    }
}

pub fn temporal_derivative(seq: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if seq.nrows() == 0 {
        return Err(ElpError::TooShort {
            what: "temporal_derivative",
            min: 1,
            found: 0,
        });
    }
    let mut out = Array2::zeros(seq.raw_dim());
    let diff = &seq.slice(s![1.., ..]) - &seq.slice(s![..-1, ..]);
    out.slice_mut(s![1.., ..]).assign(&diff);
    Ok(out)
}

/// Population standard deviation of each column.
pub fn clip_std(seq: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if seq.nrows() < 2 {
        return Err(ElpError::TooShort {
            what: "clip_std",
            min: 2,
            found: seq.nrows(),
        });
    }
    Ok(seq.std_axis(Axis(0), 0.0))
}

fn windowed_std(seq: ArrayView2<'_, f64>, window: StdWindow) -> Result<Array2<f64>> {
    let t = seq.nrows();
    match window {
        StdWindow::Clip => {
            let sd = clip_std(seq)?;
            Ok(sd.broadcast((t, sd.len())).expect("row broadcast").to_owned())
        }
        StdWindow::Sliding { half_width } => {
            if t < 2 {
                return Err(ElpError::TooShort {
                    what: "clip_std",
                    min: 2,
                    found: t,
                });
            }
            let mut out = Array2::zeros(seq.raw_dim());
            for i in 0..t {
                let lo = i.saturating_sub(half_width);
                let hi = (i + half_width + 1).min(t);
                let sd = seq.slice(s![lo..hi, ..]).std_axis(Axis(0), 0.0);
                out.row_mut(i).assign(&sd);
            }
            Ok(out)
        }
    }
}

/// The three motion fluctuation blocks `std(beta) | std(d beta) | std(d pose)`,
/// one row per frame.
pub fn style_statistics(motion: &MotionSequence, window: StdWindow) -> Result<Array2<f64>> {
    let d_beta = temporal_derivative(motion.beta())?;
    let d_pose = temporal_derivative(motion.pose())?;
    let a = windowed_std(motion.beta(), window)?;
    let b = windowed_std(d_beta.view(), window)?;
    let c = windowed_std(d_pose.view(), window)?;
    Ok(concatenate![Axis(1), a, b, c])
}

pub fn compute_speaker_style(
    audio_encoded: ArrayView2<'_, f64>,
    motion: &MotionSequence,
    window: StdWindow,
) -> Result<SpeakerStyleSequence> {
    if audio_encoded.nrows() != motion.frames() {
        return Err(ElpError::LengthMismatch {
            what: "speaker style audio/motion",
            left: audio_encoded.nrows(),
            right: motion.frames(),
        });
    }
    let stats = style_statistics(motion, window)?;
    Ok(SpeakerStyleSequence {
        s_sty: concatenate![Axis(1), audio_encoded, stats],
    })
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Eye aspect ratio of each frame, averaged over both eyes.
pub fn eye_aspect_ratio(landmarks: &EyeLandmarkSequence) -> Result<Vec<f64>> {
    landmarks
        .frames()
        .iter()
        .enumerate()
        .map(|(frame, eyes)| {
            let mut sum = 0.0;
            for p in eyes {
                let width = dist(p[0], p[3]);
                if width < 1e-9 {
                    return Err(ElpError::DegenerateEye { frame });
                }
                sum += (dist(p[1], p[5]) + dist(p[2], p[4])) / (2.0 * width);
            }
            Ok(sum / 2.0)
        })
        .collect()
}

/// Linear-interpolated percentile of `values` at fraction `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Closure ratio `1 - EAR / EAR_open`, with `EAR_open` the clip's 95th
/// percentile. A clip whose open EAR is zero yields all-ones.
pub fn eye_closure_ratio(landmarks: &EyeLandmarkSequence) -> Result<Vec<f64>> {
    if landmarks.is_empty() {
        return Err(ElpError::TooShort {
            what: "eye_closure_ratio",
            min: 1,
            found: 0,
        });
    }
    let ear = eye_aspect_ratio(landmarks)?;
    let open = percentile(&ear, 0.95);
    if open <= 0.0 {
        return Ok(vec![1.0; ear.len()]);
    }
    Ok(ear.iter().map(|e| 1.0 - e / open).collect())
}

pub fn extract_blink(ratio: &[f64], threshold: f64) -> Result<BlinkSequence> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ElpError::invalid(format!(
            "blink threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(BlinkSequence::from_probabilities(ratio, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    fn eye(open: f64, offset: [f64; 2], scale: f64) -> EyeLandmarks {
        let p = |x: f64, y: f64| [offset[0] + scale * x, offset[1] + scale * y];
        [
            p(0.0, 0.0),
            p(10.0, open),
            p(20.0, open),
            p(30.0, 0.0),
            p(20.0, -open),
            p(10.0, -open),
        ]
    }

    #[test]
    fn derivative_examples() {
        let d = temporal_derivative(array![[1.0], [3.0], [6.0]].view()).unwrap();
        assert_eq!(d, array![[0.0], [2.0], [3.0]]);
        let c = temporal_derivative(Array2::from_elem((4, 3), 2.5).view()).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(temporal_derivative(Array2::<f64>::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn derivative_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 50, 100);
        let d = temporal_derivative(x.view()).unwrap();
        for t in 0..50 {
            for j in 0..100 {
                let expected = if t == 0 { 0.0 } else { x[[t, j]] - x[[t - 1, j]] };
                assert_eq!(d[[t, j]], expected);
            }
        }
    }

    #[test]
    fn clip_std_examples() {
        assert_eq!(clip_std(array![[0.0], [2.0]].view()).unwrap(), array![1.0]);
        assert!(clip_std(array![[1.0, 2.0]].view()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 50, 6);
        let sd = clip_std(x.view()).unwrap();
        for j in 0..6 {
            let mean = (0..50).map(|t| x[[t, j]]).sum::<f64>() / 50.0;
            let var = (0..50).map(|t| (x[[t, j]] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((sd[j] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn style_width_and_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let motion =
            MotionSequence::new(random(&mut rng, 50, 100), random(&mut rng, 50, 6), 25.0).unwrap();
        let audio = random(&mut rng, 50, 128);
        let style = compute_speaker_style(audio.view(), &motion, StdWindow::Clip).unwrap();
        assert_eq!((style.frames(), style.width()), (50, 334));
        let v = style.values();
        assert_eq!(v.slice(s![.., ..128]), audio);
        let sd_beta = clip_std(motion.beta()).unwrap();
        let sd_dpose = clip_std(temporal_derivative(motion.pose()).unwrap().view()).unwrap();
        for t in [0, 17, 49] {
            for j in 0..100 {
                assert_eq!(v[[t, 128 + j]], sd_beta[j]);
            }
            for j in 0..6 {
                assert_eq!(v[[t, 328 + j]], sd_dpose[j]);
            }
        }
    }

    #[test]
    fn constant_motion_has_zero_std_blocks() {
        let motion = MotionSequence::new(
            Array2::from_elem((10, 100), 0.3),
            Array2::from_elem((10, 6), -1.0),
            25.0,
        )
        .unwrap();
        let audio = Array2::from_elem((10, 128), 2.0);
        let style = compute_speaker_style(audio.view(), &motion, StdWindow::Clip).unwrap();
        assert!(style.values().slice(s![.., 128..]).iter().all(|&v| v == 0.0));
        assert!(style.values().slice(s![.., ..128]).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn style_rejects_length_mismatch() {
        let motion =
            MotionSequence::new(Array2::zeros((10, 100)), Array2::zeros((10, 6)), 25.0).unwrap();
        let audio = Array2::zeros((9, 128));
        assert!(matches!(
            compute_speaker_style(audio.view(), &motion, StdWindow::Clip),
            Err(ElpError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sliding_window_covering_clip_equals_clip_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let motion =
            MotionSequence::new(random(&mut rng, 12, 5), random(&mut rng, 12, 2), 25.0).unwrap();
        let a = style_statistics(&motion, StdWindow::Clip).unwrap();
        let b = style_statistics(&motion, StdWindow::Sliding { half_width: 12 }).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn closure_ratio_examples() {
        let open = EyeLandmarkSequence::new(vec![[eye(4.5, [0.0, 0.0], 1.0); 2]; 5]);
        let r = eye_closure_ratio(&open).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));

        let mut frames = vec![[eye(4.5, [0.0, 0.0], 1.0); 2]; 5];
        frames[2] = [eye(0.0, [0.0, 0.0], 1.0); 2];
        let ear = eye_aspect_ratio(&EyeLandmarkSequence::new(frames.clone())).unwrap();
        assert_eq!(ear[2], 0.0);
        let r = eye_closure_ratio(&EyeLandmarkSequence::new(frames)).unwrap();
        assert_eq!(r[2], 1.0);
    }

    #[test]
    fn degenerate_corners_are_rejected() {
        let mut e = eye(4.5, [0.0, 0.0], 1.0);
        e[3] = e[0];
        let seq = EyeLandmarkSequence::new(vec![[eye(4.5, [0.0, 0.0], 1.0); 2], [e, e]]);
        assert!(matches!(
            eye_closure_ratio(&seq),
            Err(ElpError::DegenerateEye { frame: 1 })
        ));
    }

    #[test]
    fn extract_blink_examples() {
        assert_eq!(extract_blink(&[0.0; 6], 0.5).unwrap().count_closed(), 0);
        let phi = extract_blink(&[0.0, 0.7, 0.8, 0.9, 0.1], 0.5).unwrap();
        assert_eq!(phi.values(), &[0, 1, 1, 1, 0]);
        assert_eq!(phi.count_events(), 1);
        assert!(extract_blink(&[0.0], 1.0).is_err());
        assert!(extract_blink(&[0.0], 0.0).is_err());
    }

    #[test]
    fn emotion_vector_rejects_soft_labels() {
        assert!(EmotionVector::from_one_hot(&[0.0, 1.0, 0.0]).is_ok());
        assert!(EmotionVector::from_one_hot(&[0.5, 0.5]).is_err());
        assert!(EmotionVector::from_one_hot(&[1.0, 1.0]).is_err());
        assert_eq!(EmotionVector::from_argmax(&[0.2, 0.9, 0.9]).unwrap().slot(), 1);
    }

    #[test]
    fn blink_sequence_rejects_non_binary() {
        assert!(BlinkSequence::new(vec![0, 1, 2]).is_err());
    }
}
