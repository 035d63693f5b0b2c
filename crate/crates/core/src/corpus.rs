//! Synthetic conversation corpus with a planted, learnable speaker-to-listener
//! relation, plus the on-disk clip and manifest formats.
//!
//! Generative model per clip with emotion `e`:
//! - speaker latent `z_k(t) = A_e a_k sin(2 pi f_e r_k t / fps + phase_k)`
//! - speaker motion `M z(t)` plus noise, with a closure pulse on the closure
//!   coefficient `lag` frames before every listener blink
//! - audio `P_e [beta; pose](t)` plus noise
//! - listener motion `c_e + g_e M z(t - lag)` plus noise
//! - listener blinks from a renewal process with rate `rate_e` and a
//!   refractory gap

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ElpError, Result};
use crate::motion::{
    AudioFeatureSequence, BlinkSequence, EmotionVector, EyeLandmarkSequence, EyeLandmarks,
    MotionSequence, AUDIO_DIM, BETA_DIM, DEFAULT_FPS, POSE_DIM,
};
use crate::network::hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionPattern {
    pub name: String,
    /// Speaker motion amplitude.
    pub amplitude: f64,
    /// Base oscillation frequency in Hz.
    pub frequency: f64,
    /// Listener response gain.
    pub gain: f64,
    /// Listener blink events per frame.
    pub blink_rate: f64,
}

/// Default patterns: slots `neutral, positive, negative` for three emotions;
/// evenly spaced parameters otherwise.
pub fn default_patterns(n: usize) -> Vec<EmotionPattern> {
    let named = |name: &str, amplitude, frequency, gain, blink_rate| EmotionPattern {
        name: name.to_string(),
        amplitude,
        frequency,
        gain,
        blink_rate,
    };
    match n {
        3 => vec![
            named("neutral", 1.0, 0.9, 0.8, 0.05),
            named("positive", 1.4, 1.4, 1.2, 0.03),
            named("negative", 0.6, 0.5, 0.5, 0.07),
        ],
        2 => vec![
            named("positive", 1.4, 1.4, 1.2, 0.03),
            named("negative", 0.6, 0.5, 0.5, 0.07),
        ],
        _ => (0..n)
            .map(|i| {
                let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                named(
                    &format!("emotion{i}"),
                    0.6 + 0.8 * f,
                    0.5 + 0.9 * f,
                    0.5 + 0.7 * f,
                    0.07 - 0.04 * f,
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub clips: usize,
    pub frames: usize,
    pub fps: f64,
    pub emotions: usize,
    pub beta_dim: usize,
    pub pose_dim: usize,
    pub audio_dim: usize,
    /// Number of sinusoidal latent components.
    pub components: usize,
    pub speaker_noise: f64,
    pub audio_noise: f64,
    pub listener_noise: f64,
    /// Listener response delay in frames.
    pub lag: usize,
    pub refractory: usize,
    pub blink_min_len: usize,
    pub blink_max_len: usize,
    pub closure_index: usize,
    /// Height of the speaker closure pulse preceding each listener blink.
    pub cue_amplitude: f64,
    /// Empty means `default_patterns(emotions)`.
    pub patterns: Vec<EmotionPattern>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            clips: 300,
            frames: 50,
            fps: DEFAULT_FPS,
            emotions: 3,
            beta_dim: BETA_DIM,
            pose_dim: POSE_DIM,
            audio_dim: AUDIO_DIM,
            components: 4,
            speaker_noise: 0.05,
            audio_noise: 0.05,
            listener_noise: 0.02,
            lag: 3,
            refractory: 5,
            blink_min_len: 2,
            blink_max_len: 4,
            closure_index: 0,
            cue_amplitude: 2.0,
            patterns: Vec::new(),
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn patterns(&self) -> Vec<EmotionPattern> {
        if self.patterns.is_empty() {
            default_patterns(self.emotions)
        } else {
            self.patterns.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ElpError::invalid(format!("corpus: {msg}")));
        if self.clips == 0 || self.emotions == 0 || self.components == 0 {
            return bad("clips, emotions and components must be positive".into());
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.beta_dim == 0 || self.pose_dim == 0 || self.audio_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.closure_index >= self.beta_dim {
            return bad(format!("closure_index {} outside beta_dim", self.closure_index));
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        for (name, v) in [
            ("speaker_noise", self.speaker_noise),
            ("audio_noise", self.audio_noise),
            ("listener_noise", self.listener_noise),
            ("cue_amplitude", self.cue_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        if self.blink_min_len == 0 || self.blink_min_len > self.blink_max_len {
            return bad("need 1 <= blink_min_len <= blink_max_len".into());
        }
        let patterns = self.patterns();
        if patterns.len() != self.emotions {
            return bad(format!(
                "{} emotion patterns for {} emotions",
                patterns.len(),
                self.emotions
            ));
        }
        let min_gap = (self.blink_max_len + self.refractory + 1) as f64;
        for p in &patterns {
            if !(p.blink_rate > 0.0 && 1.0 / p.blink_rate >= min_gap) {
                return bad(format!(
                    "blink rate {} of {} is incompatible with the refractory gap",
                    p.blink_rate, p.name
                ));
            }
            if !(p.amplitude.is_finite() && p.frequency.is_finite() && p.gain.is_finite()) {
                return bad(format!("pattern {} has non-finite parameters", p.name));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// 70/10/20 assignment from a hash of the clip id.
pub fn split_of(id: u64) -> Split {
    match splitmix64(id) % 100 {
        0..=69 => Split::Train,
        70..=79 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationClip {
    pub id: u64,
    pub speaker: MotionSequence,
    pub audio: AudioFeatureSequence,
    pub listener: MotionSequence,
    pub blink: BlinkSequence,
    pub emotion: EmotionVector,
}

impl ConversationClip {
    pub fn new(
        id: u64,
        speaker: MotionSequence,
        audio: AudioFeatureSequence,
        listener: MotionSequence,
        blink: BlinkSequence,
        emotion: EmotionVector,
    ) -> Result<Self> {
        let t = speaker.frames();
        for (what, n) in [
            ("clip audio", audio.frames()),
            ("clip listener", listener.frames()),
            ("clip blink", blink.len()),
        ] {
            if n != t {
                return Err(ElpError::LengthMismatch {
                    what,
                    left: n,
                    right: t,
                });
            }
        }
        Ok(Self {
            id,
            speaker,
            audio,
            listener,
            blink,
            emotion,
        })
    }

    pub fn frames(&self) -> usize {
        self.speaker.frames()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<ConversationClip>,
    pub val: Vec<ConversationClip>,
    pub test: Vec<ConversationClip>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[ConversationClip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &ConversationClip> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * gaussian(rng))
}

/// Shared generator parameters drawn once per corpus seed.
struct World {
    mix_beta: Array2<f64>,
    mix_pose: Array2<f64>,
    audio_proj: Vec<Array2<f64>>,
    listener_beta_offset: Vec<Array1<f64>>,
    listener_pose_offset: Vec<Array1<f64>>,
    ratios: Vec<f64>,
}

impl World {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Separate stream so the world never shares draws with any clip.
        rng.set_stream(1);
        let k = spec.components;
        let norm = 1.0 / (k as f64).sqrt();
        let mix_beta = gaussian_matrix(&mut rng, spec.beta_dim, k, norm);
        let mix_pose = gaussian_matrix(&mut rng, spec.pose_dim, k, 0.3 * norm);
        let width = spec.beta_dim + spec.pose_dim;
        let audio_proj = (0..spec.emotions)
            .map(|_| gaussian_matrix(&mut rng, spec.audio_dim, width, 2.0 / (width as f64).sqrt()))
            .collect();
        let listener_beta_offset = (0..spec.emotions)
            .map(|_| Array1::from_shape_fn(spec.beta_dim, |_| 0.3 * gaussian(&mut rng)))
            .collect();
        let listener_pose_offset = (0..spec.emotions)
            .map(|_| Array1::from_shape_fn(spec.pose_dim, |_| 0.1 * gaussian(&mut rng)))
            .collect();
        let ratios = (0..k).map(|i| 1.0 + 0.73 * i as f64).collect();
        Self {
            mix_beta,
            mix_pose,
            audio_proj,
            listener_beta_offset,
            listener_pose_offset,
            ratios,
        }
    }
}

/// Blink starts and lengths of a renewal process observed on `0..frames`,
/// started early enough to be stationary at frame 0. Events may begin
/// before 0 and are then clipped by the caller.
pub fn sample_blink_events(
    rate: f64,
    frames: usize,
    min_len: usize,
    max_len: usize,
    refractory: usize,
    rng: &mut impl Rng,
) -> Vec<(isize, usize)> {
    let mean_len = (min_len + max_len) as f64 / 2.0;
    let slack = (1.0 / rate - mean_len - refractory as f64).max(0.0);
    let p = 1.0 / (1.0 + slack);
    let wait = Geometric::new(p).expect("probability in (0, 1]");
    let mut events = Vec::new();
    let mut start = -(4.0 / rate).ceil() as isize + wait.sample(rng) as isize;
    while start < frames as isize {
        let len = rng.random_range(min_len..=max_len);
        events.push((start, len));
        start += (len + refractory) as isize + wait.sample(rng) as isize;
    }
    events
}

pub fn generate_clip(spec: &CorpusSpec, id: u64, emotion: usize) -> Result<ConversationClip> {
    let world = World::new(spec);
    generate_with_world(spec, &world, id, emotion)
}

fn generate_with_world(spec: &CorpusSpec, world: &World, id: u64, emotion: usize) -> Result<ConversationClip> {
    let pattern = &spec.patterns()[emotion];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ id);
    let (t_len, k) = (spec.frames, spec.components);
    let phases: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let scales: Vec<f64> = (0..k).map(|_| rng.random_range(0.8..1.2)).collect();
    let latent = |t: f64| -> Array1<f64> {
        Array1::from_shape_fn(k, |c| {
            let f = pattern.frequency * world.ratios[c];
            pattern.amplitude * scales[c] * (std::f64::consts::TAU * f * t / spec.fps + phases[c]).sin()
        })
    };

    let mut speaker_beta = Array2::zeros((t_len, spec.beta_dim));
    let mut speaker_pose = Array2::zeros((t_len, spec.pose_dim));
    let mut listener_beta = Array2::zeros((t_len, spec.beta_dim));
    let mut listener_pose = Array2::zeros((t_len, spec.pose_dim));
    for t in 0..t_len {
        let z = latent(t as f64);
        let z_lag = latent(t as f64 - spec.lag as f64);
        speaker_beta.row_mut(t).assign(&world.mix_beta.dot(&z));
        speaker_pose.row_mut(t).assign(&world.mix_pose.dot(&z));
        let lb = &world.listener_beta_offset[emotion] + &(world.mix_beta.dot(&z_lag) * pattern.gain);
        let lp = &world.listener_pose_offset[emotion] + &(world.mix_pose.dot(&z_lag) * pattern.gain);
        listener_beta.row_mut(t).assign(&lb);
        listener_pose.row_mut(t).assign(&lp);
    }

    let events = sample_blink_events(
        pattern.blink_rate,
        t_len,
        spec.blink_min_len,
        spec.blink_max_len,
        spec.refractory,
        &mut rng,
    );
    let mut phi = vec![0u8; t_len];
    for &(start, len) in &events {
        for j in 0..len as isize {
            let listener_t = start + j;
            if (0..t_len as isize).contains(&listener_t) {
                phi[listener_t as usize] = 1;
            }
            let cue_t = listener_t - spec.lag as isize;
            if (0..t_len as isize).contains(&cue_t) {
                speaker_beta[[cue_t as usize, spec.closure_index]] += spec.cue_amplitude;
            }
        }
    }

    speaker_beta.mapv_inplace(|v| v + spec.speaker_noise * gaussian(&mut rng));
    speaker_pose.mapv_inplace(|v| v + spec.speaker_noise * gaussian(&mut rng));
    listener_beta.mapv_inplace(|v| v + spec.listener_noise * gaussian(&mut rng));
    listener_pose.mapv_inplace(|v| v + spec.listener_noise * gaussian(&mut rng));

    let stacked = ndarray::concatenate![ndarray::Axis(1), speaker_beta, speaker_pose];
    let mut audio = stacked.dot(&world.audio_proj[emotion].t());
    audio.mapv_inplace(|v| v + spec.audio_noise * gaussian(&mut rng));

    ConversationClip::new(
        id,
        MotionSequence::new(speaker_beta, speaker_pose, spec.fps)?,
        AudioFeatureSequence::new(audio)?,
        MotionSequence::new(listener_beta, listener_pose, spec.fps)?,
        BlinkSequence::new(phi)?,
        EmotionVector::new(emotion, spec.emotions)?,
    )
}

/// Balanced labels: a shuffled round-robin over emotion slots.
pub fn emotion_labels(spec: &CorpusSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut labels: Vec<usize> = (0..spec.clips).map(|i| i % spec.emotions).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec);
    let labels = emotion_labels(spec);
    let mut corpus = Corpus {
        spec: spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (id, &emotion) in labels.iter().enumerate() {
        let id = id as u64;
        let clip = generate_with_world(spec, &world, id, emotion)?;
        match split_of(id) {
            Split::Train => corpus.train.push(clip),
            Split::Val => corpus.val.push(clip),
            Split::Test => corpus.test.push(clip),
        }
    }
    Ok(corpus)
}

/// Eye landmarks whose closure ratio exceeds 0.5 exactly on the frames where
/// `phi` is 1. Each frame gets a random translation and scale.
pub fn synthesize_eye_landmarks(phi: &BlinkSequence, rng: &mut impl Rng) -> EyeLandmarkSequence {
    let frames = phi
        .values()
        .iter()
        .map(|&closed| {
            let offset = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            let scale = rng.random_range(0.5..2.0);
            // EAR of the open eye is 0.3 +- 3%, closed eye 0.05 +- 20%.
            let height = if closed == 1 {
                0.75 * rng.random_range(0.8..1.2)
            } else {
                4.5 * rng.random_range(0.97..1.03)
            };
            let eye = |dx: f64| -> EyeLandmarks {
                let p = |x: f64, y: f64| [offset[0] + scale * (x + dx), offset[1] + scale * y];
                [
                    p(0.0, 0.0),
                    p(10.0, height),
                    p(20.0, height),
                    p(30.0, 0.0),
                    p(20.0, -height),
                    p(10.0, -height),
                ]
            };
            [eye(0.0), eye(60.0)]
        })
        .collect();
    EyeLandmarkSequence::new(frames)
}

const HEADER_PREFIX: &str = "#elp-clip v1";

fn write_rows(out: &mut String, name: &str, rows: ndarray::ArrayView2<'_, f64>) {
    let _ = writeln!(out, "[{name}]");
    for row in rows.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

/// Text form of a clip; floats carry 17 significant digits.
pub fn format_clip(clip: &ConversationClip) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER_PREFIX} T={} N={} emotion={} dims={},{},{}",
        clip.frames(),
        clip.emotion.count(),
        clip.emotion.slot(),
        clip.speaker.beta_dim(),
        clip.speaker.pose_dim(),
        clip.audio.dim()
    );
    write_rows(&mut out, "speaker_beta", clip.speaker.beta());
    write_rows(&mut out, "speaker_pose", clip.speaker.pose());
    write_rows(&mut out, "audio", clip.audio.feats());
    write_rows(&mut out, "listener_beta", clip.listener.beta());
    write_rows(&mut out, "listener_pose", clip.listener.pose());
    let _ = writeln!(out, "[blink]");
    for v in clip.blink.values() {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn write_clip(clip: &ConversationClip, path: &Path) -> Result<()> {
    fs::write(path, format_clip(clip)).map_err(|e| ElpError::io(path, e))
}

struct Header {
    frames: usize,
    emotions: usize,
    emotion: usize,
    dims: [usize; 3],
}

fn parse_header(line: &str) -> std::result::Result<Header, String> {
    let rest = line
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| format!("expected header starting with '{HEADER_PREFIX}'"))?;
    let mut fields = BTreeMap::new();
    for token in rest.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| format!("malformed header field '{token}'"))?;
        fields.insert(k, v);
    }
    let int = |k: &str| -> std::result::Result<usize, String> {
        fields
            .get(k)
            .ok_or_else(|| format!("header is missing {k}="))?
            .parse()
            .map_err(|_| format!("header field {k} is not an integer"))
    };
    let dims: Vec<usize> = fields
        .get("dims")
        .ok_or("header is missing dims=")?
        .split(',')
        .map(|d| d.parse().map_err(|_| format!("bad dims entry '{d}'")))
        .collect::<std::result::Result<_, _>>()?;
    let dims: [usize; 3] = dims
        .try_into()
        .map_err(|_| "dims must list three widths".to_string())?;
    Ok(Header {
        frames: int("T")?,
        emotions: int("N")?,
        emotion: int("emotion")?,
        dims,
    })
}

struct Reader<'a> {
    path: &'a Path,
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, line: usize, msg: impl Into<String>) -> ElpError {
        ElpError::Format {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.lines.by_ref() {
            self.last_line = i + 1;
            if !l.trim().is_empty() {
                return Some((i + 1, l.trim()));
            }
        }
        None
    }

    fn section(&mut self, name: &str) -> Result<()> {
        match self.next_line() {
            Some((_, l)) if l == format!("[{name}]") => Ok(()),
            Some((n, l)) => Err(self.err(n, format!("expected section [{name}], found '{l}'"))),
            None => Err(self.err(self.last_line, format!("missing section [{name}]"))),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, width: usize) -> Result<Array2<f64>> {
        self.section(name)?;
        let mut values = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let (n, l) = match self.lines.peek() {
                Some((_, l)) if !l.trim_start().starts_with('[') => {
                    self.next_line().expect("peeked line")
                }
                _ => {
                    return Err(self.err(
                        self.last_line,
                        format!("section [{name}] expected {rows} rows, found {r}"),
                    ))
                }
            };
            let before = values.len();
            for tok in l.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(n, format!("'{tok}' is not a number")))?;
                if !v.is_finite() {
                    return Err(self.err(n, format!("non-finite value '{tok}'")));
                }
                values.push(v);
            }
            let found = values.len() - before;
            if found != width {
                return Err(self.err(n, format!("section [{name}] expected width {width}, found {found}")));
            }
        }
        Ok(Array2::from_shape_vec((rows, width), values).expect("rows * width values"))
    }

    fn blink(&mut self, rows: usize) -> Result<Vec<u8>> {
        self.section("blink")?;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (n, l) = self.next_line().ok_or_else(|| {
                self.err(self.last_line, format!("section [blink] expected {rows} rows, found {r}"))
            })?;
            match l {
                "0" => out.push(0),
                "1" => out.push(1),
                _ => return Err(self.err(n, format!("blink value '{l}' is not 0 or 1"))),
            }
        }
        if let Some((n, l)) = self.next_line() {
            return Err(self.err(n, format!("unexpected trailing content '{l}'")));
        }
        Ok(out)
    }
}

/// Parses the text form of a clip; `path` only labels errors.
pub fn parse_clip(text: &str, path: &Path, id: u64, fps: f64) -> Result<ConversationClip> {
    let mut reader = Reader {
        path,
        lines: text.lines().enumerate().peekable(),
        last_line: 0,
    };
    let (n, line) = reader
        .next_line()
        .ok_or_else(|| reader.err(1, "empty file"))?;
    let h = parse_header(line).map_err(|m| reader.err(n, m))?;
    if h.emotion >= h.emotions {
        return Err(reader.err(n, format!("emotion {} outside 0..{}", h.emotion, h.emotions)));
    }
    let [db, dp, da] = h.dims;
    let t = h.frames;
    let sb = reader.matrix("speaker_beta", t, db)?;
    let sp = reader.matrix("speaker_pose", t, dp)?;
    let audio = reader.matrix("audio", t, da)?;
    let lb = reader.matrix("listener_beta", t, db)?;
    let lp = reader.matrix("listener_pose", t, dp)?;
    let blink = reader.blink(t)?;
    ConversationClip::new(
        id,
        MotionSequence::new(sb, sp, fps)?,
        AudioFeatureSequence::new(audio)?,
        MotionSequence::new(lb, lp, fps)?,
        BlinkSequence::new(blink)?,
        EmotionVector::new(h.emotion, h.emotions)?,
    )
}

/// Reads a clip file; the id is taken from a `clip_<id>.txt` file name when present.
pub fn read_clip(path: &Path) -> Result<ConversationClip> {
    let text = fs::read_to_string(path).map_err(|e| ElpError::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("clip_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    parse_clip(&text, path, id, DEFAULT_FPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub emotion: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec_digest: String,
    pub spec: CorpusSpec,
    pub clips: Vec<ManifestEntry>,
}

pub fn clip_path(root: &Path, split: Split, id: u64) -> PathBuf {
    root.join(split.name()).join(format!("clip_{id}.txt"))
}

/// Writes `root/{train,val,test}/clip_<id>.txt` and `root/manifest.json`.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| ElpError::io(&dir, e))?;
        for clip in corpus.split(split) {
            write_clip(clip, &clip_path(root, split, clip.id))?;
            entries.push(ManifestEntry {
                id: clip.id,
                emotion: clip.emotion.slot(),
                split,
            });
        }
    }
    entries.sort_by_key(|e| e.id);
    let manifest = Manifest {
        format: HEADER_PREFIX.trim_start_matches('#').to_string(),
        spec_digest: corpus.spec.digest(),
        spec: corpus.spec.clone(),
        clips: entries,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| ElpError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| ElpError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_corpus(root: &Path) -> Result<Corpus> {
    let manifest = read_manifest(root)?;
    let mut corpus = Corpus {
        spec: manifest.spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.clips {
        let path = clip_path(root, e.split, e.id);
        let text = fs::read_to_string(&path).map_err(|err| ElpError::io(&path, err))?;
        let clip = parse_clip(&text, &path, e.id, manifest.spec.fps)?;
        if clip.emotion.slot() != e.emotion {
            return Err(ElpError::Format {
                path,
                line: 1,
                msg: format!("emotion {} disagrees with manifest {}", clip.emotion.slot(), e.emotion),
            });
        }
        match e.split {
            Split::Train => corpus.train.push(clip),
            Split::Val => corpus.val.push(clip),
            Split::Test => corpus.test.push(clip),
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{eye_closure_ratio, extract_blink};

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            clips: 30,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.train[0], c.train[0]);
    }

    #[test]
    fn labels_are_balanced() {
        let spec = CorpusSpec {
            clips: 301,
            ..CorpusSpec::default()
        };
        let labels = emotion_labels(&spec);
        let mut counts = vec![0usize; 3];
        for l in labels {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn split_fractions_are_roughly_70_10_20() {
        let mut counts = BTreeMap::new();
        for id in 0..10_000u64 {
            *counts.entry(split_of(id)).or_insert(0usize) += 1;
        }
        assert!((6700..7300).contains(&counts[&Split::Train]));
        assert!((800..1200).contains(&counts[&Split::Val]));
        assert!((1700..2300).contains(&counts[&Split::Test]));
    }

    #[test]
    fn clip_text_round_trips_bit_for_bit() {
        let clip = generate_clip(&small_spec(), 11, 2).unwrap();
        let text = format_clip(&clip);
        let back = parse_clip(&text, Path::new("mem"), 11, DEFAULT_FPS).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn truncated_file_names_expected_and_found_rows() {
        let clip = generate_clip(&small_spec(), 3, 0).unwrap();
        let text = format_clip(&clip);
        let lines: Vec<&str> = text.lines().collect();
        // Header, section marker, then 10 of 50 speaker_beta rows.
        let cut = lines[..12].join("\n");
        let err = parse_clip(&cut, Path::new("cut.txt"), 3, 25.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 50 rows, found 10"), "{msg}");
    }

    #[test]
    fn format_errors_carry_line_numbers() {
        let clip = generate_clip(&small_spec(), 3, 0).unwrap();
        let text = format_clip(&clip);
        let bad_header = text.replacen("#elp-clip v1", "#elp-clip v9", 1);
        assert!(matches!(
            parse_clip(&bad_header, Path::new("x"), 0, 25.0),
            Err(ElpError::Format { line: 1, .. })
        ));

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = "1.0 2.0".into();
        let err = parse_clip(&lines.join("\n"), Path::new("x"), 0, 25.0).unwrap_err();
        assert!(matches!(err, ElpError::Format { line: 3, .. }), "{err}");

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let last = lines.len() - 1;
        lines[last] = "2".into();
        let err = parse_clip(&lines.join("\n"), Path::new("x"), 0, 25.0).unwrap_err();
        assert!(matches!(err, ElpError::Format { line, .. } if line == last + 1), "{err}");
    }

    #[test]
    fn landmark_blinks_recover_planted_events() {
        let clip = generate_clip(&small_spec(), 5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let landmarks = synthesize_eye_landmarks(&clip.blink, &mut rng);
        let ratio = eye_closure_ratio(&landmarks).unwrap();
        let phi = extract_blink(&ratio, 0.5).unwrap();
        assert_eq!(phi, clip.blink);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = CorpusSpec::default();
        spec.emotions = 4;
        spec.patterns = default_patterns(3);
        assert!(spec.validate().is_err());
        let spec = CorpusSpec {
            refractory: 30,
            ..CorpusSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(CorpusSpec {
            frames: 1,
            ..CorpusSpec::default()
        }
        .validate()
        .is_err());
    }
}
