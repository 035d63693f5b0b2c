//! Toy-scale audio encoder, TDNN emotion classifier, head encoder and the two
//! decoders, assembled into the full listener forward pass.

use std::fs;
use std::io::Write;
use std::path::Path;

use elp_autodiff::{Tape, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ElpError, Result};
use crate::latent::{
    argmax_one_hot_var, codewords_from_values, gumbel_softmax_var, sample_gumbel,
    split_rearrange_var, Codewords, HeadLogits,
};
use crate::motion::{
    argmax, style_statistics, AudioFeatureSequence, BlinkSequence, EmotionVector,
    MotionSequence, SpeakerStyleSequence, StdWindow, AUDIO_DIM, AUDIO_EMBED_DIM, BETA_DIM,
    POSE_DIM,
};
use crate::nn::{dropout, Bound, Conv1d, Gru, Linear, Padding, ParamStore};

/// Which discrete space feeds the decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    /// Emotion-partitioned space of width `N * V` per head.
    Partitioned,
    /// Ungated base space of width `V` per head.
    Base,
}

/// Source of the emotion that gates the latent space during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionGate {
    Teacher,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub beta_dim: usize,
    pub pose_dim: usize,
    pub audio_dim: usize,
    pub audio_embed: usize,
    pub audio_hidden: Vec<usize>,
    pub audio_kernel: usize,
    pub dropout: f64,
    pub tdnn_channels: Vec<usize>,
    pub tdnn_dilations: Vec<usize>,
    pub tdnn_kernel: usize,
    pub classifier_hidden: usize,
    pub head_channels: Vec<usize>,
    pub head_kernel: usize,
    pub recurrent: usize,
    pub decoder_hidden: usize,
    pub decoder_kernel: usize,
    pub heads: usize,
    pub categories: usize,
    /// Multiplier on the initial `heads.out` weights.
    pub head_init_gain: f64,
    pub emotions: usize,
    pub latent: LatentSpace,
    pub gate: EmotionGate,
    pub style_window: StdWindow,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            beta_dim: BETA_DIM,
            pose_dim: POSE_DIM,
            audio_dim: AUDIO_DIM,
            audio_embed: AUDIO_EMBED_DIM,
            audio_hidden: vec![32, 32],
            audio_kernel: 3,
            dropout: 0.1,
            tdnn_channels: vec![32, 32, 32],
            tdnn_dilations: vec![1, 2, 3],
            tdnn_kernel: 3,
            classifier_hidden: 32,
            head_channels: vec![48, 48, 48],
            head_kernel: 3,
            recurrent: 48,
            decoder_hidden: 48,
            decoder_kernel: 3,
            heads: 128,
            categories: 64,
            head_init_gain: 4.0,
            emotions: 3,
            latent: LatentSpace::Partitioned,
            gate: EmotionGate::Teacher,
            style_window: StdWindow::Clip,
        }
    }
}

impl NetworkConfig {
    /// Small widths for finite-difference verification.
    pub fn reduced() -> Self {
        Self {
            audio_embed: 8,
            audio_hidden: vec![6],
            dropout: 0.0,
            tdnn_channels: vec![6, 6],
            tdnn_dilations: vec![1, 2],
            classifier_hidden: 6,
            head_channels: vec![6],
            recurrent: 5,
            decoder_hidden: 6,
            heads: 4,
            categories: 4,
            emotions: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_dim", self.beta_dim),
            ("pose_dim", self.pose_dim),
            ("audio_dim", self.audio_dim),
            ("audio_embed", self.audio_embed),
            ("classifier_hidden", self.classifier_hidden),
            ("recurrent", self.recurrent),
            ("decoder_hidden", self.decoder_hidden),
            ("heads", self.heads),
            ("categories", self.categories),
            ("emotions", self.emotions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ElpError::invalid(format!("network.{name} must be positive")));
        }
        for (name, k) in [
            ("audio_kernel", self.audio_kernel),
            ("head_kernel", self.head_kernel),
            ("decoder_kernel", self.decoder_kernel),
            ("tdnn_kernel", self.tdnn_kernel),
        ] {
            if k == 0 || k % 2 == 0 {
                return Err(ElpError::invalid(format!("network.{name} must be odd, got {k}")));
            }
        }
        if self.tdnn_channels.is_empty() || self.tdnn_channels.len() != self.tdnn_dilations.len() {
            return Err(ElpError::invalid(
                "network.tdnn_channels and tdnn_dilations must be nonempty and equally long",
            ));
        }
        if self.head_channels.is_empty() {
            return Err(ElpError::invalid("network.head_channels must be nonempty"));
        }
        let widths = self
            .audio_hidden
            .iter()
            .chain(&self.tdnn_channels)
            .chain(&self.head_channels)
            .chain(&self.tdnn_dilations);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(ElpError::invalid("network layer widths and dilations must be positive"));
        }
        if !(self.head_init_gain.is_finite() && self.head_init_gain > 0.0) {
            return Err(ElpError::invalid("network.head_init_gain must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ElpError::invalid("network.dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn style_width(&self) -> usize {
        self.audio_embed + 2 * self.beta_dim + self.pose_dim
    }

    pub fn stats_width(&self) -> usize {
        2 * self.beta_dim + self.pose_dim
    }

    /// Per-head width of the decoder input.
    pub fn code_width(&self) -> usize {
        match self.latent {
            LatentSpace::Partitioned => self.emotions * self.categories,
            LatentSpace::Base => self.categories,
        }
    }

    /// Minimum clip length accepted by the classifier.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .tdnn_dilations
            .iter()
            .map(|d| d * (self.tdnn_kernel - 1))
            .sum::<usize>()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Per-call forward settings. In the infer phase `hard` and `tau` are unused:
/// discretization is the noise-free argmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions<'a> {
    pub phase: Phase,
    pub hard: bool,
    pub tau: f64,
    /// Emotion slot per clip, taking precedence over every other source.
    pub emotion_override: Option<&'a [usize]>,
}

impl ForwardOptions<'_> {
    pub fn infer() -> Self {
        Self {
            phase: Phase::Infer,
            hard: true,
            tau: 1.0,
            emotion_override: None,
        }
    }

    pub fn train(tau: f64, hard: bool) -> Self {
        Self {
            phase: Phase::Train,
            hard,
            tau,
            emotion_override: None,
        }
    }
}

/// Model-ready tensors of one clip, row-major `[T, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClip {
    pub frames: usize,
    pub audio: Vec<f64>,
    pub stats: Vec<f64>,
    pub beta: Vec<f64>,
    pub pose: Vec<f64>,
    pub blink: Vec<f64>,
    pub emotion: usize,
}

impl PreparedClip {
    pub fn new(
        audio: &AudioFeatureSequence,
        speaker: &MotionSequence,
        window: StdWindow,
        listener: Option<(&MotionSequence, &BlinkSequence)>,
        emotion: usize,
    ) -> Result<Self> {
        let frames = speaker.frames();
        if audio.frames() != frames {
            return Err(ElpError::LengthMismatch {
                what: "audio/speaker frames",
                left: audio.frames(),
                right: frames,
            });
        }
        let stats = style_statistics(speaker, window)?;
        let (beta, pose, blink) = match listener {
            Some((m, phi)) => {
                if m.frames() != frames || phi.len() != frames {
                    return Err(ElpError::LengthMismatch {
                        what: "listener/speaker frames",
                        left: m.frames().min(phi.len()),
                        right: frames,
                    });
                }
                (
                    m.beta().iter().copied().collect(),
                    m.pose().iter().copied().collect(),
                    phi.as_f64(),
                )
            }
            None => (Vec::new(), Vec::new(), Vec::new()),
        };
        Ok(Self {
            frames,
            audio: audio.feats().iter().copied().collect(),
            stats: stats.iter().copied().collect(),
            beta,
            pose,
            blink,
            emotion,
        })
    }

    pub fn has_targets(&self) -> bool {
        !self.blink.is_empty()
    }
}

/// Clips stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub frames: usize,
    pub audio: Vec<f64>,
    pub stats: Vec<f64>,
    pub beta: Vec<f64>,
    pub pose: Vec<f64>,
    pub blink: Vec<f64>,
    pub emotions: Vec<usize>,
}

impl Batch {
    pub fn stack(clips: &[&PreparedClip]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| ElpError::invalid("empty batch"))?;
        let frames = first.frames;
        if let Some(c) = clips.iter().find(|c| c.frames != frames) {
            return Err(ElpError::LengthMismatch {
                what: "batch clip frames",
                left: c.frames,
                right: frames,
            });
        }
        let gather = |f: fn(&PreparedClip) -> &Vec<f64>| -> Vec<f64> {
            clips.iter().flat_map(|c| f(c).iter().copied()).collect()
        };
        Ok(Self {
            size: clips.len(),
            frames,
            audio: gather(|c| &c.audio),
            stats: gather(|c| &c.stats),
            beta: gather(|c| &c.beta),
            pose: gather(|c| &c.pose),
            blink: gather(|c| &c.blink),
            emotions: clips.iter().map(|c| c.emotion).collect(),
        })
    }
}

/// Tape handles produced by [`AseModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[B, T, beta_dim]`
    pub beta: Var,
    /// `[B, T, pose_dim]`
    pub pose: Var,
    /// `[B, T]`
    pub blink_logit: Var,
    /// `[B, T]`, sigmoid of the logit
    pub blink_prob: Var,
    /// `[B, N]`
    pub emotion_logits: Var,
    /// `[B, N]`, softmax of the logits
    pub emotion_probs: Var,
    /// `[B, T, H, code_width]`
    pub latent: Var,
    /// Emotion slot that gated each clip.
    pub gating: Vec<usize>,
}

/// Decoded listener motion for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ListenerPrediction {
    pub beta_pred: Array2<f64>,
    pub pose_pred: Array2<f64>,
    pub blink_prob: Vec<f64>,
    pub emotion_logits: Vec<f64>,
}

impl ListenerPrediction {
    pub fn motion(&self, fps: f64) -> Result<MotionSequence> {
        MotionSequence::new(self.beta_pred.clone(), self.pose_pred.clone(), fps)
    }

    pub fn blink(&self, threshold: f64) -> BlinkSequence {
        BlinkSequence::from_probabilities(&self.blink_prob, threshold)
    }
}

/// Per-feature affine map `(x - mean) / std` on the style statistics.
/// Fitted once from training clips; not a trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleNorm {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl StyleNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Moments over every frame of `clips`. Features with std below 1e-8 keep unit scale.
    pub fn fit(clips: &[&PreparedClip], width: usize) -> Result<Self> {
        let frames: usize = clips.iter().map(|c| c.frames).sum();
        if frames == 0 {
            return Err(ElpError::invalid("style normalization needs at least one frame"));
        }
        let rows = || clips.iter().flat_map(|c| c.stats.chunks_exact(width));
        let n = frames as f64;
        let mut mean = vec![0.0; width];
        for row in rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; width];
        for row in rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.iter().map(|v| if v.sqrt() < 1e-8 { 1.0 } else { v.sqrt() }).collect();
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Normalizes row-major `[.., width]` values.
    pub fn apply(&self, stats: &[f64]) -> Vec<f64> {
        let width = self.mean.len();
        stats
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % width]) / self.std[i % width])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AseModel {
    config: NetworkConfig,
    params: ParamStore,
    style_norm: StyleNorm,
    audio: Vec<Conv1d>,
    tdnn: Vec<Conv1d>,
    mlp: [Linear; 2],
    head_convs: Vec<Conv1d>,
    gru: Gru,
    head_out: Linear,
    d1_conv: Conv1d,
    d1_out: Linear,
    d2_conv: Conv1d,
    d2_out: Conv1d,
}

fn relu_stack(tape: &mut Tape, p: &Bound, layers: &[Conv1d], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, p, x)?;
        x = tape.relu(x)?;
    }
    Ok(x)
}

fn array2(tape: &Tape, v: Var, rows: usize, cols: usize, offset: usize) -> Result<Array2<f64>> {
    let values = tape.value(v)?[offset..offset + rows * cols].to_vec();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("slice length matches"))
}

impl AseModel {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut params = ParamStore::new();
        let c = &config;

        let mut audio = Vec::new();
        let mut width = c.audio_dim;
        for (i, &out) in c.audio_hidden.iter().chain([&c.audio_embed]).enumerate() {
            let name = format!("audio.conv{i}");
            audio.push(Conv1d::new(&mut params, &name, width, out, c.audio_kernel, 1, Padding::Same, rng));
            width = out;
        }

        let mut tdnn = Vec::new();
        let mut width = c.style_width();
        for (i, (&out, &d)) in c.tdnn_channels.iter().zip(&c.tdnn_dilations).enumerate() {
            let name = format!("classifier.tdnn{i}");
            tdnn.push(Conv1d::new(&mut params, &name, width, out, c.tdnn_kernel, d, Padding::Valid, rng));
            width = out;
        }
        let mlp = [
            Linear::new(&mut params, "classifier.mlp0", width, c.classifier_hidden, rng),
            Linear::new(&mut params, "classifier.mlp1", c.classifier_hidden, c.emotions, rng),
        ];

        let mut head_convs = Vec::new();
        let mut width = c.style_width();
        for (i, &out) in c.head_channels.iter().enumerate() {
            let name = format!("heads.conv{i}");
            head_convs.push(Conv1d::new(&mut params, &name, width, out, c.head_kernel, 1, Padding::Same, rng));
            width = out;
        }
        let gru = Gru::new(&mut params, "heads.gru", width, c.recurrent, rng);
        let head_out = Linear::new(&mut params, "heads.out", c.recurrent, c.heads * c.categories, rng);
        params.scale(head_out.weight(), c.head_init_gain);

        let latent_width = c.heads * c.code_width();
        let motion_out = c.beta_dim + c.pose_dim;
        let (k, hid) = (c.decoder_kernel, c.decoder_hidden);
        let d1_conv = Conv1d::new(&mut params, "d1.conv", latent_width, hid, k, 1, Padding::Same, rng);
        let d1_out = Linear::new(&mut params, "d1.out", hid, motion_out, rng);
        let d2_conv = Conv1d::new(&mut params, "d2.conv", latent_width, hid, k, 1, Padding::Same, rng);
        let d2_out = Conv1d::new(&mut params, "d2.out", hid, 1, k, 1, Padding::Same, rng);

        Ok(Self {
            style_norm: StyleNorm::identity(config.stats_width()),
            config,
            params,
            audio,
            tdnn,
            mlp,
            head_convs,
            gru,
            head_out,
            d1_conv,
            d1_out,
            d2_conv,
            d2_out,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn style_norm(&self) -> &StyleNorm {
        &self.style_norm
    }

    pub fn set_style_norm(&mut self, norm: StyleNorm) -> Result<()> {
        let width = self.config.stats_width();
        if norm.mean.len() != width {
            return Err(ElpError::WidthMismatch {
                what: "style normalization",
                expected: width,
                found: norm.mean.len(),
            });
        }
        self.style_norm = norm;
        Ok(())
    }

    /// Parameter-name prefixes, one per trainable group.
    pub fn parameter_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for name in self.params.names() {
            let group = name.rsplit_once('.').map_or(name.as_str(), |(g, _)| g);
            if groups.last().map(String::as_str) != Some(group) {
                groups.push(group.to_string());
            }
        }
        groups
    }

    fn input(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var)> {
        let c = &self.config;
        let (b, t) = (batch.size, batch.frames);
        if batch.audio.len() != b * t * c.audio_dim {
            return Err(ElpError::WidthMismatch {
                what: "audio features",
                expected: c.audio_dim,
                found: batch.audio.len() / (b * t).max(1),
            });
        }
        if batch.stats.len() != b * t * c.stats_width() {
            return Err(ElpError::WidthMismatch {
                what: "style statistics",
                expected: c.stats_width(),
                found: batch.stats.len() / (b * t).max(1),
            });
        }
        let audio = tape.constant([b, t, c.audio_dim], batch.audio.clone())?;
        let stats = tape.constant([b, t, c.stats_width()], self.style_norm.apply(&batch.stats))?;
        Ok((audio, stats))
    }

    /// `[B, T, audio_dim]` to `[B, T, audio_embed]`.
    pub fn audio_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        audio: Var,
        phase: Phase,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let x = relu_stack(tape, p, &self.audio, audio)?;
        if phase == Phase::Train {
            dropout(tape, x, self.config.dropout, rng)
        } else {
            Ok(x)
        }
    }

    /// Style `[B, T, S]` to emotion logits `[B, N]`.
    pub fn classifier_var(&self, tape: &mut Tape, p: &Bound, style: Var) -> Result<Var> {
        let t = tape.shape(style)?[1];
        let min = self.config.receptive_field();
        if t < min {
            return Err(ElpError::TooShort {
                what: "emotion classifier",
                min,
                found: t,
            });
        }
        let h = relu_stack(tape, p, &self.tdnn, style)?;
        let pooled = tape.mean_axis(h, 1)?;
        let h = self.mlp[0].forward(tape, p, pooled)?;
        let h = tape.relu(h)?;
        self.mlp[1].forward(tape, p, h)
    }

    /// Style `[B, T, S]` to head logits `[B, T, H, V]`.
    pub fn heads_var(&self, tape: &mut Tape, p: &Bound, style: Var) -> Result<Var> {
        let shape = tape.shape(style)?.to_vec();
        let h = relu_stack(tape, p, &self.head_convs, style)?;
        let h = self.gru.forward(tape, p, h)?;
        let logits = self.head_out.forward(tape, p, h)?;
        let c = &self.config;
        Ok(tape.reshape(logits, [shape[0], shape[1], c.heads, c.categories])?)
    }

    /// Latent `[B, T, H, W]` to `(beta, pose, blink_logit)`.
    pub fn decoders_var(&self, tape: &mut Tape, p: &Bound, latent: Var) -> Result<(Var, Var, Var)> {
        let c = &self.config;
        let shape = tape.shape(latent)?.to_vec();
        if shape.len() != 4 || shape[2] != c.heads || shape[3] != c.code_width() {
            return Err(ElpError::invalid(format!(
                "decoder input must be [B, T, {}, {}], got {shape:?}",
                c.heads,
                c.code_width()
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let flat = tape.reshape(latent, [b, t, c.heads * c.code_width()])?;

        let h = self.d1_conv.forward(tape, p, flat)?;
        let h = tape.relu(h)?;
        let motion = self.d1_out.forward(tape, p, h)?;
        let beta = tape.slice(motion, 2, 0, c.beta_dim)?;
        let pose = tape.slice(motion, 2, c.beta_dim, c.pose_dim)?;

        let h = self.d2_conv.forward(tape, p, flat)?;
        let h = tape.relu(h)?;
        let logit = self.d2_out.forward(tape, p, h)?;
        let logit = tape.reshape(logit, [b, t])?;
        Ok((beta, pose, logit))
    }

    /// Full forward pass on a batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        opts: &ForwardOptions<'_>,
        rng: &mut impl Rng,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let (audio, stats) = self.input(tape, batch)?;
        let a = self.audio_var(tape, p, audio, opts.phase, rng)?;
        let style = tape.concat(&[a, stats], 2)?;

        let emotion_logits = self.classifier_var(tape, p, style)?;
        let emotion_probs = tape.softmax(emotion_logits, 1)?;
        let logits = self.heads_var(tape, p, style)?;

        let gating: Vec<usize> = match (opts.emotion_override, opts.phase, c.gate) {
            (Some(slots), _, _) => {
                if slots.len() != batch.size {
                    return Err(ElpError::LengthMismatch {
                        what: "emotion override batch",
                        left: slots.len(),
                        right: batch.size,
                    });
                }
                slots.to_vec()
            }
            (None, Phase::Train, EmotionGate::Teacher) => batch.emotions.clone(),
            _ => tape
                .value(emotion_logits)?
                .chunks(c.emotions)
                .map(argmax)
                .collect(),
        };
        let emotions = gating
            .iter()
            .map(|&s| EmotionVector::new(s, c.emotions))
            .collect::<Result<Vec<_>>>()?;

        let base = match opts.phase {
            Phase::Infer => argmax_one_hot_var(tape, logits)?,
            Phase::Train => {
                let n: usize = tape.shape(logits)?.iter().product();
                let noise = sample_gumbel(rng, n);
                gumbel_softmax_var(tape, logits, Some(&noise), opts.tau, opts.hard)?
            }
        };
        let latent = match c.latent {
            LatentSpace::Partitioned => split_rearrange_var(tape, base, &emotions)?,
            LatentSpace::Base => base,
        };
        let (beta, pose, blink_logit) = self.decoders_var(tape, p, latent)?;
        let blink_prob = tape.sigmoid(blink_logit)?;
        Ok(ForwardVars {
            beta,
            pose,
            blink_logit,
            blink_prob,
            emotion_logits,
            emotion_probs,
            latent,
            gating,
        })
    }

    /// Per-clip predictions and codewords read back from a finished forward pass.
    pub fn collect(
        &self,
        tape: &Tape,
        out: &ForwardVars,
        batch: &Batch,
    ) -> Result<Vec<(ListenerPrediction, Codewords)>> {
        let c = &self.config;
        let (b, t) = (batch.size, batch.frames);
        let w = c.code_width();
        let latent = tape.value(out.latent)?;
        let logits = tape.value(out.emotion_logits)?;
        let blink = tape.value(out.blink_prob)?;
        (0..b)
            .map(|i| {
                let size = t * c.heads * w;
                let lat = Array3::from_shape_vec((t, c.heads, w), latent[i * size..(i + 1) * size].to_vec())
                    .expect("latent block");
                let prediction = ListenerPrediction {
                    beta_pred: array2(tape, out.beta, t, c.beta_dim, i * t * c.beta_dim)?,
                    pose_pred: array2(tape, out.pose, t, c.pose_dim, i * t * c.pose_dim)?,
                    blink_prob: blink[i * t..(i + 1) * t].to_vec(),
                    emotion_logits: logits[i * c.emotions..(i + 1) * c.emotions].to_vec(),
                };
                Ok((prediction, codewords_from_values(&lat)?))
            })
            .collect()
    }

    /// Deterministic inference over many clips in chunks of `batch_size`.
    pub fn predict(
        &self,
        clips: &[&PreparedClip],
        emotion_override: Option<usize>,
        batch_size: usize,
    ) -> Result<Vec<(ListenerPrediction, Codewords)>> {
        let mut out = Vec::with_capacity(clips.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in clips.chunks(batch_size.max(1)) {
            let batch = Batch::stack(chunk)?;
            let slots = emotion_override.map(|s| vec![s; chunk.len()]);
            let opts = ForwardOptions {
                emotion_override: slots.as_deref(),
                ..ForwardOptions::infer()
            };
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let vars = self.forward(&mut tape, &p, &batch, &opts, &mut rng)?;
            out.extend(self.collect(&tape, &vars, &batch)?);
        }
        Ok(out)
    }

    pub fn audio_encode(&self, feats: &AudioFeatureSequence) -> Result<Array2<f64>> {
        let c = &self.config;
        if feats.dim() != c.audio_dim {
            return Err(ElpError::WidthMismatch {
                what: "audio features",
                expected: c.audio_dim,
                found: feats.dim(),
            });
        }
        let t = feats.frames();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant([1, t, c.audio_dim], feats.feats().iter().copied().collect())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.audio_var(&mut tape, &p, x, Phase::Infer, &mut rng)?;
        array2(&tape, y, t, c.audio_embed, 0)
    }

    fn style_leaf(&self, tape: &mut Tape, style: &SpeakerStyleSequence) -> Result<Var> {
        let width = self.config.style_width();
        if style.width() != width {
            return Err(ElpError::WidthMismatch {
                what: "speaker style",
                expected: width,
                found: style.width(),
            });
        }
        Ok(tape.constant([1, style.frames(), width], style.values().iter().copied().collect())?)
    }

    pub fn classify_emotion(&self, style: &SpeakerStyleSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = self.style_leaf(&mut tape, style)?;
        let y = self.classifier_var(&mut tape, &p, x)?;
        Ok(tape.value(y)?.to_vec())
    }

    pub fn encode_heads(&self, style: &SpeakerStyleSequence) -> Result<HeadLogits> {
        let c = &self.config;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = self.style_leaf(&mut tape, style)?;
        let y = self.heads_var(&mut tape, &p, x)?;
        let values = tape.value(y)?.to_vec();
        HeadLogits::new(
            Array3::from_shape_vec((style.frames(), c.heads, c.categories), values)
                .expect("head logits shape"),
        )
    }

    fn decode(&self, embedding: &Array3<f64>) -> Result<(Tape, Var, Var, Var)> {
        let (t, h, w) = embedding.dim();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant([1, t, h, w], embedding.iter().copied().collect())?;
        let (beta, pose, logit) = self.decoders_var(&mut tape, &p, x)?;
        let blink = tape.sigmoid(logit)?;
        Ok((tape, beta, pose, blink))
    }

    pub fn decode_motion(&self, embedding: &Array3<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let t = embedding.dim().0;
        let (tape, beta, pose, _) = self.decode(embedding)?;
        Ok((
            array2(&tape, beta, t, self.config.beta_dim, 0)?,
            array2(&tape, pose, t, self.config.pose_dim, 0)?,
        ))
    }

    pub fn decode_blink(&self, embedding: &Array3<f64>) -> Result<Vec<f64>> {
        let (tape, _, _, blink) = self.decode(embedding)?;
        Ok(tape.value(blink)?.to_vec())
    }

    /// Single-clip forward pass. In the train phase the ground-truth emotion
    /// must come through `emotion_override` or `teacher`.
    pub fn ase_forward(
        &self,
        audio: &AudioFeatureSequence,
        speaker_motion: &MotionSequence,
        emotion_override: Option<EmotionVector>,
        phase: Phase,
        teacher: Option<EmotionVector>,
        rng: &mut impl Rng,
    ) -> Result<(ListenerPrediction, Codewords)> {
        let clip = PreparedClip::new(
            audio,
            speaker_motion,
            self.config.style_window,
            None,
            teacher.map_or(0, |e| e.slot()),
        )?;
        let batch = Batch::stack(&[&clip])?;
        let slot = emotion_override.map(|e| [e.slot()]);
        let opts = ForwardOptions {
            phase,
            hard: true,
            tau: 1.0,
            emotion_override: slot.as_ref().map(|s| &s[..]),
        };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let vars = self.forward(&mut tape, &p, &batch, &opts, rng)?;
        let mut out = self.collect(&tape, &vars, &batch)?;
        Ok(out.remove(0))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ELPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 2;

/// Writes `{magic, version, config digest, count}`, then `count` parameter
/// values followed by the style mean and std, all little-endian `f64`.
pub fn save_checkpoint(model: &AseModel, path: &Path) -> Result<()> {
    let mut values = model.params().flatten();
    let count = values.len();
    values.extend_from_slice(model.style_norm().mean());
    values.extend_from_slice(model.style_norm().std());
    let mut buf = Vec::with_capacity(8 + 4 + 32 + 8 + values.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(serde_json::to_vec(model.config())?));
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| ElpError::io(path, e))?;
    f.write_all(&buf).map_err(|e| ElpError::io(path, e))
}

/// Loads parameters into a fresh model built from `config`, rejecting files
/// whose digest or parameter count disagree.
pub fn load_checkpoint(config: NetworkConfig, path: &Path) -> Result<AseModel> {
    let bad = |msg: String| ElpError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| ElpError::io(path, e))?;
    if bytes.len() < 52 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let expected = Sha256::digest(serde_json::to_vec(&config)?);
    if bytes[12..44] != expected[..] {
        return Err(bad(format!(
            "config digest mismatch (file {}, config {})",
            hex(&bytes[12..44]),
            hex(&expected)
        )));
    }
    let count = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes")) as usize;
    let body = &bytes[52..];
    let width = config.stats_width();
    if body.len() != (count + 2 * width) * 8 {
        return Err(bad(format!(
            "expected {count} parameters and {width} style moments, found {} bytes of data",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = AseModel::new(config, 0)?;
    if model.params().scalar_count() != count {
        return Err(bad(format!(
            "config expects {} parameters, file holds {count}",
            model.params().scalar_count()
        )));
    }
    let (params, moments) = values.split_at(count);
    model.params_mut().load_flat(params)?;
    let (mean, std) = moments.split_at(width);
    if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
        return Err(bad("style moments must be finite with positive std".into()));
    }
    model.set_style_norm(StyleNorm {
        mean: mean.to_vec(),
        std: std.to_vec(),
    })?;
    Ok(model)
}
