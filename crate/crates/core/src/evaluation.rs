//! Metric reports comparing generated listeners with ground truth.

use std::fmt::Write as _;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{dls_random, nn_audio, nn_motion, RandomBaseline, RANDOM_SIGMA_SCALE};
use crate::corpus::ConversationClip;
use crate::error::{ElpError, Result};
use crate::metrics::{
    frechet_distance, motion_wtlcc, rpcc, shannon_diversity, sts_distance, variation_diversity,
    wtlcc, FdMode,
};
use crate::motion::{BlinkSequence, MotionSequence};
use crate::network::AseModel;
use crate::training::prepare_clips;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineFlags {
    pub nn_motion: bool,
    pub nn_audio: bool,
    pub random: bool,
    pub dls_random: bool,
}

impl Default for BaselineFlags {
    fn default() -> Self {
        Self {
            nn_motion: true,
            nn_audio: true,
            random: true,
            dls_random: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Synchrony window in frames, capped at the clip length.
    pub window: usize,
    /// Largest lag searched, capped at `window - 1`.
    pub max_lag: usize,
    pub sid_clusters: usize,
    pub blink_threshold: f64,
    pub baselines: BaselineFlags,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: 100,
            max_lag: 25,
            sid_clusters: 10,
            blink_threshold: 0.5,
            baselines: BaselineFlags::default(),
        }
    }
}

impl EvalConfig {
    fn window_for(&self, frames: usize) -> (usize, usize) {
        let window = self.window.min(frames);
        (window, self.max_lag.min(window.saturating_sub(1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub fd: f64,
    pub vd: f64,
    pub sid: f64,
    pub rpcc: f64,
    pub wtlcc: f64,
    pub sts: f64,
    /// Mean per-frame L1 distance to the aligned ground truth.
    pub fd_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub beta: GroupMetrics,
    pub pose: GroupMetrics,
    pub blink_wtlcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_digest: String,
    pub seed: u64,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "method",
    "fd_beta",
    "vd_beta",
    "sid_beta",
    "rpcc_beta",
    "wtlcc_beta",
    "sts_beta",
    "fd_pose",
    "vd_pose",
    "sid_pose",
    "rpcc_pose",
    "wtlcc_pose",
    "sts_pose",
    "blink_wtlcc",
    "fd_l1_beta",
    "fd_l1_pose",
];

impl MetricReport {
    pub fn row(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// One line per method in [`REPORT_COLUMNS`] order.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let g = |m: &GroupMetrics| [m.fd, m.vd, m.sid, m.rpcc, m.wtlcc, m.sts];
            let values: Vec<String> = g(&r.beta)
                .into_iter()
                .chain(g(&r.pose))
                .chain([r.blink_wtlcc, r.beta.fd_l1, r.pose.fd_l1])
                .map(|v| v.to_string())
                .collect();
            let _ = writeln!(out, "{},{}", r.method, values.join(","));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Listener output of one method for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub motion: MotionSequence,
    pub blink: BlinkSequence,
}

#[derive(Clone, Copy)]
enum Group {
    Beta,
    Pose,
}

fn view(m: &MotionSequence, g: Group) -> ArrayView2<'_, f64> {
    match g {
        Group::Beta => m.beta(),
        Group::Pose => m.pose(),
    }
}

fn stack(views: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    concatenate(Axis(0), views).map_err(|e| ElpError::invalid(format!("frame stacking: {e}")))
}

fn group_metrics(
    clips: &[ConversationClip],
    generated: &[Generated],
    group: Group,
    config: &EvalConfig,
    seed: u64,
) -> Result<GroupMetrics> {
    let gen_views: Vec<_> = generated.iter().map(|g| view(&g.motion, group)).collect();
    let gt_views: Vec<_> = clips.iter().map(|c| view(&c.listener, group)).collect();
    let gen_frames = stack(&gen_views)?;
    let gt_frames = stack(&gt_views)?;
    let fd = frechet_distance(gen_frames.view(), gt_frames.view(), FdMode::Gaussian)?.value;
    let fd_l1 = frechet_distance(gen_frames.view(), gt_frames.view(), FdMode::L1)?.value;
    let vd = variation_diversity(&gen_views)?;
    let sid = shannon_diversity(gen_frames.view(), gt_frames.view(), config.sid_clusters, seed)?;
    let n = clips.len() as f64;
    let (mut rp, mut wt, mut st) = (0.0, 0.0, 0.0);
    for ((clip, gen), gt) in clips.iter().zip(&gen_views).zip(&gt_views) {
        let speaker = view(&clip.speaker, group);
        let (window, lag) = config.window_for(clip.frames());
        rp += rpcc(speaker, *gen, *gt)?;
        wt += motion_wtlcc(speaker, *gen, window, lag)?;
        st += sts_distance(*gen, *gt)?;
    }
    Ok(GroupMetrics {
        fd,
        vd,
        sid,
        rpcc: rp / n,
        wtlcc: wt / n,
        sts: st / n,
        fd_l1,
    })
}

/// All metric columns of one method over `clips`.
pub fn evaluate_method(
    method: &str,
    clips: &[ConversationClip],
    generated: &[Generated],
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricRow> {
    if clips.is_empty() || clips.len() != generated.len() {
        return Err(ElpError::LengthMismatch {
            what: "evaluated clips",
            left: generated.len(),
            right: clips.len(),
        });
    }
    let mut blink = 0.0;
    for (clip, gen) in clips.iter().zip(generated) {
        let (window, lag) = config.window_for(clip.frames());
        blink += wtlcc(&gen.blink.as_f64(), &clip.blink.as_f64(), window, lag)?;
    }
    Ok(MetricRow {
        method: method.to_string(),
        beta: group_metrics(clips, generated, Group::Beta, config, seed)?,
        pose: group_metrics(clips, generated, Group::Pose, config, seed)?,
        blink_wtlcc: blink / clips.len() as f64,
    })
}

pub fn ground_truth_outputs(clips: &[ConversationClip]) -> Vec<Generated> {
    clips
        .iter()
        .map(|c| Generated {
            motion: c.listener.clone(),
            blink: c.blink.clone(),
        })
        .collect()
}

/// Model outputs with the classifier-selected emotion, or `emotion_override`.
pub fn model_outputs(
    model: &AseModel,
    clips: &[ConversationClip],
    emotion_override: Option<usize>,
    threshold: f64,
) -> Result<Vec<Generated>> {
    let prepared = prepare_clips(model, clips)?;
    let refs: Vec<_> = prepared.iter().collect();
    model
        .predict(&refs, emotion_override, 32)?
        .into_iter()
        .zip(clips)
        .map(|((p, _), c)| {
            Ok(Generated {
                motion: p.motion(c.listener.fps())?,
                blink: p.blink(threshold),
            })
        })
        .collect()
}

fn from_train(train: &[ConversationClip], index: usize) -> Generated {
    Generated {
        motion: train[index].listener.clone(),
        blink: train[index].blink.clone(),
    }
}

/// Emotion classification accuracy of `model` on labelled clips.
pub fn emotion_accuracy(model: &AseModel, clips: &[ConversationClip]) -> Result<f64> {
    let prepared = prepare_clips(model, clips)?;
    let refs: Vec<_> = prepared.iter().collect();
    let preds = model.predict(&refs, None, 32)?;
    let hits = preds
        .iter()
        .zip(clips)
        .filter(|((p, _), c)| crate::motion::argmax(&p.emotion_logits) == c.emotion.slot())
        .count();
    Ok(hits as f64 / clips.len() as f64)
}

/// Mean of the stacked `[beta, pose]` rows over every frame of `outputs`.
fn pooled_mean(outputs: &[&Generated]) -> Option<Vec<f64>> {
    let first = outputs.first()?;
    let width = first.motion.beta_dim() + first.motion.pose_dim();
    let mut acc = vec![0.0; width];
    let mut frames = 0usize;
    for g in outputs {
        let stacked = g.motion.stacked();
        for row in stacked.rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        frames += stacked.nrows();
    }
    Some(acc.into_iter().map(|a| a / frames as f64).collect())
}

fn mean_pairwise_distance(means: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Mean pairwise Euclidean distance between the per-emotion mean outputs,
/// grouping clips by `labels`. Every emotion must label at least one clip.
pub fn emotion_separation(outputs: &[Generated], labels: &[usize], emotions: usize) -> Result<f64> {
    if outputs.len() != labels.len() {
        return Err(ElpError::LengthMismatch {
            what: "separation labels",
            left: labels.len(),
            right: outputs.len(),
        });
    }
    let means = (0..emotions)
        .map(|e| {
            let group: Vec<&Generated> = outputs
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == e)
                .map(|(g, _)| g)
                .collect();
            pooled_mean(&group).ok_or_else(|| ElpError::invalid(format!("no clips carry emotion {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_pairwise_distance(&means))
}

/// Mean pairwise distance between the mean outputs obtained by forcing each
/// emotion slot on every clip.
pub fn override_shift(model: &AseModel, clips: &[ConversationClip], threshold: f64) -> Result<f64> {
    let means = (0..model.config().emotions)
        .map(|e| {
            let out = model_outputs(model, clips, Some(e), threshold)?;
            let refs: Vec<&Generated> = out.iter().collect();
            pooled_mean(&refs).ok_or_else(|| ElpError::invalid("override shift over no clips"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_pairwise_distance(&means))
}

/// Report with rows `gt`, `model` and every enabled baseline, in that order.
/// The DLS-Random baseline needs a model.
pub fn evaluate(
    model: Option<&AseModel>,
    train: &[ConversationClip],
    test: &[ConversationClip],
    config: &EvalConfig,
    seed: u64,
    config_digest: &str,
) -> Result<MetricReport> {
    let b = config.baselines;
    if b.dls_random && model.is_none() {
        return Err(ElpError::invalid("dls_random baseline requires trained decoders"));
    }
    let mut rows = vec![evaluate_method("gt", test, &ground_truth_outputs(test), config, seed)?];
    if let Some(m) = model {
        let out = model_outputs(m, test, None, config.blink_threshold)?;
        rows.push(evaluate_method("model", test, &out, config, seed)?);
    }
    if b.nn_motion {
        let out = test
            .iter()
            .map(|c| Ok(from_train(train, nn_motion(&c.speaker, train)?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_method("nn_motion", test, &out, config, seed)?);
    }
    if b.nn_audio {
        let out = test
            .iter()
            .map(|c| Ok(from_train(train, nn_audio(c.audio.feats(), train)?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_method("nn_audio", test, &out, config, seed)?);
    }
    if b.random {
        let sampler = RandomBaseline::new(train, RANDOM_SIGMA_SCALE)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let out = test
            .iter()
            .map(|_| {
                let (motion, index) = sampler.sample(&mut rng)?;
                Ok(Generated {
                    motion,
                    blink: train[index].blink.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_method("random", test, &out, config, seed)?);
    }
    if let (true, Some(m)) = (b.dls_random, model) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);
        let out = test
            .iter()
            .map(|c| {
                let (motion, blink) = dls_random(m, c.frames(), c.listener.fps(), &mut rng)?;
                Ok(Generated { motion, blink })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_method("dls_random", test, &out, config, seed)?);
    }
    Ok(MetricReport {
        meta: ReportMeta {
            config_digest: config_digest.to_string(),
            seed,
            clips: test.len(),
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn corpus() -> crate::corpus::Corpus {
        generate_corpus(&CorpusSpec {
            clips: 60,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn gt_row_scores_zero_distance() {
        let c = corpus();
        let config = EvalConfig::default();
        let row = evaluate_method("gt", &c.test, &ground_truth_outputs(&c.test), &config, 0).unwrap();
        for g in [row.beta, row.pose] {
            assert!(g.fd.abs() < 1e-8, "{}", g.fd);
            assert_eq!(g.fd_l1, 0.0);
            assert_eq!(g.sts, 0.0);
            assert_eq!(g.rpcc, 0.0);
        }
    }

    #[test]
    fn csv_columns_follow_the_fixed_schema() {
        let c = corpus();
        let config = EvalConfig {
            baselines: BaselineFlags {
                dls_random: false,
                ..BaselineFlags::default()
            },
            ..EvalConfig::default()
        };
        let report = evaluate(None, &c.train, &c.test, &config, 3, "abc").unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
        let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(methods, ["gt", "nn_motion", "nn_audio", "random"]);
        for l in csv.lines().skip(1) {
            assert_eq!(l.split(',').count(), REPORT_COLUMNS.len());
        }
        let again = evaluate(None, &c.train, &c.test, &config, 3, "abc").unwrap();
        assert_eq!(again.to_csv(), csv);
    }

    #[test]
    fn dls_random_without_model_is_an_error() {
        let c = corpus();
        assert!(evaluate(None, &c.train, &c.test, &EvalConfig::default(), 0, "").is_err());
    }

    #[test]
    fn separation_of_constant_class_outputs_is_their_distance() {
        let c = corpus();
        let clip = &c.test[0];
        let constant = |v: f64| Generated {
            motion: MotionSequence::new(
                Array2::from_elem((clip.frames(), 100), v),
                Array2::from_elem((clip.frames(), 6), v),
                25.0,
            )
            .unwrap(),
            blink: clip.blink.clone(),
        };
        let outputs = vec![constant(0.0), constant(1.0), constant(0.0), constant(1.0)];
        let sep = emotion_separation(&outputs, &[0, 1, 0, 1], 2).unwrap();
        assert!((sep - 106f64.sqrt()).abs() < 1e-12);
        assert_eq!(emotion_separation(&outputs, &[0, 0, 0, 0], 1).unwrap(), 0.0);
        assert!(emotion_separation(&outputs, &[0, 0, 0, 0], 2).is_err());
    }
}
