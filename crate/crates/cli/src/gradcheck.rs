//! Finite-difference verification of every loss term and of the full objective.

use anyhow::{bail, Result};
use elp_autodiff::{finite_difference_check_sampled, OpTag, Tape, Tensor, Var};
use elp_core::corpus::{generate_clip, CorpusSpec};
use elp_core::network::{AseModel, Batch, ForwardOptions, ForwardVars};
use elp_core::nn::Bound;
use elp_core::objectives::{batch_loss, LossConfig, LossVars};
use elp_core::training::prepare_clips;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Loss terms checked against their direct inputs, then the full objective
/// against every network parameter.
pub const COMPONENTS: [&str; 6] = ["L2", "CE1", "CE2", "reg", "total", "end_to_end"];

const ALL_TAGS: [OpTag; 24] = [
    OpTag::Leaf,
    OpTag::Add,
    OpTag::Sub,
    OpTag::Mul,
    OpTag::MatMul,
    OpTag::Concat,
    OpTag::Slice,
    OpTag::Reshape,
    OpTag::Relu,
    OpTag::Tanh,
    OpTag::Sigmoid,
    OpTag::Softmax,
    OpTag::Log,
    OpTag::Exp,
    OpTag::Mean,
    OpTag::Sum,
    OpTag::Variance,
    OpTag::Sqrt,
    OpTag::Abs,
    OpTag::Scale,
    OpTag::Shift,
    OpTag::Clamp,
    OpTag::StraightThrough,
    OpTag::Custom,
];

/// Parses `op` or `op:factor` (default factor 1.01) into a backward fault.
pub fn parse_fault(raw: &str) -> Result<(OpTag, f64)> {
    let (name, factor) = match raw.split_once(':') {
        Some((n, f)) => (n, f.parse::<f64>().map_err(|_| anyhow::anyhow!("bad fault factor '{f}'"))?),
        None => (raw, 1.01),
    };
    let wanted = name.replace(['_', '-'], "").to_lowercase();
    let tag = ALL_TAGS
        .iter()
        .find(|t| format!("{t:?}").to_lowercase() == wanted)
        .ok_or_else(|| anyhow::anyhow!("unknown op '{name}'"))?;
    Ok((*tag, factor))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentError {
    pub name: String,
    /// Relative discrepancy beyond the rounding bound of the difference quotient.
    pub max_rel_error: f64,
    /// Plain relative discrepancy, including rounding noise.
    pub max_raw_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_raw_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub seeds: usize,
    pub step: f64,
    pub fail_threshold: f64,
    /// Maximum over seeds, one entry per [`COMPONENTS`] name.
    pub components: Vec<ComponentError>,
    /// End-to-end maximum per trainable parameter group.
    pub groups: Vec<GroupError>,
    pub fault: Option<String>,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.fail_threshold
    }

    pub fn component(&self, name: &str) -> Option<&ComponentError> {
        self.components.iter().find(|c| c.name == name)
    }
}

fn select(loss: &LossVars, component: &str) -> Var {
    match component {
        "L2" => loss.l2,
        "CE1" => loss.ce1,
        "CE2" => loss.ce2,
        "reg" => loss.reg,
        _ => loss.total,
    }
}

#[derive(Clone, Copy, Default)]
struct Worst {
    excess: f64,
    raw: f64,
    checked: usize,
}

impl Worst {
    fn absorb(&mut self, excess: f64, raw: f64, checked: usize) {
        self.excess = self.excess.max(excess);
        self.raw = self.raw.max(raw);
        self.checked += checked;
    }
}

/// Smallest gap between time-adjacent blink probabilities that keeps every
/// step of size `h` on one side of the `|p_t - p_{t-1}|` kink.
fn kink_margin(h: f64) -> f64 {
    1e3 * h
}

/// Shifts blink logits `[B, T]` by seeded noise until adjacent probabilities
/// are at least `margin` apart.
fn spread_blink_logits(logits: &Tensor, frames: usize, margin: f64, seed: u64) -> Result<Tensor> {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let values: Vec<f64> = logits
            .values()
            .iter()
            .map(|&x| x + rng.random_range(-1.0..1.0))
            .collect();
        let ok = values.chunks(frames).all(|clip| {
            clip.windows(2)
                .all(|w| (sigmoid(w[1]) - sigmoid(w[0])).abs() >= margin)
        });
        if ok {
            return Ok(Tensor::new(logits.shape().to_vec(), values)?);
        }
    }
    bail!("could not place blink logits away from the total-variation kink")
}

/// Runs the check over `gradcheck.seeds` seeds; `fault` corrupts one backward
/// rule in the analytic pass only.
pub fn run_gradcheck(config: &ExperimentConfig, fault: Option<(OpTag, f64)>) -> Result<GradcheckSummary> {
    let gc = &config.gradcheck;
    let net = &gc.network;
    if net.heads > 4 || net.categories > 4 {
        bail!(
            "gradcheck needs a reduced network (heads <= 4, categories <= 4), got {} x {}",
            net.heads,
            net.categories
        );
    }
    if gc.seeds == 0 || gc.clips == 0 {
        bail!("gradcheck needs at least one seed and one clip");
    }
    let loss_config: LossConfig = config.train.loss;
    let inject = |tape: &mut Tape| {
        if let Some((tag, factor)) = fault {
            tape.inject_backward_fault(tag, factor);
        }
    };

    let mut comp_err = vec![Worst::default(); COMPONENTS.len()];
    let mut group_names: Vec<String> = Vec::new();
    let mut group_err: Vec<Worst> = Vec::new();

    for s in 0..gc.seeds {
        let seed = config.seed.wrapping_add(s as u64);
        let model = AseModel::new(net.clone(), seed)?;
        let spec = CorpusSpec {
            clips: gc.clips,
            frames: gc.frames,
            emotions: net.emotions,
            beta_dim: net.beta_dim,
            pose_dim: net.pose_dim,
            audio_dim: net.audio_dim,
            seed,
            ..config.corpus.clone()
        };
        let clips = (0..gc.clips)
            .map(|i| generate_clip(&spec, i as u64, i % net.emotions))
            .collect::<elp_core::Result<Vec<_>>>()?;
        let prepared = prepare_clips(&model, &clips)?;
        let batch = Batch::stack(&prepared.iter().collect::<Vec<_>>())?;
        let opts = ForwardOptions::train(1.0, false);
        let forward = |tape: &mut Tape, p: &Bound| -> elp_core::Result<ForwardVars> {
            // Reseeding per call freezes the Gumbel noise and dropout masks.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            model.forward(tape, p, &batch, &opts, &mut rng)
        };

        // Loss-level point: the network outputs at this seed.
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let out = forward(&mut tape, &p)?;
        let gating = out.gating.clone();
        let mut point = [out.beta, out.pose, out.blink_logit, out.emotion_logits]
            .iter()
            .map(|&v| Ok(Tensor::new(tape.shape(v)?.to_vec(), tape.value(v)?.to_vec())?))
            .collect::<Result<Vec<Tensor>>>()?;
        drop(tape);
        point[2] = spread_blink_logits(&point[2], batch.frames, kink_margin(gc.step), seed)?;

        for (ci, name) in COMPONENTS.iter().take(5).enumerate() {
            let report = finite_difference_check_sampled(
                |tape: &mut Tape, v: &[Var]| {
                    inject(tape);
                    let blink_prob = tape.sigmoid(v[2])?;
                    let emotion_probs = tape.softmax(v[3], 1)?;
                    let vars = ForwardVars {
                        beta: v[0],
                        pose: v[1],
                        blink_logit: v[2],
                        blink_prob,
                        emotion_logits: v[3],
                        emotion_probs,
                        latent: v[2],
                        gating: gating.clone(),
                    };
                    let loss = batch_loss(tape, &vars, &batch, &loss_config).map_err(to_autodiff)?;
                    Ok(select(&loss, name))
                },
                &point,
                gc.step,
                usize::MAX,
            )?;
            comp_err[ci].absorb(report.max_excess_error, report.max_rel_error, report.checked);
        }

        let params: Vec<Tensor> = model.params().tensors().to_vec();
        let report = finite_difference_check_sampled(
            |tape: &mut Tape, v: &[Var]| {
                inject(tape);
                let p = Bound::from_vars(v.to_vec());
                let out = forward(tape, &p).map_err(to_autodiff)?;
                let loss = batch_loss(tape, &out, &batch, &loss_config).map_err(to_autodiff)?;
                Ok(loss.total)
            },
            &params,
            gc.step,
            gc.coords_per_tensor,
        )?;
        comp_err[5].absorb(report.max_excess_error, report.max_rel_error, report.checked);

        // Per-group maxima over the tensors that make up each group.
        for (t, name) in model.params().names().iter().enumerate() {
            let group = name.rsplit_once('.').map_or(name.as_str(), |(g, _)| g);
            let g = match group_names.iter().position(|n| n == group) {
                Some(g) => g,
                None => {
                    group_names.push(group.to_string());
                    group_err.push(Worst::default());
                    group_names.len() - 1
                }
            };
            group_err[g].absorb(report.per_input_excess[t], report.per_input[t], 0);
        }
    }

    Ok(GradcheckSummary {
        seeds: gc.seeds,
        step: gc.step,
        fail_threshold: gc.fail_threshold,
        components: COMPONENTS
            .iter()
            .zip(comp_err)
            .map(|(n, w)| ComponentError {
                name: n.to_string(),
                max_rel_error: w.excess,
                max_raw_error: w.raw,
                checked: w.checked,
            })
            .collect(),
        groups: group_names
            .into_iter()
            .zip(group_err)
            .map(|(name, w)| GroupError {
                name,
                max_rel_error: w.excess,
                max_raw_error: w.raw,
            })
            .collect(),
        fault: fault.map(|(t, f)| format!("{t:?}:{f}")),
    })
}

fn to_autodiff(e: elp_core::ElpError) -> elp_autodiff::AutodiffError {
    match e {
        elp_core::ElpError::Autodiff(inner) => inner,
        other => elp_autodiff::AutodiffError::InvalidShape {
            op: "gradcheck objective",
            shape: Vec::new(),
            reason: other.to_string(),
        },
    }
}
