//! Minibatch training of the listener model with AdamW.

use std::fmt::Write as _;

use elp_autodiff::{AutodiffError, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ConversationClip;
use crate::error::{ElpError, Result};
use crate::latent::TemperatureSchedule;
use crate::network::{AseModel, Batch, ForwardOptions, PreparedClip, StyleNorm};
use crate::objectives::{batch_loss, total_loss, LossConfig, LossParts};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Decoupled decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && [self.lr, self.weight_decay, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ElpError::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    /// One update of every parameter slice from its gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        let c = self.config;
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= c.lr * (c.weight_decay * p[j] + update);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub val_every: usize,
    /// Temperature at step 0; annealed exponentially to `tau_end` at the last step.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Straight-through hard samples instead of soft relaxations.
    pub hard: bool,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iterations: 10_000,
            val_every: 100,
            tau_start: 1.0,
            tau_end: 0.5,
            hard: false,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(ElpError::invalid("batch_size and val_every must be positive"));
        }
        self.schedule().validate()?;
        self.optimizer.validate()?;
        self.loss.weights.validate()
    }

    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.tau_start,
            end: self.tau_end,
            steps: self.iterations.saturating_sub(1),
        }
    }
}

/// Loss of one logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,L_L2,L_CE1,L_CE2,L_reg,L_total";

/// CSV with [`LOSS_LOG_HEADER`] columns; floats use shortest round-trip form.
pub fn format_loss_log(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in records {
        let p = r.parts;
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, p.l2, p.ce1, p.ce2, p.reg, r.total);
    }
    out
}

/// Why training stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// A loss term or intermediate was non-finite at `step`; the model holds
    /// the last parameters that produced a finite loss.
    Diverged { step: usize, term: &'static str },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AseModel,
    pub steps: Vec<LossRecord>,
    pub validation: Vec<LossRecord>,
    /// Full training-set loss before the first update, infer mode.
    pub initial: LossRecord,
    /// Full training-set loss after the last update, infer mode.
    pub last: LossRecord,
    pub status: TrainStatus,
}

pub fn prepare_clips(model: &AseModel, clips: &[ConversationClip]) -> Result<Vec<PreparedClip>> {
    let window = model.config().style_window;
    clips
        .iter()
        .map(|c| {
            PreparedClip::new(
                &c.audio,
                &c.speaker,
                window,
                Some((&c.listener, &c.blink)),
                c.emotion.slot(),
            )
        })
        .collect()
}

fn check_finite(parts: &LossParts, total: f64) -> std::result::Result<(), &'static str> {
    for (name, v) in [
        ("L2", parts.l2),
        ("CE1", parts.ce1),
        ("CE2", parts.ce2),
        ("reg", parts.reg),
        ("total", total),
    ] {
        if !v.is_finite() {
            return Err(name);
        }
    }
    Ok(())
}

/// Per-clip mean loss over `clips` in the deterministic infer phase.
pub fn dataset_loss(
    model: &AseModel,
    clips: &[PreparedClip],
    loss: &LossConfig,
    batch_size: usize,
) -> Result<(LossParts, f64)> {
    if clips.is_empty() {
        return Err(ElpError::invalid("loss over an empty clip set"));
    }
    let mut sum = LossParts::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let refs: Vec<&PreparedClip> = clips.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = Batch::stack(chunk)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let out = model.forward(&mut tape, &p, &batch, &ForwardOptions::infer(), &mut rng)?;
        let parts = batch_loss(&mut tape, &out, &batch, loss)?.parts(&tape)?;
        let w = chunk.len() as f64;
        sum.l2 += w * parts.l2;
        sum.ce1 += w * parts.ce1;
        sum.ce2 += w * parts.ce2;
        sum.reg += w * parts.reg;
    }
    let n = clips.len() as f64;
    let mean = LossParts {
        l2: sum.l2 / n,
        ce1: sum.ce1 / n,
        ce2: sum.ce2 / n,
        reg: sum.reg / n,
    };
    let total = total_loss(&mean, &loss.weights)?;
    Ok((mean, total))
}

/// Epoch-shuffled minibatch indices.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Trains `model` in place of a copy. `seed` drives batching, dropout and
/// Gumbel noise; `on_step` sees every logged step. The style normalization
/// is refitted on `train_clips` before the first step.
pub fn train(
    mut model: AseModel,
    train_clips: &[ConversationClip],
    val_clips: &[ConversationClip],
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = prepare_clips(&model, train_clips)?;
    let val_set = prepare_clips(&model, val_clips)?;
    if train_set.is_empty() {
        return Err(ElpError::invalid("training set is empty"));
    }
    let refs: Vec<&PreparedClip> = train_set.iter().collect();
    let width = model.config().stats_width();
    model.set_style_norm(StyleNorm::fit(&refs, width)?)?;
    let eval_batch = config.batch_size.max(32);
    let record = |step, (parts, total)| LossRecord { step, parts, total };
    let initial = record(0, dataset_loss(&model, &train_set, &config.loss, eval_batch)?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut sampler = Sampler {
        order: (0..train_set.len()).collect(),
        cursor: usize::MAX / 2,
    };
    let mut optimizer = AdamW::new(
        config.optimizer,
        model.params().tensors().iter().map(|t| t.numel()),
    );
    let schedule = config.schedule();
    let mut steps = Vec::with_capacity(config.iterations);
    let mut validation = Vec::new();
    let mut last_good = model.params().flatten();
    let mut status = TrainStatus::Completed;

    for step in 0..config.iterations {
        let indices = sampler.next(config.batch_size, &mut rng);
        let clips: Vec<&PreparedClip> = indices.iter().map(|&i| &train_set[i]).collect();
        let batch = Batch::stack(&clips)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let opts = ForwardOptions::train(schedule.at(step), config.hard);
        let attempt = model
            .forward(&mut tape, &p, &batch, &opts, &mut rng)
            .and_then(|out| batch_loss(&mut tape, &out, &batch, &config.loss));
        let checked = attempt.and_then(|loss| {
            let parts = loss.parts(&tape)?;
            let total = tape.item(loss.total)?;
            Ok((loss, parts, total))
        });
        let diverged = match &checked {
            Ok((_, parts, total)) => check_finite(parts, *total).err(),
            Err(ElpError::Autodiff(AutodiffError::NonFinite { op })) => Some(*op),
            Err(_) => None,
        };
        if let Some(term) = diverged {
            model.params_mut().load_flat(&last_good)?;
            status = TrainStatus::Diverged { step, term };
            break;
        }
        let (loss, parts, total) = checked?;
        last_good = model.params().flatten();
        let rec = LossRecord { step, parts, total };
        on_step(&rec);
        steps.push(rec);

        tape.backward(loss.total)?;
        let grads: Vec<Vec<f64>> = p
            .vars()
            .iter()
            .zip(model.params().tensors())
            .map(|(&v, t)| {
                Ok(tape
                    .grad(v)?
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            })
            .collect::<Result<_>>()?;
        drop(tape);
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut values: Vec<Vec<f64>> = model
            .params()
            .tensors()
            .iter()
            .map(|t| t.values().to_vec())
            .collect();
        let mut slices: Vec<&mut [f64]> = values.iter_mut().map(Vec::as_mut_slice).collect();
        optimizer.step(&mut slices, &grad_refs);
        for (t, v) in model.params_mut().tensors_mut().iter_mut().zip(values) {
            t.set_values(v)?;
        }

        if !val_set.is_empty() && (step + 1) % config.val_every == 0 {
            validation.push(record(
                step + 1,
                dataset_loss(&model, &val_set, &config.loss, eval_batch)?,
            ));
        }
    }
    let last = record(
        steps.last().map_or(0, |r| r.step + 1),
        dataset_loss(&model, &train_set, &config.loss, eval_batch)?,
    );
    Ok(TrainOutcome {
        model,
        steps,
        validation,
        initial,
        last,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::network::NetworkConfig;

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, [2]);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut [&mut p[..]], &[&[0.5, -2.0][..]]);
        // Bias-corrected first step is g / (|g| + eps) ~ sign(g).
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut opt = AdamW::new(OptimizerConfig::default(), [1]);
        let mut p = vec![2.0];
        opt.step(&mut [&mut p[..]], &[&[0.0][..]]);
        assert!((p[0] - 2.0 * (1.0 - 1e-3 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn loss_log_has_fixed_header() {
        let log = format_loss_log(&[LossRecord {
            step: 0,
            parts: LossParts {
                l2: 1.5,
                ce1: 0.25,
                ce2: 0.5,
                reg: 2.0,
            },
            total: 5.27,
        }]);
        assert_eq!(log, "step,L_L2,L_CE1,L_CE2,L_reg,L_total\n0,1.5,0.25,0.5,2,5.27\n");
    }

    fn tiny() -> (AseModel, Vec<ConversationClip>, Vec<ConversationClip>) {
        let corpus = generate_corpus(&CorpusSpec {
            clips: 12,
            frames: 12,
            emotions: 2,
            ..CorpusSpec::default()
        })
        .unwrap();
        let model = AseModel::new(NetworkConfig::reduced(), 1).unwrap();
        (model, corpus.train, corpus.val)
    }

    #[test]
    fn short_run_is_deterministic_and_logs_every_step() {
        let (model, tr, va) = tiny();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 6,
            val_every: 3,
            ..TrainConfig::default()
        };
        let a = train(model.clone(), &tr, &va, &cfg, 5, |_| {}).unwrap();
        let b = train(model, &tr, &va, &cfg, 5, |_| {}).unwrap();
        assert_eq!(a.steps.len(), 6);
        assert_eq!(format_loss_log(&a.steps), format_loss_log(&b.steps));
        assert_eq!(a.model.params().flatten(), b.model.params().flatten());
        assert_eq!(a.status, TrainStatus::Completed);
        if !va.is_empty() {
            assert_eq!(a.validation.len(), 2);
        }
    }

    #[test]
    fn divergence_keeps_last_finite_parameters() {
        let (model, tr, va) = tiny();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 3,
            optimizer: OptimizerConfig {
                lr: 1e300,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(model, &tr, &va, &cfg, 5, |_| {}).unwrap();
        match out.status {
            TrainStatus::Diverged { step, .. } => assert!(step >= 1),
            TrainStatus::Completed => panic!("expected divergence"),
        }
        assert!(out.model.params().flatten().iter().all(|v| v.is_finite()));
    }
}
