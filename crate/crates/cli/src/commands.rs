//! `gen-data`, `train`, `infer` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use elp_core::compositor::{apply_blink, ClosureBlendshape};
use elp_core::corpus::{format_clip, generate_corpus, read_clip, read_corpus, write_corpus, Corpus, ConversationClip};
use elp_core::evaluation::{emotion_accuracy, evaluate, MetricReport};
use elp_core::motion::{argmax, EmotionVector, MotionSequence};
use elp_core::network::{load_checkpoint, save_checkpoint, AseModel, PreparedClip};
use elp_core::training::{format_loss_log, train, TrainOutcome, TrainStatus};
use serde_json::json;

use crate::config::{write_run_metadata, ExperimentConfig};

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

pub fn gen_data(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.corpus_dir();
    let corpus = generate_corpus(&config.corpus)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating corpus directory {}", dir.display()))?;
    write_corpus(&corpus, &dir).with_context(|| format!("writing corpus to {}", dir.display()))?;
    write_run_metadata(&dir, config)?;
    Ok(dir)
}

/// Reads the corpus written by `gen-data`, refusing one generated from a
/// different corpus spec.
pub fn load_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let dir = config.corpus_dir();
    let corpus = read_corpus(&dir).with_context(|| format!("reading corpus {} (run gen-data first)", dir.display()))?;
    if corpus.spec.digest() != config.corpus.digest() {
        bail!(
            "corpus at {} was generated from a different corpus spec; rerun gen-data",
            dir.display()
        );
    }
    Ok(corpus)
}

pub fn default_checkpoint(config: &ExperimentConfig) -> PathBuf {
    config.output.join("train").join("checkpoint.bin")
}

/// Trains one model and writes its checkpoint, logs and summary into `dir`.
/// Divergence is reported as an error after everything is written.
pub fn train_into(config: &ExperimentConfig, corpus: &Corpus, dir: &Path) -> Result<TrainOutcome> {
    write_run_metadata(dir, config)?;
    let model = AseModel::new(config.network.clone(), config.seed)?;
    let outcome = train(model, &corpus.train, &corpus.val, &config.train, config.seed, |_| {})?;
    save_checkpoint(&outcome.model, &dir.join("checkpoint.bin"))?;
    write(&dir.join("loss_log.csv"), format_loss_log(&outcome.steps))?;
    write(&dir.join("val_log.csv"), format_loss_log(&outcome.validation))?;
    let status = match &outcome.status {
        TrainStatus::Completed => json!({"state": "completed"}),
        TrainStatus::Diverged { step, term } => json!({"state": "diverged", "step": step, "term": term}),
    };
    write_json(
        &dir.join("summary.json"),
        &json!({
            "steps": outcome.steps.len(),
            "initial_train_loss": outcome.initial.total,
            "final_train_loss": outcome.last.total,
            "status": status,
            "config_digest": config.network.digest(),
            "parameters": outcome.model.params().scalar_count(),
        }),
    )?;
    if let TrainStatus::Diverged { step, term } = outcome.status {
        bail!(
            "training diverged at step {step} ({term} not finite); last good checkpoint kept in {}",
            dir.display()
        );
    }
    Ok(outcome)
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    let corpus = load_corpus(config)?;
    train_into(config, &corpus, &config.output.join("train"))
}

/// Emotion given by slot index or pattern name.
pub fn parse_emotion(raw: &str, config: &ExperimentConfig) -> Result<usize> {
    let n = config.network.emotions;
    if let Ok(slot) = raw.parse::<usize>() {
        if slot >= n {
            bail!("emotion slot {slot} outside 0..{n}");
        }
        return Ok(slot);
    }
    config
        .corpus
        .patterns()
        .iter()
        .position(|p| p.name == raw)
        .with_context(|| format!("unknown emotion '{raw}'"))
}

pub struct InferArgs {
    pub checkpoint: Option<PathBuf>,
    pub clip: PathBuf,
    pub emotion: Option<String>,
    pub out: Option<PathBuf>,
}

pub struct InferOutcome {
    pub dir: PathBuf,
    pub emotion: usize,
    pub prediction: ConversationClip,
    pub composited: ConversationClip,
}

pub fn cmd_infer(config: &ExperimentConfig, args: &InferArgs) -> Result<InferOutcome> {
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(config));
    let model = load_checkpoint(config.network.clone(), &ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let clip = read_clip(&args.clip).with_context(|| format!("reading clip {}", args.clip.display()))?;
    let emotion_override = args.emotion.as_deref().map(|e| parse_emotion(e, config)).transpose()?;

    let prepared = PreparedClip::new(
        &clip.audio,
        &clip.speaker,
        model.config().style_window,
        None,
        0,
    )?;
    let (pred, codes) = model.predict(&[&prepared], emotion_override, 1)?.remove(0);
    let emotion = emotion_override.unwrap_or_else(|| argmax(&pred.emotion_logits));
    let blink = pred.blink(config.eval.blink_threshold);
    let fps = clip.speaker.fps();
    let closure = ClosureBlendshape::unit(config.network.beta_dim, config.corpus.closure_index)?;
    let composited_beta = apply_blink(pred.beta_pred.view(), &blink, &closure)?;

    let make = |listener: MotionSequence| {
        ConversationClip::new(
            clip.id,
            clip.speaker.clone(),
            clip.audio.clone(),
            listener,
            blink.clone(),
            EmotionVector::new(emotion, config.network.emotions)?,
        )
    };
    let prediction = make(pred.motion(fps)?)?;
    let composited = make(MotionSequence::new(composited_beta, pred.pose_pred.clone(), fps)?)?;

    let dir = args.out.clone().unwrap_or_else(|| config.output.join("infer"));
    write_run_metadata(&dir, config)?;
    write(&dir.join("prediction.txt"), format_clip(&prediction))?;
    write(&dir.join("composited.txt"), format_clip(&composited))?;
    let mut csv = Vec::new();
    codes.grid.write_csv(&mut csv)?;
    write(&dir.join("codewords.csv"), csv)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "clip": args.clip,
            "checkpoint": ckpt,
            "emotion": emotion,
            "emotion_source": if emotion_override.is_some() { "override" } else { "classifier" },
            "emotion_logits": pred.emotion_logits,
            "blink_frames": blink.count_closed(),
            "tied_fibers": codes.ties,
        }),
    )?;
    Ok(InferOutcome {
        dir,
        emotion,
        prediction,
        composited,
    })
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub accuracy: Option<f64>,
}

/// Metric report over the test split. A checkpoint named on the command line
/// must exist; the default one is used when present.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    let corpus = load_corpus(config)?;
    let path = match checkpoint {
        Some(p) => Some(p.to_path_buf()),
        None => Some(default_checkpoint(config)).filter(|p| p.exists()),
    };
    let model = path
        .as_ref()
        .map(|p| load_checkpoint(config.network.clone(), p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;
    let report = evaluate(
        model.as_ref(),
        &corpus.train,
        &corpus.test,
        &config.eval,
        config.seed,
        &config.network.digest(),
    )?;
    let accuracy = model.as_ref().map(|m| emotion_accuracy(m, &corpus.test)).transpose()?;
    let dir = config.output.join("eval");
    write_run_metadata(&dir, config)?;
    write(&dir.join("report.csv"), report.to_csv())?;
    write(&dir.join("report.json"), report.to_json()?)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "checkpoint": path,
            "test_clips": corpus.test.len(),
            "emotion_accuracy": accuracy,
        }),
    )?;
    Ok(EvalOutcome { report, accuracy })
}
