//! Latent-space and head-count ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Result};
use elp_core::corpus::{ConversationClip, Corpus};
use elp_core::evaluation::{
    emotion_accuracy, emotion_separation, evaluate_method, ground_truth_outputs, model_outputs,
    override_shift, Generated, MetricReport, ReportMeta,
};
use elp_core::network::LatentSpace;
use serde::Serialize;
use serde_json::json;

use crate::commands::{load_corpus, train_into, write, write_json};
use crate::config::{write_run_metadata, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationMode {
    /// Emotion-partitioned space against the ungated base space.
    Space,
    /// Sweep over the number of latent heads.
    Heads,
}

impl AblationMode {
    fn dir_name(self) -> &'static str {
        match self {
            Self::Space => "ablate-space",
            Self::Heads => "ablate-heads",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub heads: usize,
    pub latent: LatentSpace,
    /// Mean pairwise distance of per-emotion mean outputs, grouped by true emotion.
    pub separation: f64,
    /// Mean pairwise distance of mean outputs under each forced emotion.
    pub override_shift: f64,
    pub emotion_accuracy: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub dir: PathBuf,
    pub variants: Vec<VariantResult>,
    pub report: MetricReport,
}

impl AblationOutcome {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn variants(config: &ExperimentConfig, mode: AblationMode) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = config.clone();
        f(&mut c);
        c
    };
    Ok(match mode {
        AblationMode::Space => vec![
            ("partitioned".into(), with(&|c| c.network.latent = LatentSpace::Partitioned)),
            ("base".into(), with(&|c| c.network.latent = LatentSpace::Base)),
        ],
        AblationMode::Heads => {
            if config.ablation.heads.is_empty() {
                bail!("ablation.heads is empty");
            }
            config
                .ablation
                .heads
                .iter()
                .map(|&h| (format!("heads_{h}"), with(&|c| c.network.heads = h)))
                .collect()
        }
    })
}

fn feature_rows(out: &mut String, variant: &str, clips: &[ConversationClip], generated: &[Generated]) {
    for (clip, g) in clips.iter().zip(generated) {
        let stacked = g.motion.stacked();
        for (t, row) in stacked.rows().into_iter().enumerate() {
            let _ = write!(out, "{variant},{},{t},{}", clip.id, clip.emotion.slot());
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
}

fn feature_header(config: &ExperimentConfig) -> String {
    let mut h = String::from("variant,clip,frame,emotion");
    for i in 0..config.network.beta_dim {
        let _ = write!(h, ",beta_{i}");
    }
    for i in 0..config.network.pose_dim {
        let _ = write!(h, ",pose_{i}");
    }
    h.push('\n');
    h
}

pub fn cmd_ablate(config: &ExperimentConfig, mode: AblationMode) -> Result<AblationOutcome> {
    let corpus: Corpus = load_corpus(config)?;
    let dir = config.output.join(mode.dir_name());
    fs::create_dir_all(&dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
    write_run_metadata(&dir, config)?;

    let test = &corpus.test;
    let labels: Vec<usize> = test.iter().map(|c| c.emotion.slot()).collect();
    let n = config.network.emotions;
    let threshold = config.eval.blink_threshold;
    let mut rows = vec![evaluate_method("gt", test, &ground_truth_outputs(test), &config.eval, config.seed)?];
    let mut features = feature_header(config);
    let mut results = Vec::new();

    for (name, cfg) in variants(config, mode)? {
        let outcome = train_into(&cfg, &corpus, &dir.join(&name))?;
        let model = &outcome.model;
        let generated = model_outputs(model, test, None, threshold)?;
        rows.push(evaluate_method(&name, test, &generated, &config.eval, config.seed)?);
        feature_rows(&mut features, &name, test, &generated);
        results.push(VariantResult {
            name,
            heads: cfg.network.heads,
            latent: cfg.network.latent,
            separation: emotion_separation(&generated, &labels, n)?,
            override_shift: override_shift(model, test, threshold)?,
            emotion_accuracy: emotion_accuracy(model, test)?,
            initial_train_loss: outcome.initial.total,
            final_train_loss: outcome.last.total,
        });
    }

    let report = MetricReport {
        meta: ReportMeta {
            config_digest: config.network.digest(),
            seed: config.seed,
            clips: test.len(),
        },
        rows,
    };
    write(&dir.join("report.csv"), report.to_csv())?;
    write(&dir.join("report.json"), report.to_json()?)?;
    write(&dir.join("features.csv"), features)?;
    let ratio = match mode {
        AblationMode::Space => {
            let sep = |i: usize| results[i].separation;
            Some(sep(0) / sep(1))
        }
        AblationMode::Heads => None,
    };
    write_json(
        &dir.join("separation.json"),
        &json!({ "variants": results, "partitioned_over_base": ratio }),
    )?;
    Ok(AblationOutcome {
        dir,
        variants: results,
        report,
    })
}
