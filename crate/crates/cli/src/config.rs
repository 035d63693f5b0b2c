//! Experiment configuration: JSON file, `ELP_SEED`, then `--key value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use elp_core::corpus::CorpusSpec;
use elp_core::evaluation::EvalConfig;
use elp_core::network::NetworkConfig;
use elp_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "ELP_SEED";

/// Tool name and version written next to every output.
pub fn version_string() -> String {
    format!("elp {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Head counts swept by `ablate --mode heads`.
    pub heads: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            heads: vec![1, 4, 16, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Network under test; must stay small enough for exhaustive differences.
    pub network: NetworkConfig,
    pub seeds: usize,
    pub frames: usize,
    pub clips: usize,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameter tensor in the end-to-end check.
    pub coords_per_tensor: usize,
    /// Errors at or above this fail the command.
    pub fail_threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::reduced(),
            seeds: 10,
            frames: 10,
            clips: 2,
            step: 1e-5,
            coords_per_tensor: 24,
            fail_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model initialisation, batching, noise and baseline sampling.
    pub seed: u64,
    pub output: PathBuf,
    /// Defaults to `<output>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            corpus_dir: None,
            corpus: CorpusSpec::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir
            .clone()
            .unwrap_or_else(|| self.output.join("corpus"))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.network.emotions != self.corpus.emotions {
            bail!(
                "network.emotions = {} but corpus.emotions = {}",
                self.network.emotions,
                self.corpus.emotions
            );
        }
        let dims = (self.corpus.beta_dim, self.corpus.pose_dim, self.corpus.audio_dim);
        let net = (self.network.beta_dim, self.network.pose_dim, self.network.audio_dim);
        if dims != net {
            bail!("corpus dims {dims:?} differ from network dims {net:?}");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Sets the dotted `key` inside `root`. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("config key {key}: {} is not a section", parts[..i].join(".")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key {key}"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        if slot.is_null() {
            *slot = Value::Object(Default::default());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

/// Pairs `--key value` or `--key=value` tokens.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected --key, found '{tok}'"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("missing value for --{key}"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Resolves a config from an optional file, the seed variable `env_seed`,
/// and command-line overrides, in increasing precedence.
pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let parsed: ExperimentConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            parsed
        }
        None => ExperimentConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(seed) = env_seed {
        let seed: u64 = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={seed} is not an unsigned integer"))?;
        value["seed"] = Value::from(seed);
    }
    for (k, v) in parse_overrides(overrides)? {
        apply_override(&mut value, &k, &v)?;
    }
    let config: ExperimentConfig = serde_json::from_value(value).context("applying config overrides")?;
    config.validate()?;
    Ok(config)
}

/// Writes the resolved config and the version string into `dir`.
pub fn write_run_metadata(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), config.to_json()?)
        .with_context(|| format!("writing config into {}", dir.display()))?;
    fs::write(dir.join("VERSION"), version_string() + "\n")
        .with_context(|| format!("writing version into {}", dir.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = resolve(
            None,
            None,
            &strings(&["--train.iterations", "12", "--network.heads=8", "--output", "x/y"]),
        )
        .unwrap();
        assert_eq!(c.train.iterations, 12);
        assert_eq!(c.network.heads, 8);
        assert_eq!(c.output, PathBuf::from("x/y"));
    }

    #[test]
    fn env_seed_sits_between_file_and_flags() {
        assert_eq!(resolve(None, Some("41"), &[]).unwrap().seed, 41);
        assert_eq!(resolve(None, Some("41"), &strings(&["--seed", "5"])).unwrap().seed, 5);
        assert!(resolve(None, Some("x"), &[]).is_err());
    }

    #[test]
    fn unknown_or_malformed_keys_are_rejected() {
        assert!(resolve(None, None, &strings(&["--train.iteration", "3"])).is_err());
        assert!(resolve(None, None, &strings(&["--train.iterations"])).is_err());
        assert!(resolve(None, None, &strings(&["train.iterations", "3"])).is_err());
        assert!(resolve(None, None, &strings(&["--train.iterations", "many"])).is_err());
        assert!(resolve(None, None, &strings(&["--network.emotions", "2"])).is_err());
    }

    #[test]
    fn null_sections_accept_overrides() {
        let c = resolve(None, None, &strings(&["--corpus_dir", "data"])).unwrap();
        assert_eq!(c.corpus_dir(), PathBuf::from("data"));
    }

    #[test]
    fn file_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut c = ExperimentConfig::default();
        c.seed = 9;
        c.train.batch_size = 4;
        fs::write(&path, c.to_json().unwrap()).unwrap();
        assert_eq!(resolve(Some(&path), None, &[]).unwrap(), c);
    }
}
