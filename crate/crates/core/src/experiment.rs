//! Experiment files: a training config plus data, output and backend plumbing.
//!
//! Experiments are TOML documents with a top-level `name`, a `[data]` table,
//! a `[train]` table holding a [`TrainConfig`], and optional
//! `[backends.prover]` settings. Unknown keys are rejected at every level.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graphtask::{build_mixture, parse_mixture, Dataset};
use crate::policy::{ExternalBackend, ExternalConfig, RolloutBackend};
use crate::seed::{self, stream};
use crate::trainer::{run, MetricsRecord, RunOptions, StepHooks, SuccessRates, TrainConfig, TrainerState};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "ZRL_SEED";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generated mixture such as `d2p3:0.5,d15p3:0.5`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<String>,
    /// Held-out mixture; defaults to `mixture`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mixture: Option<String>,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dataset files take precedence over generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
}

fn default_train_size() -> usize {
    20_000
}
fn default_test_size() -> usize {
    200
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    /// External model used as the Progress-Rewards prover.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prover: Option<ExternalConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write `iter-<n>.ckpt` every this many iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_interval: Option<u64>,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Paths and final numbers of a finished experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub records: Vec<MetricsRecord>,
}

impl Outcome {
    /// Success rates of the last evaluation record.
    pub fn final_success(&self) -> Option<&std::collections::BTreeMap<String, SuccessRates>> {
        self.records.iter().rev().find(|r| !r.success.is_empty()).map(|r| &r.success)
    }
}

/// Shipped experiment definitions, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("drgrpo-d2p2-smoke", include_str!("../presets/drgrpo-d2p2-smoke.toml")),
    ("drgrpo-easy", include_str!("../presets/drgrpo-easy.toml")),
    ("drgrpo-hard", include_str!("../presets/drgrpo-hard.toml")),
    ("drgrpo-mix", include_str!("../presets/drgrpo-mix.toml")),
    ("drgrpo-plateau", include_str!("../presets/drgrpo-plateau.toml")),
    ("progress-d2p2-smoke", include_str!("../presets/progress-d2p2-smoke.toml")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })?;
    ExperimentConfig::from_toml(text)
}

/// `ZRL_SEED`, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

impl ExperimentConfig {
    /// Parse without validating; see [`ExperimentConfig::validate`].
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read, apply `seed_override`, and validate.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(s) = seed_override {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::Config(format!(
                "name `{}` must be non-empty ASCII letters, digits, `-`, `_` or `.`",
                self.name
            )));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::Config("checkpoint_interval must be positive when set".into()));
        }
        self.train.validate()?;
        let d = &self.data;
        let (lo, hi) = (self.train.model.label_min, self.train.model.label_max);
        for (key, file) in [("data.train_file", &d.train_file), ("data.test_file", &d.test_file)] {
            if let Some(f) = file {
                if !f.is_file() {
                    return Err(Error::Config(format!("{key}: {} does not exist", f.display())));
                }
            }
        }
        match (&d.mixture, &d.train_file) {
            (None, None) => return Err(Error::Config("data needs `mixture` or `train_file`".into())),
            (Some(m), None) => {
                parse_mixture(m, lo, hi)?;
                if d.train_size == 0 {
                    return Err(Error::Config("data.train_size must be positive".into()));
                }
            }
            _ => {}
        }
        if d.test_file.is_none() {
            match d.test_mixture.as_ref().or(d.mixture.as_ref()) {
                Some(m) => {
                    for (spec, _) in parse_mixture(m, lo, hi)? {
                        spec.validate()?;
                    }
                }
                None => return Err(Error::Config("data needs `test_mixture` or `test_file`".into())),
            }
        }
        if let Some(p) = &self.backends.prover {
            if !(p.timeout_secs > 0.0) {
                return Err(Error::Config("backends.prover.timeout_secs must be positive".into()));
            }
        }
        Ok(())
    }

    /// Training and held-out sets, generated from disjoint seed streams
    /// unless files are given.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (lo, hi) = (self.train.model.label_min, self.train.model.label_max);
        let train = match (&d.train_file, &d.mixture) {
            (Some(f), _) => Dataset::load(f)?,
            (None, Some(m)) => build_mixture(&parse_mixture(m, lo, hi)?, d.train_size, train_seed(d.seed))?,
            (None, None) => return Err(Error::Config("data needs `mixture` or `train_file`".into())),
        };
        let test = match (&d.test_file, d.test_mixture.as_ref().or(d.mixture.as_ref())) {
            (Some(f), _) => Dataset::load(f)?,
            (None, Some(m)) => build_mixture(&parse_mixture(m, lo, hi)?, d.test_size, test_seed(d.seed))?,
            (None, None) => return Err(Error::Config("data needs `test_mixture` or `test_file`".into())),
        };
        Ok((train, test))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    fn prover(&self) -> Option<RolloutBackend> {
        self.backends.prover.as_ref().map(|p| {
            RolloutBackend::External(ExternalBackend::new(
                p.clone(),
                self.train.sampling(),
                self.train.arch().vocab(),
            ))
        })
    }

    /// Train, writing `config.toml`, `metrics.jsonl`, periodic and final
    /// checkpoints under [`ExperimentConfig::run_dir`]. Records already
    /// written stay on disk if training fails.
    pub fn execute<F>(&self, options: RunOptions, mut progress: F) -> Result<Outcome>
    where
        F: FnMut(&MetricsRecord),
    {
        self.validate()?;
        let (train, test) = self.datasets()?;
        let dir = self.run_dir();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG_FILE), self.to_toml()?)?;
        let metrics_path = dir.join(METRICS_FILE);
        let mut metrics = BufWriter::new(File::create(&metrics_path)?);
        let prover = self.prover();
        let hooks = StepHooks {
            prover: prover.as_ref(),
            ..StepHooks::default()
        };
        let mut records = Vec::new();
        let state = TrainerState::new(&self.train)?;
        let result = run(&self.train, state, &train, &test, &hooks, options, |rec, st| {
            serde_json::to_writer(&mut metrics, rec)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            if let Some(k) = self.checkpoint_interval {
                if rec.iteration > 0 && rec.iteration % k == 0 {
                    checkpoint::save(&dir.join(format!("iter-{}.ckpt", rec.iteration)), &st.params, rec.iteration)?;
                }
            }
            progress(rec);
            records.push(rec.clone());
            Ok(())
        });
        metrics.flush()?;
        let state = result?;
        let checkpoint_path = dir.join(FINAL_CHECKPOINT);
        checkpoint::save(&checkpoint_path, &state.params, state.iteration)?;
        Ok(Outcome {
            run_dir: dir,
            metrics_path,
            checkpoint_path,
            records,
        })
    }
}

pub fn train_seed(seed_value: u64) -> u64 {
    seed::derive(seed_value, &[stream::TRAIN_DATA])
}

pub fn test_seed(seed_value: u64) -> u64 {
    seed::derive(seed_value, &[stream::TEST_DATA])
}
