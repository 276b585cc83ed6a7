//! Run configuration: key = value sections in plain text, mirroring the
//! pipeline knobs. Unknown sections or keys are config errors.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// "mnist" (IDX directory) or "synthetic" (Gaussian blobs).
    pub dataset: String,
    pub mnist_dir: Option<String>,
    pub classes: usize,
    pub synth_n: usize,
    pub synth_dim: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSection {
    /// Probe count m for weight traces.
    pub weight_probes: usize,
    /// Batch/probe count N for activation traces.
    pub act_probes: usize,
    /// Samples per Hessian batch.
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSection {
    pub episodes: usize,
    /// Weight budget: minimum compression ratio (32 / avg w-bits).
    pub wcomp_budget: f64,
    /// Activation budget: maximum element-weighted average bits.
    pub abits_budget: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub baseline_epochs: usize,
    pub lr: f64,
    /// Fine-tuning (reward and post-search) learning rate.
    pub finetune_lr: f64,
    pub batch_size: usize,
    /// Samples used for PACT calibration and the loss landscape.
    pub calib_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub trace: TraceSection,
    pub search: SearchSection,
    pub train: TrainSection,
}

/// The slice of the config a checkpoint carries along so that later commands
/// can rebuild the same dataset and training setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEcho {
    pub model: String,
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainSection,
    pub trace: TraceSection,
}

impl RunConfig {
    pub fn echo(&self) -> RunEcho {
        RunEcho {
            model: self.model.clone(),
            seed: self.seed,
            data: self.data.clone(),
            train: self.train.clone(),
            trace: self.trace.clone(),
        }
    }

    pub fn defaults() -> Self {
        RunConfig {
            model: "convnet-s".into(),
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig {
                dataset: "mnist".into(),
                mnist_dir: None,
                classes: 10,
                synth_n: 600,
                synth_dim: 16,
                separation: 6.0,
            },
            trace: TraceSection {
                weight_probes: 16,
                act_probes: 16,
                batch_size: 32,
            },
            search: SearchSection {
                episodes: 120,
                wcomp_budget: 10.0,
                abits_budget: 4.0,
            },
            train: TrainSection {
                baseline_epochs: 3,
                lr: 0.1,
                finetune_lr: 0.01,
                batch_size: 32,
                calib_samples: 128,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut cfg = Self::defaults();
        for (section, entries) in &sections {
            for (key, value) in entries {
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad_key = || Error::Config(format!("unknown key '{key}' in section [{section}]"));
        match section {
            "run" => match key {
                "model" => self.model = value.into(),
                "dataset" => self.data.dataset = value.into(),
                "seed" => self.seed = parse_num(section, key, value)?,
                "out_dir" => self.out_dir = PathBuf::from(value),
                _ => return Err(bad_key()),
            },
            "data" => match key {
                "mnist_dir" => self.data.mnist_dir = Some(value.into()),
                "classes" => self.data.classes = parse_num(section, key, value)?,
                "synth_n" => self.data.synth_n = parse_num(section, key, value)?,
                "synth_dim" => self.data.synth_dim = parse_num(section, key, value)?,
                "separation" => self.data.separation = parse_f64(section, key, value)?,
                _ => return Err(bad_key()),
            },
            "trace" => match key {
                "weight_probes" => self.trace.weight_probes = parse_num(section, key, value)?,
                "act_probes" => self.trace.act_probes = parse_num(section, key, value)?,
                "batch_size" => self.trace.batch_size = parse_num(section, key, value)?,
                _ => return Err(bad_key()),
            },
            "search" => match key {
                "episodes" => self.search.episodes = parse_num(section, key, value)?,
                "wcomp_budget" => self.search.wcomp_budget = parse_f64(section, key, value)?,
                "abits_budget" => self.search.abits_budget = parse_f64(section, key, value)?,
                _ => return Err(bad_key()),
            },
            "train" => match key {
                "baseline_epochs" => self.train.baseline_epochs = parse_num(section, key, value)?,
                "lr" => self.train.lr = parse_f64(section, key, value)?,
                "finetune_lr" => self.train.finetune_lr = parse_f64(section, key, value)?,
                "batch_size" => self.train.batch_size = parse_num(section, key, value)?,
                "calib_samples" => self.train.calib_samples = parse_num(section, key, value)?,
                _ => return Err(bad_key()),
            },
            other => return Err(Error::Config(format!("unknown section [{other}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.model.as_str(), "mlp-s" | "convnet-s") {
            return Err(Error::Config(format!("model must be mlp-s or convnet-s, got '{}'", self.model)));
        }
        if !matches!(self.data.dataset.as_str(), "mnist" | "synthetic") {
            return Err(Error::Config(format!(
                "dataset must be mnist or synthetic, got '{}'",
                self.data.dataset
            )));
        }
        if self.data.dataset == "mnist" && self.data.mnist_dir.is_none() {
            return Err(Error::Config("dataset = mnist requires data.mnist_dir".into()));
        }
        if self.search.wcomp_budget < 4.0 || self.search.wcomp_budget > 16.0 {
            return Err(Error::Config(format!(
                "wcomp_budget must lie in [4, 16] (avg bits in [2, 8]), got {}",
                self.search.wcomp_budget
            )));
        }
        if self.search.abits_budget < 2.0 || self.search.abits_budget > 8.0 {
            return Err(Error::Config(format!(
                "abits_budget must lie in [2, 8], got {}",
                self.search.abits_budget
            )));
        }
        if self.search.episodes == 0 || self.trace.weight_probes == 0 || self.trace.act_probes == 0 {
            return Err(Error::Config("episodes and probe counts must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {value}: not a valid integer")))
}

fn parse_f64(section: &str, key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {value}: not a valid number")))
}

type Sections = Vec<(String, Vec<(String, String)>)>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = Vec::new();
    let mut current: Option<usize> = None;
    let mut seen = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            current = Some(out.len());
            out.push((name, Vec::new()));
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let Some(cur) = current else {
            return Err(Error::Config(format!(
                "line {}: key outside any [section]",
                lineno + 1
            )));
        };
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let dup = seen.insert((out[cur].0.clone(), key.clone()), ());
        if dup.is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}' in section [{}]",
                lineno + 1,
                out[cur].0
            )));
        }
        out[cur].1.push((key, value));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# demo config
[run]
model = mlp-s
dataset = synthetic
seed = 7
out_dir = /tmp/demo

[data]
classes = 4
synth_n = 200

[search]
episodes = 12
wcomp_budget = 8.0
abits_budget = 4.0
";

    #[test]
    fn parses_sections_and_defaults() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.model, "mlp-s");
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.classes, 4);
        assert_eq!(cfg.search.episodes, 12);
        // untouched defaults survive
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.trace.weight_probes, 16);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(RunConfig::parse("[run]\nmodelz = x\n").is_err());
        assert!(RunConfig::parse("[nope]\na = 1\n").is_err());
        assert!(RunConfig::parse("[run]\nmodel mlp-s\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = abc\n").is_err());
    }

    #[test]
    fn rejects_invalid_combinations() {
        // mnist without a directory
        let bad = "[run]\nmodel = convnet-s\ndataset = mnist\n";
        assert!(RunConfig::parse(bad).is_err());
        let bad2 = "[run]\nmodel = mlp-s\ndataset = synthetic\n[search]\nwcomp_budget = 20\n";
        assert!(RunConfig::parse(bad2).is_err());
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(RunConfig::parse("[run]\nseed = 1\nseed = 2\n").is_err());
    }
}
