//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, `--config` file, `TRUN_*`
//! environment variables, command-line flags. Unknown keys are rejected so
//! typos cannot silently fall back to defaults. Every run writes the fully
//! resolved configuration into its output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use trun_core::config::{parse_kv, parse_num, ModelConfig};
use trun_core::error::{Error, Result};
use trun_core::train::TrainConfig;

pub const LOSS_NAME: &str = "bce+dice";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Only the combined BCE+dice loss exists; any other value is rejected.
    pub loss: String,
    /// Train/val/test ratios for the built-in splitter.
    pub split: (f64, f64, f64),
    pub data_dir: Option<PathBuf>,
    pub train_list: Option<PathBuf>,
    pub val_list: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
    /// Non-zero enables the in-memory synthetic dataset.
    pub synth_n: usize,
    pub synth_seed: u64,
    pub out_dir: PathBuf,
    /// Graph element precision: 32 or 64.
    pub precision: u32,
    set_keys: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            train: TrainConfig::default(),
            loss: LOSS_NAME.to_string(),
            split: (0.8, 0.1, 0.1),
            data_dir: None,
            train_list: None,
            val_list: None,
            test_list: None,
            synth_n: 0,
            synth_seed: 7,
            out_dir: PathBuf::from("trun-out"),
            precision: 32,
            set_keys: BTreeSet::new(),
        }
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    /// Applies one setting, tracking that the key was explicitly set.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            _ if key.starts_with("model.") => self.model.apply_kv(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.batch" => self.train.batch_size = parse_num(key, value)?,
            "train.epochs" => self.train.max_epochs = parse_num(key, value)?,
            "train.patience" => self.train.patience = parse_num(key, value)?,
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "train.loss" => {
                if value != LOSS_NAME {
                    return Err(Error::Config(format!(
                        "train.loss: only '{LOSS_NAME}' is supported, got '{value}'"
                    )));
                }
            }
            "data.split" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "data.split wants three comma-separated ratios, got '{value}'"
                    )));
                }
                self.split = (
                    parse_num(key, parts[0])?,
                    parse_num(key, parts[1])?,
                    parse_num(key, parts[2])?,
                );
            }
            "data.dir" => self.data_dir = parse_path(value),
            "data.train_list" => self.train_list = parse_path(value),
            "data.val_list" => self.val_list = parse_path(value),
            "data.test_list" => self.test_list = parse_path(value),
            "data.synth_n" => self.synth_n = parse_num(key, value)?,
            "data.synth_seed" => self.synth_seed = parse_num(key, value)?,
            "out.dir" => {
                self.out_dir = parse_path(value).ok_or_else(|| {
                    Error::Config("out.dir cannot be empty".into())
                })?
            }
            "precision" => {
                let p: u32 = parse_num(key, value)?;
                if p != 32 && p != 64 {
                    return Err(Error::Config(format!(
                        "precision must be 32 or 64, got {p}"
                    )));
                }
                self.precision = p;
            }
            _ => {
                return Err(Error::Config(format!("unknown configuration key '{key}'")));
            }
        }
        self.set_keys.insert(key.to_string());
        Ok(())
    }

    /// True when the key was set by a file, environment or flag.
    pub fn was_set(&self, key: &str) -> bool {
        self.set_keys.contains(key)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv(text)? {
            self.apply(&key, &value)?;
        }
        Ok(())
    }

    /// Maps `TRUN_SECTION_REST` to `section.rest` (keys have at most one dot).
    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<()> {
        let mut pairs: Vec<(String, String)> = vars
            .filter_map(|(k, v)| {
                k.strip_prefix("TRUN_").map(|rest| {
                    let lower = rest.to_lowercase();
                    let key = match lower.find('_') {
                        Some(i) => format!("{}.{}", &lower[..i], &lower[i + 1..]),
                        None => lower,
                    };
                    (key, v)
                })
            })
            .collect();
        pairs.sort();
        for (key, value) in pairs {
            self.apply(&key, &value)
                .map_err(|e| Error::Config(format!("environment override: {e}")))?;
        }
        Ok(())
    }

    /// Defaults, then config file, then environment, then flag overrides.
    pub fn resolve(
        config_path: Option<&Path>,
        env: impl Iterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(env)?;
        for (key, value) in overrides {
            cfg.apply(key, value)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Full serialization of every key (the copy written into run outputs).
    pub fn to_text(&self) -> String {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut out = self.model.to_kv();
        out.push_str(&format!(
            "train.lr = {}\n\
             train.batch = {}\n\
             train.epochs = {}\n\
             train.patience = {}\n\
             train.seed = {}\n\
             train.loss = {}\n\
             data.split = {},{},{}\n\
             data.dir = {}\n\
             data.train_list = {}\n\
             data.val_list = {}\n\
             data.test_list = {}\n\
             data.synth_n = {}\n\
             data.synth_seed = {}\n\
             out.dir = {}\n\
             precision = {}\n",
            self.train.lr,
            self.train.batch_size,
            self.train.max_epochs,
            self.train.patience,
            self.train.seed,
            self.loss,
            self.split.0,
            self.split.1,
            self.split.2,
            path_str(&self.data_dir),
            path_str(&self.train_list),
            path_str(&self.val_list),
            path_str(&self.test_list),
            self.synth_n,
            self.synth_seed,
            self.out_dir.display(),
            self.precision,
        ));
        out
    }
}
