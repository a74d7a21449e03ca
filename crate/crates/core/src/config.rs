//! Model geometry and its plain `key = value` text form.

use crate::error::{Error, Result};

/// Architecture hyperparameters. Channel counts everywhere scale from the
/// full-size ResNet-50 ladder by `width_mult`; the two ablation flags
/// enable/disable the bottleneck branches without touching anything else.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Multiplies every base channel count (minimum one channel survives).
    pub width_mult: f64,
    /// Blocks per encoder stage. The fourth entry keeps the familiar
    /// ResNet-50 `[3,4,6,3]` shape but lies past the bottleneck tap and is
    /// not constructed.
    pub stage_depths: [usize; 4],
    pub use_transformer: bool,
    pub use_dilated: bool,
    /// Attention heads; must divide the bottleneck channel count.
    pub heads: usize,
    /// FFN expansion ratio inside the transformer block.
    pub ffn_ratio: usize,
    /// Square input resolution; must be a multiple of 16.
    pub input_size: usize,
    /// Upper bound on bottleneck token count (input_size/16 squared).
    pub token_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-scale geometry: ResNet-50 depths, 256x256 input, 8 heads.
    pub fn full() -> Self {
        ModelConfig {
            width_mult: 1.0,
            stage_depths: [3, 4, 6, 3],
            use_transformer: true,
            use_dilated: true,
            heads: 8,
            ffn_ratio: 4,
            input_size: 256,
            token_budget: 1024,
        }
    }

    /// Desk-scale geometry used by the overfit and bench paths:
    /// eighth width, single-block stages, 64x64 input.
    pub fn tiny() -> Self {
        ModelConfig {
            width_mult: 0.125,
            stage_depths: [1, 1, 1, 1],
            use_transformer: true,
            use_dilated: true,
            heads: 4,
            ffn_ratio: 4,
            input_size: 64,
            token_budget: 1024,
        }
    }

    /// Smallest trainable geometry (< 5k parameters), used by the
    /// whole-model gradient check where every forward costs 2 probes per
    /// checked coordinate.
    pub fn micro() -> Self {
        ModelConfig {
            width_mult: 1.0 / 128.0,
            stage_depths: [1, 1, 1, 1],
            use_transformer: true,
            use_dilated: true,
            heads: 4,
            ffn_ratio: 4,
            input_size: 32,
            token_budget: 1024,
        }
    }

    /// Scales a base channel count by `width_mult` (never below one).
    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }

    /// Channels of the encoder output fed to the bottleneck branches.
    pub fn bottleneck_channels(&self) -> usize {
        self.channels(1024)
    }

    /// Bottleneck token count for the transformer branch.
    pub fn tokens(&self) -> usize {
        let side = self.input_size / 16;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_mult <= 0.0 || !self.width_mult.is_finite() {
            return Err(Error::Config(format!(
                "width_mult must be positive, got {}",
                self.width_mult
            )));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config(format!(
                "stage_depths must all be >= 1, got {:?}",
                self.stage_depths
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be >= 1".into()));
        }
        if self.heads == 0 || !self.bottleneck_channels().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads={} must divide the bottleneck channel count {}",
                self.heads,
                self.bottleneck_channels()
            )));
        }
        if self.use_transformer && self.tokens() > self.token_budget {
            return Err(Error::Config(format!(
                "{} bottleneck tokens exceed the budget of {}; lower input_size",
                self.tokens(),
                self.token_budget
            )));
        }
        Ok(())
    }

    /// Serializes as `model.*` key=value lines (the checkpoint-embedded form).
    pub fn to_kv(&self) -> String {
        let depths = self
            .stage_depths
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "model.width_mult = {}\n\
             model.stage_depths = {depths}\n\
             model.use_transformer = {}\n\
             model.use_dilated = {}\n\
             model.heads = {}\n\
             model.ffn_ratio = {}\n\
             model.input_size = {}\n\
             model.token_budget = {}\n",
            self.width_mult,
            self.use_transformer,
            self.use_dilated,
            self.heads,
            self.ffn_ratio,
            self.input_size,
            self.token_budget,
        )
    }

    /// Parses `model.*` lines over the full-scale defaults, rejecting
    /// unknown keys.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::full();
        for (key, value) in parse_kv(text)? {
            cfg.apply_kv(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `model.*` setting.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.width_mult" => self.width_mult = parse_num(key, value)?,
            "model.stage_depths" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "{key} wants 4 comma-separated depths, got '{value}'"
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.stage_depths[i] = parse_num::<usize>(key, p)?;
                }
            }
            "model.use_transformer" => self.use_transformer = parse_bool(key, value)?,
            "model.use_dilated" => self.use_dilated = parse_bool(key, value)?,
            "model.heads" => self.heads = parse_num(key, value)?,
            "model.ffn_ratio" => self.ffn_ratio = parse_num(key, value)?,
            "model.input_size" => self.input_size = parse_num(key, value)?,
            "model.token_budget" => self.token_budget = parse_num(key, value)?,
            _ => {
                return Err(Error::Config(format!("unknown configuration key '{key}'")));
            }
        }
        Ok(())
    }
}

/// Splits `key = value` text into ordered pairs. Blank lines and `#`
/// comments are skipped; anything else without `=` is rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

pub fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got '{value}'"
        ))),
    }
}
