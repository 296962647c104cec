//! Flat key/value run configuration. Every key has a default; a JSON file may
//! set any subset and command-line flags override the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::noise::InitStrategy;
use crate::pipeline::{EngineMode, PipelineConfig, Seeds};
use crate::queue::ProcessingOrder;

/// Environment variable supplying the base seed when neither the file nor a
/// flag sets one.
pub const SEED_ENV: &str = "BLOCKPIPE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Text => "text",
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub devices: usize,
    pub order: ProcessingOrder,
    pub cache_enabled: bool,
    pub num_b: usize,
    pub num_c: usize,
    pub block_num: usize,
    pub layers: usize,
    pub hidden: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub context_len: usize,
    pub steps: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub model_seed: u64,
    pub noise_seed: u64,
    pub context_seed: u64,
    pub strategy: InitStrategy,
    pub retain_head_context: bool,
    pub emit_first_block_surplus: bool,
    pub engine: EngineMode,
    pub out_dir: PathBuf,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_base_seed(1)
    }
}

impl RunConfig {
    /// Defaults with seeds `base`, `base + 1`, `base + 2` for model, noise
    /// and context.
    pub fn with_base_seed(base: u64) -> Self {
        let p = PipelineConfig::default();
        let m = p.model;
        Self {
            devices: p.devices,
            order: p.order,
            cache_enabled: p.cache_enabled,
            num_b: p.num_b,
            num_c: p.num_c,
            block_num: p.block_num,
            layers: m.layers,
            hidden: m.hidden,
            channels: m.channels,
            height: m.height,
            width: m.width,
            heads: m.heads,
            context_len: m.context_len,
            steps: m.steps,
            ffn_mult: m.ffn_mult,
            ln_eps: m.ln_eps,
            model_seed: base,
            noise_seed: base.wrapping_add(1),
            context_seed: base.wrapping_add(2),
            strategy: p.strategy,
            retain_head_context: p.retain_head_context,
            emit_first_block_surplus: p.emit_first_block_surplus,
            engine: EngineMode::default(),
            out_dir: PathBuf::from("out"),
            format: ReportFormat::default(),
        }
    }

    /// Base seed from [`SEED_ENV`], if set.
    pub fn env_seed() -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(None),
        }
    }

    /// Overlays the keys of a flat JSON object onto `self`.
    pub fn merge_json(&self, text: &str) -> Result<Self> {
        let overlay: serde_json::Value = serde_json::from_str(text)?;
        let serde_json::Value::Object(overlay) = overlay else {
            return Err(Error::config("config file must hold a JSON object"));
        };
        let mut base = serde_json::to_value(self)?;
        let map = base.as_object_mut().expect("RunConfig serializes to an object");
        for (k, v) in overlay {
            map.insert(k, v);
        }
        serde_json::from_value(base).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        base.merge_json(&text)
    }

    /// Compact JSON with keys in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("RunConfig always serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            channels: self.channels,
            height: self.height,
            width: self.width,
            heads: self.heads,
            context_len: self.context_len,
            steps: self.steps,
            ffn_mult: self.ffn_mult,
            ln_eps: self.ln_eps,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            devices: self.devices,
            order: self.order,
            cache_enabled: self.cache_enabled,
            num_b: self.num_b,
            num_c: self.num_c,
            block_num: self.block_num,
            model: self.model_config(),
            seeds: Seeds { model: self.model_seed, noise: self.noise_seed, context: self.context_seed },
            strategy: self.strategy,
            retain_head_context: self.retain_head_context,
            emit_first_block_surplus: self.emit_first_block_surplus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline_config().validate()
    }
}
