use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy denoiser. Patchify is a per-cell linear map, so the
/// token grid equals the latent grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub context_len: usize,
    pub steps: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 16,
            channels: 4,
            height: 2,
            width: 2,
            heads: 2,
            context_len: 4,
            steps: 8,
            ffn_mult: default_ffn_mult(),
            ln_eps: default_ln_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("heads", self.heads),
            ("context_len", self.context_len),
            ("steps", self.steps),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Scalars in one latent frame (`H × W × C`).
    pub fn frame_len(&self) -> usize {
        self.tokens_per_frame() * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_head_split_and_zeros() {
        let cfg = ModelConfig { hidden: 10, heads: 4, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig { layers: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
