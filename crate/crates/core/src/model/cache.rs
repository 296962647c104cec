use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Self-attention keys and values of the captured rows at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRows {
    pub layer: usize,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Where a cache snapshot came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CaptureTag {
    pub block_id: u64,
    pub round: usize,
    pub level: usize,
}

/// Per-device feature cache: the previous block's self-attention K/V for every
/// layer the device owns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    pub tag: CaptureTag,
    pub frames: usize,
    pub entries: Vec<KvRows>,
}

impl LayerKVCache {
    pub fn layer(&self, index: usize) -> Option<&KvRows> {
        self.entries.iter().find(|e| e.layer == index)
    }

    pub fn layer_range(&self) -> std::ops::Range<usize> {
        match (self.entries.first(), self.entries.last()) {
            (Some(a), Some(b)) => a.layer..b.layer + 1,
            _ => 0..0,
        }
    }

    /// Checks that the cache covers `layers` with `frames × tokens_per_frame`
    /// rows of width `hidden` at each layer.
    pub fn check_geometry(&self, layers: std::ops::Range<usize>, tokens_per_frame: usize, hidden: usize) -> Result<()> {
        if self.layer_range() != layers || self.entries.len() != layers.len() {
            return Err(Error::Cache(format!(
                "cache covers layers {:?}, chunk needs {:?}",
                self.layer_range(),
                layers
            )));
        }
        let rows = self.frames * tokens_per_frame;
        for e in &self.entries {
            for t in [&e.keys, &e.values] {
                if t.shape() != [rows, hidden] {
                    return Err(Error::Cache(format!(
                        "layer {} holds {:?}, expected [{rows}, {hidden}]",
                        e.layer,
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nudges one stored key by a single ulp. Used to prove the equivalence
    /// checks can see a corrupted cache.
    pub fn perturb_one_ulp(&mut self, layer: usize) -> bool {
        match self.entries.iter_mut().find(|e| e.layer == layer) {
            Some(e) if !e.keys.is_empty() => {
                let v = &mut e.keys.data_mut()[0];
                *v = f64::from_bits(v.to_bits() ^ 1);
                true
            }
            _ => false,
        }
    }
}
