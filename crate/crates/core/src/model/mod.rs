//! Toy DiT denoiser, partitionable into contiguous layer chunks.
//!
//! A chunk consumes the explicit tokens of an extended block (`frames × H·W`
//! rows) and, per layer, lets them attend to themselves plus an optional set of
//! cached key/value rows from the video-later neighbour. Cross-attention and
//! the FFN act per token and never see the cache.

mod attention;
mod cache;
mod config;
mod weights;

use std::ops::Range;

pub use attention::{
    cross_attention_sublayer, ffn_sublayer, multi_head_attention, project_self_attention, self_attention_update,
    SelfAttentionProjections,
};
pub use cache::{CaptureTag, KvRows, LayerKVCache};
pub use config::ModelConfig;
pub use weights::{
    build_input_embed, build_layers, build_output_head, context_tokens, InputEmbed, LayerWeights, ModelSeeds, Norm,
    OutputHead,
};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Sinusoidal embedding of a noise level: pairs `(sin, cos)` of `t / 10000^(2i/h)`,
/// with a trailing `sin` when `h` is odd.
pub fn timestep_embedding(level: usize, hidden: usize) -> Vec<f64> {
    let t = level as f64;
    let half = hidden / 2;
    let mut out = Vec::with_capacity(hidden);
    for i in 0..half {
        let freq = 10_000f64.powf(-(2.0 * i as f64) / hidden as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    if hidden % 2 == 1 {
        let freq = 10_000f64.powf(-(2.0 * half as f64) / hidden as f64);
        out.push((t * freq).sin());
    }
    out
}

/// Full weight set for all `L` layers plus embed and head.
#[derive(Debug, Clone, PartialEq)]
pub struct DitModel {
    pub cfg: ModelConfig,
    pub seeds: ModelSeeds,
    pub embed: InputEmbed,
    pub layers: Vec<LayerWeights>,
    pub head: OutputHead,
}

pub fn build_model(cfg: &ModelConfig, seeds: ModelSeeds) -> Result<DitModel> {
    cfg.validate()?;
    Ok(DitModel {
        cfg: cfg.clone(),
        seeds,
        embed: build_input_embed(cfg, seeds.model),
        layers: build_layers(cfg, seeds, 0..cfg.layers)?,
        head: build_output_head(cfg, seeds.model),
    })
}

fn check_partition(layers: usize, devices: usize) -> Result<usize> {
    if devices == 0 || !layers.is_multiple_of(devices) {
        return Err(Error::Partition { layers, devices });
    }
    Ok(layers / devices)
}

impl DitModel {
    /// Splits into `devices` chunks of `L / devices` consecutive layers.
    pub fn partition(&self, devices: usize) -> Result<Vec<ModelChunk>> {
        let per = check_partition(self.cfg.layers, devices)?;
        Ok((0..devices)
            .map(|j| ModelChunk {
                cfg: self.cfg.clone(),
                index: j,
                layer_range: j * per..(j + 1) * per,
                layers: self.layers[j * per..(j + 1) * per].to_vec(),
                embed: (j == 0).then(|| self.embed.clone()),
                head: (j + 1 == devices).then(|| self.head.clone()),
            })
            .collect())
    }

    /// The whole model as one chunk.
    pub fn monolithic(&self) -> ModelChunk {
        self.partition(1).expect("one device always divides").remove(0)
    }
}

/// What `forward` should snapshot for the next block's use.
#[derive(Debug, Clone)]
pub struct CaptureSpec {
    pub tag: CaptureTag,
    /// Frame indices within the explicit frames.
    pub frames: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct ChunkOutput {
    /// Hidden rows (`rows × h`), or the noise prediction (`rows × C`) on the
    /// last chunk.
    pub tokens: Tensor,
    pub captured: Option<LayerKVCache>,
}

/// Contiguous layers `[start, end)` owned by one device.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelChunk {
    pub cfg: ModelConfig,
    pub index: usize,
    pub layer_range: Range<usize>,
    pub layers: Vec<LayerWeights>,
    pub embed: Option<InputEmbed>,
    pub head: Option<OutputHead>,
}

impl ModelChunk {
    /// Regenerates chunk `index` of `devices` straight from the seeds.
    pub fn build(cfg: &ModelConfig, seeds: ModelSeeds, index: usize, devices: usize) -> Result<Self> {
        cfg.validate()?;
        let per = check_partition(cfg.layers, devices)?;
        if index >= devices {
            return Err(Error::config(format!("chunk {index} of {devices}")));
        }
        let range = index * per..(index + 1) * per;
        Ok(Self {
            cfg: cfg.clone(),
            index,
            layers: build_layers(cfg, seeds, range.clone())?,
            layer_range: range,
            embed: (index == 0).then(|| build_input_embed(cfg, seeds.model)),
            head: (index + 1 == devices).then(|| build_output_head(cfg, seeds.model)),
        })
    }

    pub fn is_first(&self) -> bool {
        self.embed.is_some()
    }

    pub fn is_last(&self) -> bool {
        self.head.is_some()
    }

    /// Width of the rows this chunk accepts.
    pub fn input_width(&self) -> usize {
        if self.is_first() {
            self.cfg.channels
        } else {
            self.cfg.hidden
        }
    }

    fn embed_tokens(&self, embed: &InputEmbed, latents: &Tensor, levels: &[usize]) -> Result<Tensor> {
        let cells = self.cfg.tokens_per_frame();
        let h = self.cfg.hidden;
        let mut x = matmul(latents, &embed.patch_w)?.add_row_vector(&embed.patch_b)?;
        let rows = x.rows();
        let data = x.data_mut();
        for r in 0..rows {
            let pos = embed.position.row(r % cells);
            let temb = timestep_embedding(levels[r / cells], h);
            for ((v, p), t) in data[r * h..(r + 1) * h].iter_mut().zip(pos).zip(&temb) {
                *v = (*v + p) + t;
            }
        }
        Ok(x)
    }

    /// Runs this chunk's layers over the explicit tokens of one extended block.
    ///
    /// `later` holds the cached K/V rows of the video-later neighbour; they are
    /// appended after the explicit keys so key order follows video time.
    pub fn forward(
        &self,
        tokens: &Tensor,
        levels: &[usize],
        later: Option<&LayerKVCache>,
        capture: Option<&CaptureSpec>,
    ) -> Result<ChunkOutput> {
        let cfg = &self.cfg;
        let cells = cfg.tokens_per_frame();
        let rows = levels.len() * cells;
        if tokens.shape() != [rows, self.input_width()] {
            return Err(Error::dim(format!(
                "chunk {} expects [{rows}, {}] for {} frames, got {:?}",
                self.index,
                self.input_width(),
                levels.len(),
                tokens.shape()
            )));
        }
        if let Some(cache) = later {
            cache.check_geometry(self.layer_range.clone(), cells, cfg.hidden)?;
        }
        if let Some(c) = capture {
            if c.frames.end > levels.len() || c.frames.start > c.frames.end {
                return Err(Error::Cache(format!(
                    "capture frames {:?} outside {} explicit frames",
                    c.frames,
                    levels.len()
                )));
            }
        }

        let mut x = match &self.embed {
            Some(embed) => self.embed_tokens(embed, tokens, levels)?,
            None => tokens.clone(),
        };
        let mut captured = Vec::new();
        for layer in &self.layers {
            let p = project_self_attention(layer, &x, cfg.ln_eps)?;
            if let Some(c) = capture {
                let (lo, hi) = (c.frames.start * cells, c.frames.end * cells);
                captured.push(KvRows {
                    layer: layer.index,
                    keys: p.k.slice_rows(lo, hi)?,
                    values: p.v.slice_rows(lo, hi)?,
                });
            }
            let (keys, values) = match later.and_then(|c| c.layer(layer.index)) {
                Some(kv) => (Tensor::concat_rows(&[&p.k, &kv.keys])?, Tensor::concat_rows(&[&p.v, &kv.values])?),
                None => (p.k, p.v),
            };
            x = self_attention_update(layer, &x, &p.q, &keys, &values, cfg.heads)?;
            x = cross_attention_sublayer(layer, &x, cfg.heads, cfg.ln_eps)?;
            x = ffn_sublayer(layer, &x, cfg.ln_eps)?;
        }
        if let Some(head) = &self.head {
            let a = attention::norm_affine(&x, &head.norm, cfg.ln_eps)?;
            x = matmul(&a, &head.weight)?.add_row_vector(&head.bias)?;
        }
        let captured = capture.map(|c| LayerKVCache { tag: c.tag, frames: c.frames.len(), entries: captured });
        Ok(ChunkOutput { tokens: x, captured })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn small() -> ModelConfig {
        ModelConfig { layers: 8, hidden: 8, ..Default::default() }
    }

    const SEEDS: ModelSeeds = ModelSeeds { model: 11, context: 12 };

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = build_model(&small(), SEEDS).unwrap();
        let b = build_model(&small(), SEEDS).unwrap();
        assert_eq!(a, b);
        let c = build_model(&small(), ModelSeeds { model: 2, ..SEEDS }).unwrap();
        assert_ne!(a.layers[0].wq, c.layers[0].wq);
    }

    #[test]
    fn partition_ranges() {
        let m = build_model(&small(), SEEDS).unwrap();
        let ranges: Vec<_> = m.partition(4).unwrap().iter().map(|c| c.layer_range.clone()).collect();
        assert_eq!(ranges, vec![0..2, 2..4, 4..6, 6..8]);
        assert_eq!(m.partition(1).unwrap()[0].layer_range, 0..8);
        let chunks = m.partition(4).unwrap();
        assert!(chunks[0].is_first() && !chunks[0].is_last());
        assert!(chunks[3].is_last() && !chunks[3].is_first());
    }

    #[test]
    fn partition_rejects_indivisible() {
        let m = build_model(&ModelConfig { layers: 6, ..small() }, SEEDS).unwrap();
        assert!(matches!(m.partition(4), Err(Error::Partition { layers: 6, devices: 4 })));
    }

    #[test]
    fn regenerated_chunks_equal_monolithic_partition() {
        let m = build_model(&small(), SEEDS).unwrap();
        for (j, chunk) in m.partition(4).unwrap().into_iter().enumerate() {
            assert_eq!(ModelChunk::build(&small(), SEEDS, j, 4).unwrap(), chunk);
        }
    }

    #[test]
    fn timestep_embedding_is_injective() {
        let embs: Vec<_> = (1..=1000).map(|t| timestep_embedding(t, 8)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j]);
            }
        }
        assert_eq!(timestep_embedding(3, 5).len(), 5);
    }

    #[test]
    fn forward_rejects_bad_cache_geometry() {
        let cfg = small();
        let m = build_model(&cfg, SEEDS).unwrap();
        let chunks = m.partition(2).unwrap();
        let mut r = RandomSource::new(1);
        let tokens = Tensor::matrix(2 * 4, cfg.channels, r.normals(8 * cfg.channels)).unwrap();
        let spec = CaptureSpec { tag: CaptureTag { block_id: 1, round: 0, level: 3 }, frames: 0..1 };
        let out = chunks[0].forward(&tokens, &[3, 3], None, Some(&spec)).unwrap();
        let cache = out.captured.unwrap();
        // chunk 1 owns different layers
        let hidden = out.tokens;
        let err = chunks[1].forward(&hidden, &[3, 3], Some(&cache), None).unwrap_err();
        assert!(matches!(err, Error::Cache(_)));
        // wrong row count
        let bad = tokens.slice_rows(0, 6).unwrap();
        assert!(matches!(chunks[0].forward(&bad, &[3, 3], None, None), Err(Error::Dimension(_))));
    }
}
