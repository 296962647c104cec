//! Single-device references: the queue driven round by round through the
//! whole model, with either a persistent feature cache or a cache rebuilt
//! from scratch for every use.

use std::collections::BTreeMap;

use super::engine::{emit, new_initializer};
use super::{CacheTraceEntry, EmittedBlock, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, CaptureSpec, CaptureTag, LayerKVCache, ModelChunk};
use crate::queue::{ExtendedBlock, LatentBlock, QueueState};
use crate::scheduler::scheduler_step;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CacheSource {
    /// Keep the last captured K/V, as a device would.
    Store,
    /// Re-run the neighbour's recorded pass each time its K/V is needed.
    Recompute,
}

/// Inputs of a pass, kept so the recompute oracle can replay it.
struct Recorded {
    tokens: Tensor,
    levels: Vec<usize>,
    capture: CaptureSpec,
    cached_from: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RecomputeOutput {
    pub blocks: Vec<EmittedBlock>,
    pub cache_trace: Vec<CacheTraceEntry>,
}

/// Canonical output: every pass on one worker running all `L` layers.
pub fn serial_oracle(cfg: &PipelineConfig) -> Result<Vec<EmittedBlock>> {
    run(cfg, CacheSource::Store).map(|o| o.blocks)
}

/// Like [`serial_oracle`] but with no cache store: whenever a pass needs its
/// later neighbour's K/V, that neighbour's pass is recomputed from its
/// recorded input.
pub fn explicit_recompute_oracle(cfg: &PipelineConfig) -> Result<RecomputeOutput> {
    run(cfg, CacheSource::Recompute)
}

fn flatten(ext: &ExtendedBlock, cfg: &PipelineConfig) -> Result<(Tensor, Vec<usize>)> {
    let frames = ext.explicit_frames()?;
    let rows = frames.shape()[0] * cfg.model.tokens_per_frame();
    Ok((frames.reshape(vec![rows, cfg.model.channels])?, ext.frame_levels()))
}

fn recompute(chunk: &ModelChunk, recorded: &BTreeMap<u64, Recorded>, block_id: u64) -> Result<LayerKVCache> {
    let rec = recorded.get(&block_id).ok_or(Error::Lookup(block_id))?;
    let later = rec.cached_from.map(|n| recompute(chunk, recorded, n)).transpose()?;
    chunk
        .forward(&rec.tokens, &rec.levels, later.as_ref(), Some(&rec.capture))?
        .captured
        .ok_or_else(|| Error::Cache(format!("replay of block {block_id} captured nothing")))
}

fn run(cfg: &PipelineConfig, source: CacheSource) -> Result<RecomputeOutput> {
    cfg.validate()?;
    let model = build_model(&cfg.model, cfg.model_seeds())?;
    let chunk = model.monolithic();
    let steps = cfg.model.steps;
    let half = cfg.num_c / 2;
    let cells = cfg.model.tokens_per_frame();
    let mut init = new_initializer(cfg)?;
    let mut queue = QueueState::new(cfg.queue_params())?;
    let mut stored: Option<LayerKVCache> = None;
    let mut last_ids: Vec<usize> = Vec::new();
    let mut blocks = Vec::new();
    let mut trace = Vec::new();
    let mut seq = 0usize;

    for round in 0.. {
        let new_block = if queue.appends_exhausted() {
            None
        } else {
            let id = queue.appended_count() as u64 + 1;
            let f = if id == 1 {
                init.first_block()?
            } else {
                let k = half.min(last_ids.len());
                init.next_block(&last_ids[last_ids.len() - k..])?
            };
            last_ids = f.noise_ids.clone();
            Some(LatentBlock::new(id, f.frames, steps, f.noise_ids))
        };
        let advanced = queue.advance(new_block)?;
        queue = advanced.state;
        if let Some(p) = advanced.popped {
            blocks.push(emit(cfg, p.block_id, p.frames, p.noise_ids)?);
        }
        if queue.is_empty() {
            break;
        }

        let mut recorded: BTreeMap<u64, Recorded> = BTreeMap::new();
        let mut updates = Vec::new();
        for id in queue.processing_order(cfg.order) {
            let ext = queue.assemble_extended(id, cfg.order, cfg.cache_enabled)?;
            let (tokens, levels) = flatten(&ext, cfg)?;
            let later = match (ext.cached_context_id, source) {
                (None, _) => None,
                (Some(src), CacheSource::Store) => match &stored {
                    Some(c) if c.tag.block_id == src && c.tag.round == round => Some(c.clone()),
                    other => {
                        return Err(Error::Cache(format!(
                            "pass of block {id} needs block {src} but the store holds {:?}",
                            other.as_ref().map(|c| c.tag)
                        )))
                    }
                },
                (Some(src), CacheSource::Recompute) => Some(recompute(&chunk, &recorded, src)?),
            };
            if let Some(c) = &later {
                trace.push(CacheTraceEntry { seq, source: c.tag.block_id, entries: c.entries.clone() });
            }
            let center = ext.center_range();
            let capture = CaptureSpec {
                tag: CaptureTag { block_id: id, round, level: ext.center_level },
                frames: center.start..center.start + half,
            };
            let wants_capture = cfg.cache_enabled && half > 0;
            let out = chunk.forward(&tokens, &levels, later.as_ref(), wants_capture.then_some(&capture))?;
            if source == CacheSource::Store {
                if let Some(c) = out.captured {
                    stored = Some(c);
                }
            }
            let eps = out
                .tokens
                .slice_rows(center.start * cells, center.end * cells)?
                .reshape(ext.center_frames.shape().to_vec())?;
            updates.push((id, scheduler_step(&ext.center_frames, &eps, ext.center_level, steps)?));
            if wants_capture {
                recorded.insert(id, Recorded { tokens, levels, capture, cached_from: ext.cached_context_id });
            }
            seq += 1;
        }
        for (id, x) in updates {
            queue.commit_pass(id, x)?;
        }
    }
    Ok(RecomputeOutput { blocks, cache_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::first_mismatch;
    use crate::queue::ProcessingOrder;

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            devices: 1,
            block_num: 4,
            model: ModelConfig { layers: 2, hidden: 8, steps: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn orders_agree_without_cache() {
        let rev = PipelineConfig { cache_enabled: false, ..cfg() };
        let seq = PipelineConfig { order: ProcessingOrder::Sequential, ..rev.clone() };
        assert_eq!(first_mismatch(&serial_oracle(&rev).unwrap(), &serial_oracle(&seq).unwrap()), None);
    }

    #[test]
    fn recompute_matches_store() {
        let c = cfg();
        let r = explicit_recompute_oracle(&c).unwrap();
        assert_eq!(first_mismatch(&r.blocks, &serial_oracle(&c).unwrap()), None);
        assert!(!r.cache_trace.is_empty());
    }

    #[test]
    fn emits_every_block_in_order() {
        let out = serial_oracle(&cfg()).unwrap();
        assert_eq!(out.iter().map(|b| b.block_id).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(out[0].frames.shape(), &[4, 2, 2, 4]);
        assert_eq!(out[1].frames.shape(), &[2, 2, 2, 4]);
    }

    #[test]
    fn cache_changes_output() {
        let on = serial_oracle(&cfg()).unwrap();
        let off = serial_oracle(&PipelineConfig { cache_enabled: false, ..cfg() }).unwrap();
        assert!(first_mismatch(&on, &off).is_some());
    }
}
