//! Block-wise denoising across `N` simulated devices, plus the single-device
//! oracles it is checked against.

mod engine;
pub mod ledger;
mod oracle;
pub mod plan;
pub mod schedule;

use serde::{Deserialize, Serialize};

pub use engine::{Coordinator, DeviceWorker, StageMessage};
pub use ledger::{Boundary, Payload, TransferLedger};
pub use oracle::{explicit_recompute_oracle, serial_oracle, RecomputeOutput};
pub use plan::{PassPlan, Plan, RoundPlan, StateRef};
pub use schedule::{check_precedence, complete_log, measure_bubbles, BubbleStats, Phase, ScheduleEvent};

use crate::error::{Error, Result};
use crate::model::{KvRows, ModelChunk, ModelConfig, ModelSeeds};
use crate::noise::{FrameShape, InitStrategy};
use crate::queue::{ProcessingOrder, QueueParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub noise: u64,
    pub context: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 1, noise: 2, context: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub devices: usize,
    pub order: ProcessingOrder,
    pub cache_enabled: bool,
    pub num_b: usize,
    pub num_c: usize,
    pub block_num: usize,
    pub model: ModelConfig,
    pub seeds: Seeds,
    pub strategy: InitStrategy,
    pub retain_head_context: bool,
    pub emit_first_block_surplus: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            devices: 2,
            order: ProcessingOrder::Reverse,
            cache_enabled: true,
            num_b: 2,
            num_c: 4,
            block_num: 6,
            model: ModelConfig::default(),
            seeds: Seeds::default(),
            strategy: InitStrategy::Coordinated,
            retain_head_context: true,
            emit_first_block_surplus: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::config("N must be at least 1"));
        }
        self.model.validate()?;
        if !self.model.layers.is_multiple_of(self.devices) {
            return Err(Error::Partition { layers: self.model.layers, devices: self.devices });
        }
        self.queue_params().validate()
    }

    pub fn steps(&self) -> usize {
        self.model.steps
    }

    pub fn queue_params(&self) -> QueueParams {
        QueueParams {
            num_b: self.num_b,
            num_c: self.num_c,
            steps: self.model.steps,
            block_num: self.block_num,
            retain_head_context: self.retain_head_context,
        }
    }

    pub fn model_seeds(&self) -> ModelSeeds {
        ModelSeeds { model: self.seeds.model, context: self.seeds.context }
    }

    pub fn frame_shape(&self) -> FrameShape {
        FrameShape { height: self.model.height, width: self.model.width, channels: self.model.channels }
    }

    pub fn plan(&self) -> Plan {
        Plan::build(self.queue_params(), self.devices, self.order, self.cache_enabled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineMode {
    /// One OS thread per device.
    #[default]
    Threaded,
    /// Round-robin interleaving on the calling thread.
    SingleThreaded,
}

/// Flip the lowest bit of one cached key captured during pass `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheFault {
    pub seq: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub mode: EngineMode,
    pub fault: Option<CacheFault>,
    pub trace_cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedBlock {
    pub block_id: u64,
    /// `[f, H, W, C]`.
    pub frames: Tensor,
    pub noise_ids: Vec<usize>,
}

/// Cached K/V rows consumed by pass `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheTraceEntry {
    pub seq: usize,
    pub source: u64,
    pub entries: Vec<KvRows>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub blocks: Vec<EmittedBlock>,
    /// Complete log, idle slots included.
    pub events: Vec<ScheduleEvent>,
    pub ledger: TransferLedger,
    /// One entry per consuming pass, all layers merged; empty unless traced.
    pub cache_trace: Vec<CacheTraceEntry>,
    pub plan: Plan,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    run_pipeline_with(cfg, &RunOptions::default())
}

pub fn run_pipeline_with(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let plan = cfg.plan();
    let workers = (0..cfg.devices)
        .map(|j| {
            let chunk = ModelChunk::build(&cfg.model, cfg.model_seeds(), j, cfg.devices)?;
            let fault = opts.fault.filter(|f| chunk.layer_range.contains(&f.layer));
            Ok(DeviceWorker::new(chunk, &plan, fault, opts.trace_cache))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut coord = Coordinator::new(&plan, cfg)?;
    let workers = match opts.mode {
        EngineMode::Threaded => engine::run_threaded(&mut coord, workers)?,
        EngineMode::SingleThreaded => {
            let mut workers = workers;
            engine::run_single_threaded(&mut coord, &mut workers)?;
            workers
        }
    };
    let (blocks, mut ledger) = coord.finish();
    let mut busy = Vec::new();
    let mut traces: Vec<CacheTraceEntry> = Vec::new();
    for w in workers {
        let parts = w.into_parts();
        busy.extend(parts.events);
        ledger.merge(&parts.ledger)?;
        traces.extend(parts.trace);
    }
    let events = complete_log(busy, cfg.devices)?;
    Ok(RunOutput { blocks, events, ledger, cache_trace: merge_traces(traces), plan })
}

/// Joins per-device entries of the same pass, ordering layers ascending.
pub(crate) fn merge_traces(mut traces: Vec<CacheTraceEntry>) -> Vec<CacheTraceEntry> {
    traces.sort_by_key(|t| (t.seq, t.entries.first().map_or(0, |e| e.layer)));
    let mut out: Vec<CacheTraceEntry> = Vec::new();
    for t in traces {
        match out.last_mut() {
            Some(last) if last.seq == t.seq => last.entries.extend(t.entries),
            _ => out.push(t),
        }
    }
    out
}

/// First disagreement between two emitted sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub block_id: u64,
    /// Flat element index, or `None` when block sets or shapes differ.
    pub index: Option<usize>,
}

pub fn first_mismatch(a: &[EmittedBlock], b: &[EmittedBlock]) -> Option<Mismatch> {
    if a.len() != b.len() {
        let id = a
            .iter()
            .zip(b)
            .find(|(x, y)| x.block_id != y.block_id)
            .map_or_else(|| a.len().min(b.len()) as u64 + 1, |(x, _)| x.block_id);
        return Some(Mismatch { block_id: id, index: None });
    }
    a.iter().zip(b).find_map(|(x, y)| {
        if x.block_id != y.block_id || x.frames.shape() != y.frames.shape() {
            return Some(Mismatch { block_id: x.block_id, index: None });
        }
        x.frames.first_bit_difference(&y.frames).map(|i| Mismatch { block_id: x.block_id, index: Some(i) })
    })
}

/// First `(seq, layer)` at which two cache traces disagree bitwise.
pub fn first_trace_mismatch(a: &[CacheTraceEntry], b: &[CacheTraceEntry]) -> Option<(usize, usize)> {
    if a.len() != b.len() {
        let seq = a.iter().zip(b).find(|(x, y)| x.seq != y.seq).map_or(usize::MAX, |(x, _)| x.seq);
        return Some((seq, usize::MAX));
    }
    for (x, y) in a.iter().zip(b) {
        if x.seq != y.seq || x.source != y.source || x.entries.len() != y.entries.len() {
            return Some((x.seq, usize::MAX));
        }
        for (p, q) in x.entries.iter().zip(&y.entries) {
            if p.layer != q.layer || !p.keys.bit_eq(&q.keys) || !p.values.bit_eq(&q.values) {
                return Some((x.seq, p.layer));
            }
        }
    }
    None
}

/// The earliest pass whose captured cache is consumed by a later pass, as a
/// default fault target.
pub fn default_fault(plan: &Plan) -> Option<CacheFault> {
    plan.passes.iter().find_map(|p| {
        let src = p.cached_from?;
        plan.passes
            .iter()
            .take(p.seq)
            .rev()
            .find(|q| q.block_id == src && q.round == p.round)
            .map(|q| CacheFault { seq: q.seq, layer: 0 })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            devices: 2,
            block_num: 4,
            model: ModelConfig { layers: 2, hidden: 8, steps: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn validation() {
        assert!(matches!(PipelineConfig { devices: 3, ..small() }.validate(), Err(Error::Partition { .. })));
        assert!(matches!(PipelineConfig { devices: 0, ..small() }.validate(), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig { num_c: 3, ..small() }.validate(), Err(Error::Config(_))));
        small().validate().unwrap();
    }

    #[test]
    fn modes_agree_and_match_oracle() {
        let cfg = small();
        let a = run_pipeline(&cfg).unwrap();
        let opts = RunOptions { mode: EngineMode::SingleThreaded, ..Default::default() };
        let b = run_pipeline_with(&cfg, &opts).unwrap();
        assert_eq!(first_mismatch(&a.blocks, &b.blocks), None);
        assert_eq!(a.events, b.events);
        assert_eq!(a.ledger, b.ledger);
        let oracle = serial_oracle(&cfg).unwrap();
        assert_eq!(first_mismatch(&a.blocks, &oracle), None);
        assert_eq!(a.blocks.len(), 4);
    }

    #[test]
    fn single_device_has_no_idle() {
        let cfg = PipelineConfig { devices: 1, ..small() };
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.events.iter().all(|e| !e.is_idle()));
        assert_eq!(first_mismatch(&out.blocks, &serial_oracle(&cfg).unwrap()), None);
    }

    #[test]
    fn surplus_flag_trims_first_block() {
        let cfg = PipelineConfig { emit_first_block_surplus: false, ..small() };
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.blocks[0].frames.shape()[0], cfg.num_b);
        assert_eq!(out.blocks[0].noise_ids.len(), cfg.num_b);
        let full = run_pipeline(&small()).unwrap();
        let f = full.blocks[0].frames.shape()[0];
        assert_eq!(out.blocks[0].frames, full.blocks[0].frames.slice_rows(2, f).unwrap());
    }

    #[test]
    fn fault_is_visible() {
        let cfg = small();
        let plan = cfg.plan();
        let fault = default_fault(&plan).unwrap();
        let opts = RunOptions { fault: Some(fault), mode: EngineMode::SingleThreaded, trace_cache: true };
        let bad = run_pipeline_with(&cfg, &opts).unwrap();
        let reference = explicit_recompute_oracle(&cfg).unwrap();
        let (seq, layer) = first_trace_mismatch(&bad.cache_trace, &reference.cache_trace).unwrap();
        assert_eq!(layer, fault.layer);
        assert!(seq > fault.seq);
        let clean = run_pipeline_with(&cfg, &RunOptions { fault: None, ..opts }).unwrap();
        assert_eq!(first_trace_mismatch(&clean.cache_trace, &reference.cache_trace), None);
    }
}
