//! Coordinator and device state machines, and the two drivers that connect
//! them: one thread per device over ordered channels, or a single-threaded
//! round-robin interleaving. Both feed every worker the same message
//! sequence, so their outputs agree bitwise.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::sync::mpsc;
use std::thread;

use super::ledger::TransferLedger;
use super::plan::Plan;
use super::schedule::{Phase, ScheduleEvent};
use super::{CacheFault, CacheTraceEntry, EmittedBlock, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::{CaptureSpec, CaptureTag, LayerKVCache, ModelChunk};
use crate::noise::{InitFrames, NoiseInitializer, NoisePool};
use crate::scheduler::scheduler_step;
use crate::tensor::Tensor;

/// Payload travelling along the chain for one pass.
#[derive(Debug, Clone)]
pub struct StageMessage {
    pub seq: usize,
    pub round: usize,
    pub block_id: u64,
    pub level: usize,
    pub phase: Phase,
    pub frame_levels: Vec<usize>,
    /// Centre frames within the explicit frames.
    pub center: Range<usize>,
    /// Frames whose K/V the device keeps for the next block.
    pub capture: Option<Range<usize>>,
    pub cached_from: Option<u64>,
    /// Latents on entry, hidden rows between devices, centre noise
    /// prediction on exit.
    pub tokens: Tensor,
    /// Earliest slot at which the receiver may start.
    pub ready_slot: u64,
}

/// Owns block latents, releases passes in plan order once their inputs exist,
/// and applies the scheduler update to returned predictions.
pub struct Coordinator<'p> {
    plan: &'p Plan,
    cfg: PipelineConfig,
    init: NoiseInitializer,
    states: BTreeMap<u64, Vec<Tensor>>,
    noise_ids: BTreeMap<u64, Vec<usize>>,
    available: BTreeMap<(u64, usize), u64>,
    initialized_rounds: usize,
    next: usize,
    committed: usize,
    emitted: Vec<EmittedBlock>,
    ledger: TransferLedger,
}

pub(crate) fn new_initializer(cfg: &PipelineConfig) -> Result<NoiseInitializer> {
    let pool = NoisePool::new(cfg.num_b, cfg.num_c, cfg.frame_shape(), cfg.seeds.noise)?;
    Ok(NoiseInitializer::new(cfg.strategy, pool, cfg.seeds.noise))
}

/// Emitted form of block `block_id`, dropping the first block's surplus
/// frames when asked to.
pub(crate) fn emit(cfg: &PipelineConfig, block_id: u64, frames: Tensor, noise_ids: Vec<usize>) -> Result<EmittedBlock> {
    let half = cfg.num_c / 2;
    if block_id == 1 && !cfg.emit_first_block_surplus && half > 0 {
        let f = frames.shape()[0];
        let ids = noise_ids.get(half.min(noise_ids.len())..).unwrap_or_default().to_vec();
        return Ok(EmittedBlock { block_id, frames: frames.slice_rows(half, f)?, noise_ids: ids });
    }
    Ok(EmittedBlock { block_id, frames, noise_ids })
}

impl<'p> Coordinator<'p> {
    pub fn new(plan: &'p Plan, cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            plan,
            cfg: cfg.clone(),
            init: new_initializer(cfg)?,
            states: BTreeMap::new(),
            noise_ids: BTreeMap::new(),
            available: BTreeMap::new(),
            initialized_rounds: 0,
            next: 0,
            committed: 0,
            emitted: Vec::new(),
            ledger: TransferLedger::new(plan.devices, plan.total_rounds(), plan.passes.len()),
        })
    }

    pub fn is_done(&self) -> bool {
        self.committed == self.plan.passes.len()
    }

    pub fn in_flight(&self) -> usize {
        self.next - self.committed
    }

    fn ensure_round(&mut self, round: usize) -> Result<()> {
        while self.initialized_rounds <= round {
            if let Some(b) = self.plan.rounds[self.initialized_rounds].appended {
                let InitFrames { frames, noise_ids } = if b == 1 {
                    self.init.first_block()?
                } else {
                    let prev = self.noise_ids.get(&(b - 1)).ok_or(Error::Lookup(b - 1))?;
                    let k = (self.cfg.num_c / 2).min(prev.len());
                    let tail = prev[prev.len() - k..].to_vec();
                    self.init.next_block(&tail)?
                };
                self.states.insert(b, vec![frames]);
                self.noise_ids.insert(b, noise_ids);
                self.available.insert((b, 0), 0);
            }
            self.initialized_rounds += 1;
        }
        Ok(())
    }

    /// Next pass in plan order, or `None` if its inputs are not back yet or
    /// every pass has been released.
    pub fn try_release(&mut self) -> Result<Option<StageMessage>> {
        let Some(pass) = self.plan.passes.get(self.next) else {
            return Ok(None);
        };
        self.ensure_round(pass.round)?;
        let mut ready = 0;
        let mut parts = Vec::with_capacity(3);
        for src in pass.sources() {
            match self.available.get(&(src.block_id, src.state)) {
                Some(&slot) => ready = ready.max(slot),
                None => return Ok(None),
            }
            let latent = &self.states[&src.block_id][src.state];
            parts.push(latent.slice_rows(src.frames.start, src.frames.end)?);
        }
        let frames = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        let rows = frames.shape()[0] * self.cfg.model.tokens_per_frame();
        let tokens = frames.reshape(vec![rows, self.cfg.model.channels])?;
        self.ledger.record(0, pass.round, pass.seq, tokens.len() as u64)?;
        let center = pass.center_range();
        let half = self.cfg.num_c / 2;
        let capture = (self.cfg.cache_enabled && half > 0).then(|| center.start..center.start + half);
        self.next += 1;
        Ok(Some(StageMessage {
            seq: pass.seq,
            round: pass.round,
            block_id: pass.block_id,
            level: pass.level,
            phase: pass.phase,
            frame_levels: pass.frame_levels(),
            center,
            capture,
            cached_from: pass.cached_from,
            tokens,
            ready_slot: ready,
        }))
    }

    /// Applies a returned prediction. Results must arrive in release order.
    pub fn commit(&mut self, msg: StageMessage) -> Result<()> {
        let pass = self
            .plan
            .passes
            .get(self.committed)
            .ok_or_else(|| Error::Scheduling(format!("unexpected result for pass {}", msg.seq)))?;
        if pass.seq != msg.seq || pass.block_id != msg.block_id {
            return Err(Error::Scheduling(format!(
                "result for pass {} arrived while {} was expected",
                msg.seq, pass.seq
            )));
        }
        let b = pass.block_id;
        let states = self.states.get_mut(&b).ok_or(Error::Lookup(b))?;
        if states.len() != pass.center.state + 1 {
            return Err(Error::Invariant(format!("block {b} state {} committed out of order", pass.center.state)));
        }
        let x_t = &states[pass.center.state];
        let eps = msg.tokens.reshape(x_t.shape().to_vec())?;
        let x_next = scheduler_step(x_t, &eps, pass.level, self.cfg.model.steps)?;
        states.push(x_next);
        let state = states.len() - 1;
        self.available.insert((b, state), msg.ready_slot);
        self.committed += 1;
        if state == self.cfg.model.steps {
            let frames = states[state].clone();
            let ids = self.noise_ids.get(&b).cloned().unwrap_or_default();
            self.emitted.push(emit(&self.cfg, b, frames, ids)?);
        }
        Ok(())
    }

    pub fn finish(self) -> (Vec<EmittedBlock>, TransferLedger) {
        (self.emitted, self.ledger)
    }
}

/// One simulated device: a model chunk, its feature cache and its clock.
pub struct DeviceWorker {
    chunk: ModelChunk,
    devices: usize,
    cache: Option<LayerKVCache>,
    next_free: u64,
    events: Vec<ScheduleEvent>,
    ledger: TransferLedger,
    fault: Option<CacheFault>,
    trace: Option<Vec<CacheTraceEntry>>,
}

impl DeviceWorker {
    pub fn new(chunk: ModelChunk, plan: &Plan, fault: Option<CacheFault>, trace: bool) -> Self {
        Self {
            chunk,
            devices: plan.devices,
            cache: None,
            next_free: 0,
            events: Vec::new(),
            ledger: TransferLedger::new(plan.devices, plan.total_rounds(), plan.passes.len()),
            fault,
            trace: trace.then(Vec::new),
        }
    }

    pub fn index(&self) -> usize {
        self.chunk.index
    }

    pub fn handle(&mut self, mut msg: StageMessage) -> Result<StageMessage> {
        let slot = msg.ready_slot.max(self.next_free);
        self.next_free = slot + 1;
        self.events.push(ScheduleEvent::busy(slot, self.chunk.index, msg.block_id, msg.level, msg.phase));

        let later = match msg.cached_from {
            Some(id) => match &self.cache {
                Some(c) if c.tag.block_id == id && c.tag.round == msg.round => Some(c),
                other => {
                    return Err(Error::Cache(format!(
                        "device {} needs block {id} from round {} but holds {:?}",
                        self.chunk.index,
                        msg.round,
                        other.as_ref().map(|c| c.tag)
                    )))
                }
            },
            None => None,
        };
        if let (Some(trace), Some(c)) = (self.trace.as_mut(), later) {
            trace.push(CacheTraceEntry { seq: msg.seq, source: c.tag.block_id, entries: c.entries.clone() });
        }
        let spec = msg.capture.clone().map(|frames| CaptureSpec {
            tag: CaptureTag { block_id: msg.block_id, round: msg.round, level: msg.level },
            frames,
        });
        let out = self.chunk.forward(&msg.tokens, &msg.frame_levels, later, spec.as_ref())?;
        if let Some(mut captured) = out.captured {
            if let Some(f) = self.fault.filter(|f| f.seq == msg.seq) {
                captured.perturb_one_ulp(f.layer);
            }
            self.cache = Some(captured);
        }
        msg.tokens = if self.chunk.is_last() {
            let cells = self.chunk.cfg.tokens_per_frame();
            out.tokens.slice_rows(msg.center.start * cells, msg.center.end * cells)?
        } else {
            out.tokens
        };
        self.ledger.record(self.chunk.index + 1, msg.round, msg.seq, msg.tokens.len() as u64)?;
        msg.ready_slot = slot + 1;
        Ok(msg)
    }

    pub fn into_parts(self) -> WorkerParts {
        WorkerParts {
            device: self.chunk.index,
            events: self.events,
            ledger: self.ledger,
            trace: self.trace.unwrap_or_default(),
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }
}

pub struct WorkerParts {
    pub device: usize,
    pub events: Vec<ScheduleEvent>,
    pub ledger: TransferLedger,
    pub trace: Vec<CacheTraceEntry>,
}

fn stalled(coord: &Coordinator<'_>) -> Error {
    Error::Scheduling(format!(
        "no pass can be released and none is in flight ({} of {} committed)",
        coord.committed,
        coord.plan.passes.len()
    ))
}

/// All workers in one thread, stepped round-robin.
pub fn run_single_threaded(coord: &mut Coordinator<'_>, workers: &mut [DeviceWorker]) -> Result<()> {
    let n = workers.len();
    let mut links: Vec<VecDeque<StageMessage>> = (0..=n).map(|_| VecDeque::new()).collect();
    while !coord.is_done() {
        let mut progress = false;
        if let Some(msg) = coord.try_release()? {
            links[0].push_back(msg);
            progress = true;
        }
        for (j, w) in workers.iter_mut().enumerate() {
            if let Some(msg) = links[j].pop_front() {
                let out = w.handle(msg)?;
                links[j + 1].push_back(out);
                progress = true;
            }
        }
        while let Some(msg) = links[n].pop_front() {
            coord.commit(msg)?;
            progress = true;
        }
        if !progress {
            return Err(stalled(coord));
        }
    }
    Ok(())
}

type Link = Result<StageMessage>;

/// One thread per worker; the coordinator runs on the calling thread.
pub fn run_threaded(coord: &mut Coordinator<'_>, workers: Vec<DeviceWorker>) -> Result<Vec<DeviceWorker>> {
    thread::scope(|scope| {
        let (to_first, mut upstream) = mpsc::channel::<Link>();
        let mut handles = Vec::with_capacity(workers.len());
        for mut w in workers {
            let (tx, rx) = mpsc::channel::<Link>();
            let inbox = std::mem::replace(&mut upstream, rx);
            handles.push(scope.spawn(move || {
                for msg in inbox {
                    let out = msg.and_then(|m| w.handle(m));
                    if tx.send(out).is_err() {
                        break;
                    }
                }
                w
            }));
        }
        let results = upstream;

        let driven = (|| -> Result<()> {
            while !coord.is_done() {
                if let Some(msg) = coord.try_release()? {
                    to_first.send(Ok(msg)).map_err(|_| Error::Scheduling("device 0 hung up".into()))?;
                    continue;
                }
                if coord.in_flight() == 0 {
                    return Err(stalled(coord));
                }
                let msg = results.recv().map_err(|_| Error::Scheduling("result channel closed".into()))??;
                coord.commit(msg)?;
            }
            Ok(())
        })();
        drop(to_first);
        // Drain so workers blocked on a full pipeline can exit.
        let drained: Vec<Link> = results.iter().collect();
        let workers = handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Scheduling("device worker panicked".into())))
            .collect::<Result<Vec<_>>>()?;
        driven?;
        if let Some(extra) = drained.into_iter().next() {
            extra?;
            return Err(Error::Scheduling("result arrived after the run finished".into()));
        }
        Ok(workers)
    })
}
