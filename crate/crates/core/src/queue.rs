//! FIFO queue of frame blocks at staggered noise levels.
//!
//! Blocks are stored head→tail with levels strictly increasing by one toward
//! the tail. A round denoises every block once; [`QueueState::advance`] then
//! pops the clean head and appends a fresh block at level `T`.
//!
//! Each block also keeps a context snapshot: its latent as of the start of the
//! previous round (its initial noise in the round it was appended). Neighbours
//! concatenate that snapshot rather than the live latent, so a pass never reads
//! a neighbour update from the same or the immediately preceding pipeline
//! wave.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProcessingOrder {
    /// Tail (noisiest) first.
    #[default]
    Reverse,
    /// Head (cleanest) first.
    Sequential,
}

impl fmt::Display for ProcessingOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProcessingOrder::Reverse => "reverse",
            ProcessingOrder::Sequential => "sequential",
        })
    }
}

impl FromStr for ProcessingOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(ProcessingOrder::Reverse),
            "sequential" => Ok(ProcessingOrder::Sequential),
            other => Err(Error::config(format!("unknown processing order `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueueParams {
    pub num_b: usize,
    pub num_c: usize,
    pub steps: usize,
    pub block_num: usize,
    pub retain_head_context: bool,
}

impl QueueParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_b == 0 || self.steps == 0 || self.block_num == 0 {
            return Err(Error::config("Num_B, T and Block_num must be at least 1"));
        }
        if !self.num_c.is_multiple_of(2) {
            return Err(Error::config(format!("Num_C must be even, got {}", self.num_c)));
        }
        if self.num_c / 2 > self.num_b {
            return Err(Error::config(format!("Num_C/2 = {} exceeds Num_B = {}", self.num_c / 2, self.num_b)));
        }
        Ok(())
    }

    pub fn half_context(&self) -> usize {
        self.num_c / 2
    }

    /// Frames in block `block_id` (1-based); the first carries `Num_C/2` extra.
    pub fn frames_in(&self, block_id: u64) -> usize {
        if block_id == 1 {
            self.num_b + self.half_context()
        } else {
            self.num_b
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub block_id: u64,
    /// `[f, H, W, C]`.
    pub frames: Tensor,
    pub level: usize,
    pub noise_ids: Vec<usize>,
    /// Latent offered to neighbours as explicit context this round.
    pub context_frames: Tensor,
    pub context_level: usize,
    pending: bool,
}

impl LatentBlock {
    /// A freshly initialized block at level `steps`.
    pub fn new(block_id: u64, frames: Tensor, steps: usize, noise_ids: Vec<usize>) -> Self {
        Self {
            block_id,
            context_frames: frames.clone(),
            frames,
            level: steps,
            noise_ids,
            context_level: steps,
            pending: true,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn awaiting_pass(&self) -> bool {
        self.pending
    }
}

/// Explicit context frames and the level they were captured at.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFrames {
    pub source: u64,
    pub frames: Tensor,
    pub level: usize,
}

impl ContextFrames {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// `B_i'`: the centre block plus whatever context travels with it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedBlock {
    pub center_id: u64,
    pub center_level: usize,
    pub center_frames: Tensor,
    /// Nearest `Num_C/2` frames of the video-earlier neighbour (or retained
    /// frames of the last popped block).
    pub explicit_context: Option<ContextFrames>,
    /// Nearest `Num_C/2` frames of the video-later neighbour, only when the
    /// feature cache is off.
    pub later_context: Option<ContextFrames>,
    /// Block whose cached K/V stands in for the video-later neighbour.
    pub cached_context_id: Option<u64>,
}

impl ExtendedBlock {
    /// Explicit frames in video order: earlier context, centre, later context.
    pub fn explicit_frames(&self) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(3);
        if let Some(c) = &self.explicit_context {
            parts.push(&c.frames);
        }
        parts.push(&self.center_frames);
        if let Some(c) = &self.later_context {
            parts.push(&c.frames);
        }
        Tensor::concat_rows(&parts)
    }

    pub fn frame_levels(&self) -> Vec<usize> {
        let mut levels = Vec::new();
        if let Some(c) = &self.explicit_context {
            levels.extend(std::iter::repeat_n(c.level, c.frame_count()));
        }
        levels.extend(std::iter::repeat_n(self.center_level, self.center_frames.shape()[0]));
        if let Some(c) = &self.later_context {
            levels.extend(std::iter::repeat_n(c.level, c.frame_count()));
        }
        levels
    }

    /// Frame index range of the centre block within the explicit frames.
    pub fn center_range(&self) -> std::ops::Range<usize> {
        let start = self.explicit_context.as_ref().map_or(0, |c| c.frame_count());
        start..start + self.center_frames.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    pub params: QueueParams,
    blocks: VecDeque<LatentBlock>,
    appended_count: usize,
    retained: Option<ContextFrames>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub state: QueueState,
    pub popped: Option<LatentBlock>,
}

impl QueueState {
    pub fn new(params: QueueParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, blocks: VecDeque::new(), appended_count: 0, retained: None })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &LatentBlock> {
        self.blocks.iter()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn appended_count(&self) -> usize {
        self.appended_count
    }

    pub fn appends_exhausted(&self) -> bool {
        self.appended_count >= self.params.block_num
    }

    pub fn levels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.level).collect()
    }

    pub fn tail(&self) -> Option<&LatentBlock> {
        self.blocks.back()
    }

    pub fn retained_context(&self) -> Option<&ContextFrames> {
        self.retained.as_ref()
    }

    /// Last `Num_C/2` noise ids of the tail block: the window a new block must
    /// avoid.
    pub fn tail_window(&self) -> Option<&[usize]> {
        let tail = self.tail()?;
        let k = self.params.half_context().min(tail.noise_ids.len());
        Some(&tail.noise_ids[tail.noise_ids.len() - k..])
    }

    pub fn get(&self, block_id: u64) -> Result<&LatentBlock> {
        self.position(block_id).map(|i| &self.blocks[i])
    }

    fn position(&self, block_id: u64) -> Result<usize> {
        self.blocks.iter().position(|b| b.block_id == block_id).ok_or(Error::Lookup(block_id))
    }

    /// Pops a level-0 head (keeping its tail frames as context for the next
    /// head) and appends `new_block` at level `T`.
    pub fn advance(&self, new_block: Option<LatentBlock>) -> Result<Advance> {
        if let Some(b) = self.blocks.iter().find(|b| b.pending) {
            return Err(Error::Invariant(format!("block {} has not completed its pass this round", b.block_id)));
        }
        let mut next = self.clone();
        let popped = match next.blocks.front() {
            Some(head) if head.level == 0 => next.blocks.pop_front(),
            _ => None,
        };
        if let Some(p) = &popped {
            next.retained = if self.params.retain_head_context && self.params.half_context() > 0 {
                let n = p.frame_count();
                Some(ContextFrames {
                    source: p.block_id,
                    frames: p.context_frames.slice_rows(n - self.params.half_context(), n)?,
                    level: p.context_level,
                })
            } else {
                None
            };
        }
        if let Some(mut b) = new_block {
            if next.appends_exhausted() {
                return Err(Error::AppendExhausted(self.params.block_num));
            }
            let expected_id = next.appended_count as u64 + 1;
            if b.block_id != expected_id {
                return Err(Error::Invariant(format!(
                    "appending block {} but the next id is {expected_id}",
                    b.block_id
                )));
            }
            if b.level != self.params.steps {
                return Err(Error::Invariant(format!(
                    "new block enters at level {}, expected {}",
                    b.level, self.params.steps
                )));
            }
            let want = self.params.frames_in(b.block_id);
            if b.frame_count() != want {
                return Err(Error::Invariant(format!(
                    "block {} has {} frames, expected {want}",
                    b.block_id,
                    b.frame_count()
                )));
            }
            b.pending = true;
            next.blocks.push_back(b);
            next.appended_count += 1;
        }
        for b in next.blocks.iter_mut() {
            b.pending = true;
        }
        next.check_ladder()?;
        Ok(Advance { state: next, popped })
    }

    fn check_ladder(&self) -> Result<()> {
        let ok = self
            .blocks
            .iter()
            .zip(self.blocks.iter().skip(1))
            .all(|(a, b)| b.level == a.level + 1 && b.block_id == a.block_id + 1);
        if !ok || self.blocks.len() > self.params.steps {
            return Err(Error::Invariant(format!("queue levels {:?} break the unit ladder", self.levels())));
        }
        Ok(())
    }

    /// Records the result of a block's pass: its previous latent becomes the
    /// context snapshot and the level drops by one.
    pub fn commit_pass(&mut self, block_id: u64, frames: Tensor) -> Result<()> {
        let i = self.position(block_id)?;
        let b = &mut self.blocks[i];
        if !b.pending {
            return Err(Error::Invariant(format!("block {block_id} already passed this round")));
        }
        if b.level == 0 {
            return Err(Error::Invariant(format!("block {block_id} is already clean")));
        }
        if frames.shape() != b.frames.shape() {
            return Err(Error::dim(format!("block {block_id} update {:?} vs {:?}", frames.shape(), b.frames.shape())));
        }
        b.context_frames = std::mem::replace(&mut b.frames, frames);
        b.context_level = b.level;
        b.level -= 1;
        b.pending = false;
        Ok(())
    }

    pub fn processing_order(&self, order: ProcessingOrder) -> Vec<u64> {
        let ids = self.blocks.iter().map(|b| b.block_id);
        match order {
            ProcessingOrder::Reverse => ids.rev().collect(),
            ProcessingOrder::Sequential => ids.collect(),
        }
    }

    /// Builds `B_i'` for `block_id` under the given order.
    pub fn assemble_extended(
        &self,
        block_id: u64,
        order: ProcessingOrder,
        cache_enabled: bool,
    ) -> Result<ExtendedBlock> {
        let i = self.position(block_id)?;
        let center = &self.blocks[i];
        let half = self.params.half_context();

        let explicit_context = if half == 0 {
            None
        } else if i > 0 {
            let prev = &self.blocks[i - 1];
            let n = prev.frame_count();
            Some(ContextFrames {
                source: prev.block_id,
                frames: prev.context_frames.slice_rows(n - half, n)?,
                level: prev.context_level,
            })
        } else {
            self.retained.clone()
        };

        let later = self.blocks.get(i + 1);
        let (later_context, cached_context_id) = match later {
            Some(next) if half > 0 && cache_enabled => {
                let earlier_in_round = order == ProcessingOrder::Reverse;
                (None, earlier_in_round.then_some(next.block_id))
            }
            Some(next) if half > 0 => (
                Some(ContextFrames {
                    source: next.block_id,
                    frames: next.context_frames.slice_rows(0, half)?,
                    level: next.context_level,
                }),
                None,
            ),
            _ => (None, None),
        };

        Ok(ExtendedBlock {
            center_id: block_id,
            center_level: center.level,
            center_frames: center.frames.clone(),
            explicit_context,
            later_context,
            cached_context_id,
        })
    }

    /// Debug view: `(block_id, level, noise_ids)` head→tail.
    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSnapshot { block_id: b.block_id, level: b.level, noise_ids: b.noise_ids.clone() })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSnapshot {
    pub block_id: u64,
    pub level: usize,
    pub noise_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueSnapshot {
    pub blocks: Vec<BlockSnapshot>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(steps: usize, block_num: usize) -> QueueParams {
        QueueParams { num_b: 2, num_c: 4, steps, block_num, retain_head_context: true }
    }

    fn block(p: &QueueParams, id: u64) -> LatentBlock {
        let f = p.frames_in(id);
        let data = (0..f * 3).map(|v| (id * 100 + v as u64) as f64).collect();
        let frames = Tensor::new(vec![f, 1, 1, 3], data).unwrap();
        LatentBlock::new(id, frames, p.steps, (0..f).collect())
    }

    fn pass_all(q: &mut QueueState) {
        let ids: Vec<u64> = q.blocks().map(|b| b.block_id).collect();
        for id in ids {
            let f = q.get(id).unwrap().frames.map(|v| v - 1.0);
            q.commit_pass(id, f).unwrap();
        }
    }

    #[test]
    fn warm_up_first_step() {
        let p = params(3, 5);
        let q = QueueState::new(p).unwrap();
        let a = q.advance(Some(block(&p, 1))).unwrap();
        assert_eq!(a.state.levels(), vec![3]);
        assert!(a.popped.is_none());
    }

    #[test]
    fn steady_state_cycle() {
        let p = params(3, 10);
        let mut q = QueueState::new(p).unwrap();
        for id in 1..=3 {
            q = q.advance(Some(block(&p, id))).unwrap().state;
            pass_all(&mut q);
        }
        assert_eq!(q.levels(), vec![0, 1, 2]);
        let a = q.advance(Some(block(&p, 4))).unwrap();
        assert_eq!(a.popped.unwrap().block_id, 1);
        assert_eq!(a.state.levels(), vec![1, 2, 3]);
    }

    #[test]
    fn cool_down_without_append() {
        let p = params(3, 2);
        let mut q = QueueState::new(p).unwrap();
        for id in 1..=2 {
            q = q.advance(Some(block(&p, id))).unwrap().state;
            pass_all(&mut q);
        }
        q = q.advance(None).unwrap().state;
        pass_all(&mut q);
        assert_eq!(q.levels(), vec![0, 1]);
        let a = q.advance(None).unwrap();
        assert_eq!(a.popped.unwrap().block_id, 1);
        assert_eq!(a.state.levels(), vec![1]);
        assert!(matches!(a.state.advance(Some(block(&p, 3))), Err(Error::Invariant(_))));
    }

    #[test]
    fn append_exhausted() {
        let p = params(3, 1);
        let mut q = QueueState::new(p).unwrap().advance(Some(block(&p, 1))).unwrap().state;
        pass_all(&mut q);
        assert!(matches!(q.advance(Some(block(&p, 2))), Err(Error::AppendExhausted(1))));
    }

    #[test]
    fn advance_requires_completed_passes() {
        let p = params(3, 4);
        let q = QueueState::new(p).unwrap().advance(Some(block(&p, 1))).unwrap().state;
        assert!(matches!(q.advance(Some(block(&p, 2))), Err(Error::Invariant(_))));
    }

    #[test]
    fn processing_orders() {
        let p = params(3, 10);
        let mut q = QueueState::new(p).unwrap();
        for id in 1..=3 {
            q = q.advance(Some(block(&p, id))).unwrap().state;
            pass_all(&mut q);
        }
        let q = q.advance(Some(block(&p, 4))).unwrap().state;
        assert_eq!(q.levels(), vec![1, 2, 3]);
        assert_eq!(q.processing_order(ProcessingOrder::Reverse), vec![4, 3, 2]);
        assert_eq!(q.processing_order(ProcessingOrder::Sequential), vec![2, 3, 4]);

        let single = QueueState::new(p).unwrap().advance(Some(block(&p, 1))).unwrap().state;
        assert_eq!(single.processing_order(ProcessingOrder::Reverse), vec![1]);
        assert_eq!(single.processing_order(ProcessingOrder::Sequential), vec![1]);
    }

    #[test]
    fn extended_block_boundaries() {
        let p = params(4, 10);
        let mut q = QueueState::new(p).unwrap();
        let first = q.advance(Some(block(&p, 1))).unwrap().state;
        let e = first.assemble_extended(1, ProcessingOrder::Reverse, true).unwrap();
        assert!(e.explicit_context.is_none() && e.cached_context_id.is_none());
        assert_eq!(e.center_frames.shape()[0], 4);

        for id in 1..=3 {
            q = q.advance(Some(block(&p, id))).unwrap().state;
            pass_all(&mut q);
        }
        let q = q.advance(Some(block(&p, 4))).unwrap().state;
        let tail = q.assemble_extended(4, ProcessingOrder::Reverse, true).unwrap();
        assert_eq!(tail.cached_context_id, None);
        let mid = q.assemble_extended(3, ProcessingOrder::Reverse, true).unwrap();
        assert_eq!(mid.cached_context_id, Some(4));
        let ctx = mid.explicit_context.as_ref().unwrap();
        assert_eq!(ctx.source, 2);
        assert_eq!(ctx.frame_count(), 2);
        // block 2's snapshot from one round earlier, its last two frames
        let b2 = q.get(2).unwrap();
        assert_eq!(ctx.frames, b2.context_frames.slice_rows(0, 2).unwrap());
        assert_eq!(ctx.level, b2.level + 1);
        assert_eq!(mid.center_range(), 2..4);
        assert_eq!(mid.frame_levels(), vec![b2.level + 1, b2.level + 1, 3, 3]);

        let seq = q.assemble_extended(3, ProcessingOrder::Sequential, true).unwrap();
        assert_eq!(seq.cached_context_id, None);

        let nocache = q.assemble_extended(3, ProcessingOrder::Reverse, false).unwrap();
        assert_eq!(nocache.cached_context_id, None);
        assert_eq!(nocache.later_context.as_ref().unwrap().source, 4);
        assert_eq!(nocache.explicit_frames().unwrap().shape()[0], 6);

        assert!(matches!(q.assemble_extended(99, ProcessingOrder::Reverse, true), Err(Error::Lookup(99))));
    }

    #[test]
    fn popped_block_leaves_context_for_new_head() {
        let p = params(2, 5);
        let mut q = QueueState::new(p).unwrap();
        for id in 1..=2 {
            q = q.advance(Some(block(&p, id))).unwrap().state;
            pass_all(&mut q);
        }
        let a = q.advance(Some(block(&p, 3))).unwrap();
        let popped = a.popped.unwrap();
        let head = a.state.assemble_extended(2, ProcessingOrder::Reverse, true).unwrap();
        let ctx = head.explicit_context.unwrap();
        assert_eq!(ctx.source, 1);
        assert_eq!(ctx.level, 1);
        assert_eq!(ctx.frames, popped.context_frames.slice_rows(2, 4).unwrap());

        let off = QueueParams { retain_head_context: false, ..p };
        let mut q = QueueState::new(off).unwrap();
        for id in 1..=2 {
            q = q.advance(Some(block(&off, id))).unwrap().state;
            pass_all(&mut q);
        }
        let a = q.advance(Some(block(&off, 3))).unwrap();
        assert!(a.state.assemble_extended(2, ProcessingOrder::Reverse, true).unwrap().explicit_context.is_none());
    }

    #[test]
    fn params_validation() {
        assert!(QueueParams { num_c: 3, ..params(3, 3) }.validate().is_err());
        assert!(QueueParams { num_c: 6, ..params(3, 3) }.validate().is_err());
        assert!(QueueParams { block_num: 0, ..params(3, 3) }.validate().is_err());
    }
}
