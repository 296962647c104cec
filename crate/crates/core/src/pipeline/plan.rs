//! Structural schedule: which passes happen in which round, and which block
//! states each pass reads. Carries no tensors.

use std::ops::Range;

use serde::Serialize;

use super::schedule::Phase;
use crate::queue::{ProcessingOrder, QueueParams};

/// A block's latent after `state` completed passes (`0` is its initial noise).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateRef {
    pub block_id: u64,
    pub state: usize,
    /// Frames taken from that latent.
    pub frames: Range<usize>,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PassPlan {
    /// Global position in the release order.
    pub seq: usize,
    pub round: usize,
    pub block_id: u64,
    pub level: usize,
    pub center: StateRef,
    pub left: Option<StateRef>,
    /// Explicit later context; only when the cache is off.
    pub right: Option<StateRef>,
    pub cached_from: Option<u64>,
    pub phase: Phase,
}

impl PassPlan {
    /// Explicit frame sources in video order.
    pub fn sources(&self) -> impl Iterator<Item = &StateRef> {
        self.left.iter().chain(std::iter::once(&self.center)).chain(self.right.iter())
    }

    pub fn explicit_frames(&self) -> usize {
        self.sources().map(|s| s.frames.len()).sum()
    }

    pub fn center_range(&self) -> Range<usize> {
        let start = self.left.as_ref().map_or(0, |l| l.frames.len());
        start..start + self.center.frames.len()
    }

    pub fn frame_levels(&self) -> Vec<usize> {
        self.sources().flat_map(|s| std::iter::repeat_n(s.level, s.frames.len())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundPlan {
    pub round: usize,
    pub appended: Option<u64>,
    /// Block popped at the start of this round.
    pub popped: Option<u64>,
    /// Queue head→tail as `(block_id, level)` before the passes.
    pub queue: Vec<(u64, usize)>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plan {
    pub params: QueueParams,
    pub devices: usize,
    pub order: ProcessingOrder,
    pub cache_enabled: bool,
    pub rounds: Vec<RoundPlan>,
    pub passes: Vec<PassPlan>,
}

/// Round in which block `b` (1-based) is appended.
fn append_round(b: u64) -> usize {
    (b - 1) as usize
}

impl Plan {
    pub fn build(params: QueueParams, devices: usize, order: ProcessingOrder, cache_enabled: bool) -> Self {
        let t = params.steps;
        let blocks = params.block_num as u64;
        let half = params.half_context();
        let total_rounds = params.block_num + t - 1;
        let in_queue = |b: u64, r: usize| b >= 1 && b <= blocks && append_round(b) <= r && r < append_round(b) + t;
        let frames_in = |b: u64| params.frames_in(b);

        let mut rounds = Vec::with_capacity(total_rounds);
        let mut passes = Vec::new();
        for r in 0..total_rounds {
            let queue: Vec<(u64, usize)> =
                (1..=blocks).filter(|&b| in_queue(b, r)).map(|b| (b, t - (r - append_round(b)))).collect();
            let appended = (r < params.block_num).then_some(r as u64 + 1);
            let popped = (r >= t).then(|| (r - t + 1) as u64).filter(|&b| b <= blocks);
            let phase = if queue.len() >= devices {
                Phase::Steady
            } else if appended.is_some() {
                Phase::Warmup
            } else {
                Phase::Cooldown
            };
            let mut ids: Vec<u64> = queue.iter().map(|q| q.0).collect();
            if order == ProcessingOrder::Reverse {
                ids.reverse();
            }
            for &b in &ids {
                let state = r - append_round(b);
                let center = StateRef { block_id: b, state, frames: 0..frames_in(b), level: t - state };
                // Neighbours are read one round behind, or at their initial
                // noise when appended this round.
                let lagged = |x: u64, frames: Range<usize>| {
                    let s = r.saturating_sub(1).max(append_round(x)) - append_round(x);
                    StateRef { block_id: x, state: s, frames, level: t - s }
                };
                let left = (half > 0 && b > 1 && (in_queue(b - 1, r) || params.retain_head_context))
                    .then(|| lagged(b - 1, frames_in(b - 1) - half..frames_in(b - 1)));
                let later = half > 0 && in_queue(b + 1, r);
                let right = (later && !cache_enabled).then(|| lagged(b + 1, 0..half));
                let cached_from = (later && cache_enabled && order == ProcessingOrder::Reverse).then_some(b + 1);
                passes.push(PassPlan {
                    seq: passes.len(),
                    round: r,
                    block_id: b,
                    level: t - state,
                    center,
                    left,
                    right,
                    cached_from,
                    phase,
                });
            }
            rounds.push(RoundPlan { round: r, appended, popped, queue, phase });
        }
        Self { params, devices, order, cache_enabled, rounds, passes }
    }

    pub fn total_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Seq of the pass that turns `state` of `block_id` into `state + 1`.
    pub fn producer(&self, block_id: u64, state: usize) -> Option<usize> {
        let r = append_round(block_id) + state;
        self.passes.iter().find(|p| p.round == r && p.block_id == block_id).map(|p| p.seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(t: usize, blocks: usize) -> QueueParams {
        QueueParams { num_b: 2, num_c: 4, steps: t, block_num: blocks, retain_head_context: true }
    }

    #[test]
    fn round_count_and_pass_count() {
        let p = Plan::build(params(4, 6), 2, ProcessingOrder::Reverse, true);
        assert_eq!(p.total_rounds(), 9);
        assert_eq!(p.passes.len(), 4 * 6);
        for b in 1..=6u64 {
            assert_eq!(p.passes.iter().filter(|x| x.block_id == b).count(), 4);
        }
    }

    #[test]
    fn reverse_round_uses_cache_except_tail() {
        let p = Plan::build(params(3, 5), 2, ProcessingOrder::Reverse, true);
        let r3: Vec<_> = p.passes.iter().filter(|x| x.round == 3).collect();
        assert_eq!(r3.iter().map(|x| x.block_id).collect::<Vec<_>>(), vec![4, 3, 2]);
        assert_eq!(r3.iter().map(|x| x.cached_from).collect::<Vec<_>>(), vec![None, Some(4), Some(3)]);
        assert_eq!(p.rounds[3].popped, Some(1));
        // head block 2 reads block 1's level-1 input as retained context
        let head = r3[2];
        assert_eq!(head.left.as_ref().unwrap().block_id, 1);
        assert_eq!(head.left.as_ref().unwrap().level, 1);
        assert_eq!(head.left.as_ref().unwrap().frames, 2..4);
    }

    #[test]
    fn sequential_has_no_cache_and_cache_off_adds_right() {
        let seq = Plan::build(params(3, 5), 2, ProcessingOrder::Sequential, true);
        assert!(seq.passes.iter().all(|x| x.cached_from.is_none() && x.right.is_none()));
        let off = Plan::build(params(3, 5), 2, ProcessingOrder::Reverse, false);
        let mid = off.passes.iter().find(|x| x.round == 3 && x.block_id == 3).unwrap();
        assert_eq!(mid.right.as_ref().unwrap().block_id, 4);
        assert_eq!(mid.right.as_ref().unwrap().state, 0);
        assert_eq!(mid.explicit_frames(), 6);
        assert_eq!(mid.center_range(), 2..4);
    }

    #[test]
    fn phases() {
        let p = Plan::build(params(4, 4), 4, ProcessingOrder::Reverse, true);
        let phases: Vec<Phase> = p.rounds.iter().map(|r| r.phase).collect();
        use Phase::*;
        assert_eq!(phases, vec![Warmup, Warmup, Warmup, Steady, Cooldown, Cooldown, Cooldown]);
    }

    #[test]
    fn producer_lookup() {
        let p = Plan::build(params(3, 4), 2, ProcessingOrder::Reverse, true);
        let s = p.producer(2, 1).unwrap();
        assert_eq!((p.passes[s].round, p.passes[s].block_id), (2, 2));
        assert!(p.producer(9, 0).is_none());
    }
}
