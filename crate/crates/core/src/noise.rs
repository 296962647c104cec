//! Noise initialization for newly appended blocks.
//!
//! The coordinated strategy keeps a pool of `M = Num_B + Num_C/2` Gaussian
//! frames. The first block takes the whole pool in a shuffled order; every
//! later block takes a shuffle of the pool minus the ids sitting in the last
//! `Num_C/2` frames of the current tail block, so no id appears twice inside a
//! concatenation window while the pool is still used in full.
//!
//! Four baselines exist for comparison runs: `complete-shuffle` (a),
//! `subset` (b), `fresh` (c) and `repeat` (d).

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

const POOL_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const FRESH_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    #[default]
    Coordinated,
    CompleteShuffle,
    Subset,
    Fresh,
    Repeat,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 5] = [
        InitStrategy::Coordinated,
        InitStrategy::CompleteShuffle,
        InitStrategy::Subset,
        InitStrategy::Fresh,
        InitStrategy::Repeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Coordinated => "coordinated",
            InitStrategy::CompleteShuffle => "complete-shuffle",
            InitStrategy::Subset => "subset",
            InitStrategy::Fresh => "fresh",
            InitStrategy::Repeat => "repeat",
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown noise strategy `{s}`")))
    }
}

/// Latent frame geometry `H × W × C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_shape(&self, frames: usize) -> Vec<usize> {
        vec![frames, self.height, self.width, self.channels]
    }
}

/// Immutable pool of `M` noise frames with stable ids `0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePool {
    num_b: usize,
    num_c: usize,
    shape: FrameShape,
    entries: Vec<Tensor>,
}

impl NoisePool {
    pub fn new(num_b: usize, num_c: usize, shape: FrameShape, seed: u64) -> Result<Self> {
        if num_b == 0 {
            return Err(Error::config("Num_B must be at least 1"));
        }
        if !num_c.is_multiple_of(2) {
            return Err(Error::config(format!("Num_C must be even, got {num_c}")));
        }
        if num_c / 2 > num_b {
            return Err(Error::config(format!("Num_C/2 = {} exceeds Num_B = {num_b}", num_c / 2)));
        }
        let m = num_b + num_c / 2;
        let mut rng = RandomSource::derive(seed, &[POOL_STREAM]);
        let entries: Vec<Tensor> =
            (0..m).map(|_| Tensor::new(shape.block_shape(1), rng.normals(shape.len())).expect("pool entry")).collect();
        for i in 0..m {
            for j in i + 1..m {
                if entries[i].bit_eq(&entries[j]) {
                    return Err(Error::Invariant(format!("pool entries {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { num_b, num_c, shape, entries })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn num_b(&self) -> usize {
        self.num_b
    }

    pub fn half_context(&self) -> usize {
        self.num_c / 2
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn entry(&self, id: usize) -> Option<&Tensor> {
        self.entries.get(id)
    }

    /// Stacks the given entries into a `[f, H, W, C]` block.
    pub fn frames(&self, ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.shape.len());
        for &id in ids {
            let e = self
                .entries
                .get(id)
                .ok_or_else(|| Error::Invariant(format!("noise id {id} outside pool of {}", self.size())))?;
            data.extend_from_slice(e.data());
        }
        Tensor::new(self.shape.block_shape(ids.len()), data)
    }
}

/// Frames for a new block and the pool ids they came from (empty for `fresh`).
#[derive(Debug, Clone, PartialEq)]
pub struct InitFrames {
    pub frames: Tensor,
    pub noise_ids: Vec<usize>,
}

/// First block: the whole pool in a seeded random order.
pub fn init_first_block(pool: &NoisePool, rng: &mut RandomSource) -> Result<InitFrames> {
    let mut ids: Vec<usize> = (0..pool.size()).collect();
    rng.shuffle(&mut ids);
    Ok(InitFrames { frames: pool.frames(&ids)?, noise_ids: ids })
}

/// Later block: a shuffle of every pool id not among `tail_ids`.
pub fn init_next_block(pool: &NoisePool, tail_ids: &[usize], rng: &mut RandomSource) -> Result<InitFrames> {
    let excluded = check_tail_window(pool, tail_ids)?;
    let mut ids: Vec<usize> = (0..pool.size()).filter(|i| !excluded.contains(i)).collect();
    rng.shuffle(&mut ids);
    Ok(InitFrames { frames: pool.frames(&ids)?, noise_ids: ids })
}

fn check_tail_window(pool: &NoisePool, tail_ids: &[usize]) -> Result<BTreeSet<usize>> {
    if tail_ids.len() != pool.half_context() {
        return Err(Error::Invariant(format!(
            "tail window holds {} ids, expected Num_C/2 = {}",
            tail_ids.len(),
            pool.half_context()
        )));
    }
    let set: BTreeSet<usize> = tail_ids.iter().copied().collect();
    if set.len() != tail_ids.len() {
        return Err(Error::Invariant(format!("tail ids {tail_ids:?} repeat")));
    }
    if let Some(bad) = set.iter().find(|&&i| i >= pool.size()) {
        return Err(Error::Invariant(format!("tail id {bad} outside pool of {}", pool.size())));
    }
    Ok(set)
}

/// Stateful per-run initializer; owns the RNG streams for one strategy.
#[derive(Debug, Clone)]
pub struct NoiseInitializer {
    strategy: InitStrategy,
    pool: NoisePool,
    order: RandomSource,
    fresh: RandomSource,
    shuffle_stream: VecDeque<usize>,
}

impl NoiseInitializer {
    pub fn new(strategy: InitStrategy, pool: NoisePool, seed: u64) -> Self {
        Self {
            strategy,
            pool,
            order: RandomSource::derive(seed, &[ORDER_STREAM]),
            fresh: RandomSource::derive(seed, &[FRESH_STREAM]),
            shuffle_stream: VecDeque::new(),
        }
    }

    pub fn strategy(&self) -> InitStrategy {
        self.strategy
    }

    pub fn pool(&self) -> &NoisePool {
        &self.pool
    }

    /// `Num_B + Num_C/2` frames for the first block of the video.
    pub fn first_block(&mut self) -> Result<InitFrames> {
        let m = self.pool.size();
        match self.strategy {
            InitStrategy::Coordinated | InitStrategy::Subset => init_first_block(&self.pool, &mut self.order),
            _ => self.baseline(m),
        }
    }

    /// `Num_B` frames for a block appended behind a tail whose last `Num_C/2`
    /// noise ids are `tail_ids`.
    pub fn next_block(&mut self, tail_ids: &[usize]) -> Result<InitFrames> {
        match self.strategy {
            InitStrategy::Coordinated => init_next_block(&self.pool, tail_ids, &mut self.order),
            _ => self.baseline(self.pool.num_b()),
        }
    }

    fn baseline(&mut self, count: usize) -> Result<InitFrames> {
        let m = self.pool.size();
        let ids: Vec<usize> = match self.strategy {
            InitStrategy::Coordinated => unreachable!("coordinated is not a baseline"),
            InitStrategy::CompleteShuffle => {
                while self.shuffle_stream.len() < count {
                    let mut perm: Vec<usize> = (0..m).collect();
                    self.order.shuffle(&mut perm);
                    self.shuffle_stream.extend(perm);
                }
                self.shuffle_stream.drain(..count).collect()
            }
            InitStrategy::Subset => {
                let mut all: Vec<usize> = (0..m).collect();
                self.order.shuffle(&mut all);
                all.truncate(count);
                all
            }
            InitStrategy::Repeat => (m - count..m).collect(),
            InitStrategy::Fresh => {
                let shape = self.pool.shape();
                let frames = Tensor::new(shape.block_shape(count), self.fresh.normals(count * shape.len()))?;
                return Ok(InitFrames { frames, noise_ids: Vec::new() });
            }
        };
        Ok(InitFrames { frames: self.pool.frames(&ids)?, noise_ids: ids })
    }
}

/// Number of ids shared between a tail window and a new block.
pub fn window_overlap(tail_ids: &[usize], new_ids: &[usize]) -> usize {
    let tail: BTreeSet<_> = tail_ids.iter().collect();
    new_ids.iter().filter(|i| tail.contains(i)).count()
}

/// Window statistics over a run of appends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowAudit {
    pub strategy: InitStrategy,
    pub appends: usize,
    /// Appends whose ids meet the previous block's last `Num_C/2` ids.
    pub appends_with_overlap: usize,
    pub overlapping_ids: usize,
    /// Appends where new ids plus the excluded window miss part of the pool.
    pub coverage_gaps: usize,
}

/// Generates a first block and `appends` further blocks with `strategy`,
/// checking each against the window it follows.
pub fn audit_windows(strategy: InitStrategy, pool: NoisePool, seed: u64, appends: usize) -> Result<WindowAudit> {
    let m = pool.size();
    let half = pool.half_context();
    let mut init = NoiseInitializer::new(strategy, pool, seed);
    let mut prev = init.first_block()?.noise_ids;
    let mut audit = WindowAudit { strategy, appends, appends_with_overlap: 0, overlapping_ids: 0, coverage_gaps: 0 };
    for _ in 0..appends {
        let tail = prev[prev.len().saturating_sub(half)..].to_vec();
        let next = init.next_block(&tail)?.noise_ids;
        let overlap = window_overlap(&tail, &next);
        audit.overlapping_ids += overlap;
        audit.appends_with_overlap += usize::from(overlap > 0);
        let union: BTreeSet<usize> = tail.iter().chain(&next).copied().collect();
        audit.coverage_gaps += usize::from(union.len() != m);
        prev = next;
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: FrameShape = FrameShape { height: 2, width: 2, channels: 3 };

    fn pool(num_b: usize, num_c: usize) -> NoisePool {
        NoisePool::new(num_b, num_c, SHAPE, 5).unwrap()
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn first_block_uses_whole_pool() {
        let p = pool(8, 8);
        assert_eq!(p.size(), 12);
        let f = init_first_block(&p, &mut RandomSource::new(1)).unwrap();
        assert_eq!(f.frames.shape(), &[12, 2, 2, 3]);
        assert_eq!(sorted(f.noise_ids.clone()), (0..12).collect::<Vec<_>>());
        let g = init_first_block(&p, &mut RandomSource::new(1)).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn no_context_pool_is_one_block() {
        let p = pool(4, 0);
        let f = init_first_block(&p, &mut RandomSource::new(2)).unwrap();
        assert_eq!(sorted(f.noise_ids), vec![0, 1, 2, 3]);
        let n = init_next_block(&p, &[], &mut RandomSource::new(2)).unwrap();
        assert_eq!(sorted(n.noise_ids), vec![0, 1, 2, 3]);
    }

    #[test]
    fn next_block_excludes_tail_window() {
        let p = pool(8, 8);
        let n = init_next_block(&p, &[8, 9, 10, 11], &mut RandomSource::new(3)).unwrap();
        assert_eq!(n.frames.shape()[0], 8);
        assert_eq!(sorted(n.noise_ids), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn union_covers_pool_for_many_seeds() {
        let p = pool(8, 8);
        for seed in 0..200 {
            let mut r = RandomSource::new(seed);
            let mut window: Vec<usize> = (0..12).collect();
            r.shuffle(&mut window);
            window.truncate(4);
            let n = init_next_block(&p, &window, &mut r).unwrap();
            let mut all = n.noise_ids.clone();
            all.extend(&window);
            assert_eq!(sorted(all), (0..12).collect::<Vec<_>>());
            assert_eq!(window_overlap(&window, &n.noise_ids), 0);
        }
    }

    #[test]
    fn tail_window_validation() {
        let p = pool(8, 8);
        let mut r = RandomSource::new(0);
        assert!(matches!(init_next_block(&p, &[1, 1, 2, 3], &mut r), Err(Error::Invariant(_))));
        assert!(matches!(init_next_block(&p, &[1, 2, 3], &mut r), Err(Error::Invariant(_))));
        assert!(matches!(init_next_block(&p, &[1, 2, 3, 12], &mut r), Err(Error::Invariant(_))));
    }

    #[test]
    fn pool_validation() {
        assert!(NoisePool::new(4, 3, SHAPE, 0).is_err());
        assert!(NoisePool::new(2, 6, SHAPE, 0).is_err());
        assert!(NoisePool::new(0, 0, SHAPE, 0).is_err());
    }

    #[test]
    fn repeat_blocks_are_identical() {
        let mut init = NoiseInitializer::new(InitStrategy::Repeat, pool(8, 8), 1);
        let first = init.first_block().unwrap();
        let a = init.next_block(&first.noise_ids[8..]).unwrap();
        let b = init.next_block(&a.noise_ids[4..]).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frames, first.frames.slice_rows(4, 12).unwrap());
        assert!(window_overlap(&first.noise_ids[8..], &a.noise_ids) > 0);
    }

    #[test]
    fn fresh_blocks_have_no_ids_and_differ() {
        let mut init = NoiseInitializer::new(InitStrategy::Fresh, pool(4, 4), 1);
        let first = init.first_block().unwrap();
        assert_eq!(first.frames.shape()[0], 6);
        let a = init.next_block(&[]).unwrap();
        let b = init.next_block(&[]).unwrap();
        assert!(a.noise_ids.is_empty() && b.noise_ids.is_empty());
        assert_ne!(a.frames, b.frames);
    }

    #[test]
    fn subset_draws_distinct_ids_per_block() {
        let mut init = NoiseInitializer::new(InitStrategy::Subset, pool(4, 4), 9);
        init.first_block().unwrap();
        for _ in 0..20 {
            let b = init.next_block(&[]).unwrap();
            assert_eq!(b.noise_ids.len(), 4);
            assert_eq!(b.noise_ids.iter().collect::<BTreeSet<_>>().len(), 4);
        }
    }

    #[test]
    fn subset_with_full_size_is_a_permutation() {
        let mut init = NoiseInitializer::new(InitStrategy::Subset, pool(4, 0), 9);
        init.first_block().unwrap();
        let b = init.next_block(&[]).unwrap();
        assert_eq!(sorted(b.noise_ids), vec![0, 1, 2, 3]);
    }

    #[test]
    fn complete_shuffle_covers_pool_every_m_frames() {
        let mut init = NoiseInitializer::new(InitStrategy::CompleteShuffle, pool(4, 4), 3);
        let mut stream = init.first_block().unwrap().noise_ids;
        for _ in 0..6 {
            stream.extend(init.next_block(&[]).unwrap().noise_ids);
        }
        for chunk in stream.chunks(6) {
            assert_eq!(sorted(chunk.to_vec()), (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in InitStrategy::ALL {
            assert_eq!(s.name().parse::<InitStrategy>().unwrap(), s);
        }
        assert!(matches!("bogus".parse::<InitStrategy>(), Err(Error::Config(_))));
    }
}
