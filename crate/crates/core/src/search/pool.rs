use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SearchParams;
use crate::driver::{Directive, DriverProgram};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    Alloc,
    Free,
    Fst,
    Snd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Alloc(u64),
    /// Free the live allocation chosen for this sequence.
    FreeTarget,
    Fst(u64),
    Snd(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub kind: SequenceKind,
    pub steps: Vec<Step>,
    pub primary_size: u64,
    pub noise_count: usize,
}

impl InteractionSequence {
    pub fn alloc(size: u64) -> Self {
        Self {
            kind: SequenceKind::Alloc,
            steps: vec![Step::Alloc(size)],
            primary_size: size,
            noise_count: 0,
        }
    }

    pub fn free(size: u64) -> Self {
        Self {
            kind: SequenceKind::Free,
            steps: vec![Step::FreeTarget],
            primary_size: size,
            noise_count: 0,
        }
    }

    /// An fst or snd sequence with `noise` extra allocations of
    /// `noise_size`, split as `ceil(noise / 2)` before the marker and the
    /// rest after it.
    pub fn marker(kind: SequenceKind, size: u64, noise: usize, noise_size: u64) -> Self {
        let marker = match kind {
            SequenceKind::Fst => Step::Fst(size),
            SequenceKind::Snd => Step::Snd(size),
            _ => panic!("marker sequences are fst or snd"),
        };
        let before = noise.div_ceil(2);
        let mut steps = vec![Step::Alloc(noise_size); before];
        steps.push(marker);
        steps.extend(std::iter::repeat_n(Step::Alloc(noise_size), noise - before));
        Self {
            kind,
            steps,
            primary_size: size,
            noise_count: noise,
        }
    }
}

/// Interaction sequences available to the search, plus the starting state.
#[derive(Debug, Clone)]
pub struct SequencePool {
    pub starting_state: Arc<DriverProgram>,
    pub alloc: Vec<InteractionSequence>,
    pub free: Vec<InteractionSequence>,
    pub fst: InteractionSequence,
    pub snd: InteractionSequence,
    id_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("pool offers no sizes")]
    Empty,
    #[error("size {0} has no free sequence")]
    MissingFree(u64),
    #[error("sizes must be at least 1")]
    ZeroSize,
}

impl SequencePool {
    /// One alloc and one free sequence per distinct size.
    pub fn new(
        starting_state: Arc<DriverProgram>,
        sizes: &[u64],
        fst: InteractionSequence,
        snd: InteractionSequence,
    ) -> Result<Self, PoolError> {
        let mut distinct: Vec<u64> = Vec::new();
        for &s in sizes {
            if s == 0 {
                return Err(PoolError::ZeroSize);
            }
            if !distinct.contains(&s) {
                distinct.push(s);
            }
        }
        Self::from_sequences(
            starting_state,
            distinct
                .iter()
                .map(|&s| InteractionSequence::alloc(s))
                .collect(),
            distinct
                .iter()
                .map(|&s| InteractionSequence::free(s))
                .collect(),
            fst,
            snd,
        )
    }

    pub fn from_sequences(
        starting_state: Arc<DriverProgram>,
        alloc: Vec<InteractionSequence>,
        free: Vec<InteractionSequence>,
        fst: InteractionSequence,
        snd: InteractionSequence,
    ) -> Result<Self, PoolError> {
        if alloc.is_empty() {
            return Err(PoolError::Empty);
        }
        for a in &alloc {
            if !free.iter().any(|f| f.primary_size == a.primary_size) {
                return Err(PoolError::MissingFree(a.primary_size));
            }
        }
        let id_prefix = fresh_prefix(&starting_state);
        Ok(Self {
            starting_state,
            alloc,
            free,
            fst,
            snd,
            id_prefix,
        })
    }

    pub fn id_prefix(&self) -> &str {
        &self.id_prefix
    }

    fn alloc_index_of(&self, size: u64) -> usize {
        self.alloc
            .iter()
            .position(|a| a.primary_size == size)
            .expect("every free size has an alloc sequence")
    }
}

/// `"c"` followed by enough underscores that no starting-state id begins
/// with it.
fn fresh_prefix(program: &DriverProgram) -> String {
    let mut prefix = String::from("c");
    while program
        .directives()
        .iter()
        .filter_map(Directive::defines)
        .any(|id| id.starts_with(&prefix))
    {
        prefix.push('_');
    }
    prefix
}

/// A compact candidate operation; allocations are numbered slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandOp {
    Malloc { size: u64, slot: u32 },
    Free { slot: u32 },
    Fst { size: u64 },
    Snd { size: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub prefix: Arc<DriverProgram>,
    pub ops: Vec<CandOp>,
    /// Sequence slot holding the fst sequence, in `0..len`.
    pub fst_index: usize,
    /// Sequence slots before the trailing snd sequence.
    pub len: usize,
    pub slots: u32,
    id_prefix: String,
}

impl Candidate {
    pub fn sequence_count(&self) -> usize {
        self.len + 1
    }

    pub fn to_program(&self) -> DriverProgram {
        let id = |slot: u32| format!("{}{slot}", self.id_prefix);
        let mut directives = self.prefix.directives().to_vec();
        directives.extend(self.ops.iter().map(|op| match *op {
            CandOp::Malloc { size, slot } => Directive::Malloc { size, id: id(slot) },
            CandOp::Free { slot } => Directive::Free { id: id(slot) },
            CandOp::Fst { size } => Directive::Fst { size },
            CandOp::Snd { size } => Directive::Snd { size },
        }));
        DriverProgram::from_parts_unchecked(directives, self.prefix.probes().to_vec())
    }
}

/// Allocations made by the candidate's alloc sequences that may be freed.
#[derive(Debug, Default)]
pub struct LiveSet {
    by_size: Vec<(u64, Vec<u32>)>,
}

impl LiveSet {
    pub fn push(&mut self, size: u64, slot: u32) {
        match self.by_size.iter_mut().find(|(s, _)| *s == size) {
            Some((_, v)) => v.push(slot),
            None => self.by_size.push((size, vec![slot])),
        }
    }

    pub fn count(&self, size: u64) -> usize {
        self.by_size
            .iter()
            .find(|(s, _)| *s == size)
            .map_or(0, |(_, v)| v.len())
    }

    fn take_random(&mut self, size: u64, rng: &mut SplitMix64) -> Option<u32> {
        let (_, v) = self.by_size.iter_mut().find(|(s, _)| *s == size)?;
        if v.is_empty() {
            return None;
        }
        let i = rng.below(v.len() as u64) as usize;
        Some(v.swap_remove(i))
    }
}

/// What a free slot of a candidate turns into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeChoice {
    /// Free this live slot.
    Free(u32),
    /// Nothing of the size is live; use the alloc sequence at this index.
    Alloc(usize),
}

/// Free a uniformly chosen live allocation of `size`, or redirect to the
/// alloc sequence of that size when none is live.
pub fn free_fallback(
    pool: &SequencePool,
    live: &mut LiveSet,
    size: u64,
    rng: &mut SplitMix64,
) -> FreeChoice {
    match live.take_random(size, rng) {
        Some(slot) => FreeChoice::Free(slot),
        None => FreeChoice::Alloc(pool.alloc_index_of(size)),
    }
}

struct Builder {
    ops: Vec<CandOp>,
    slots: u32,
}

impl Builder {
    fn alloc_steps(&mut self, seq: &InteractionSequence, live: &mut LiveSet) {
        let mut primary_done = false;
        for step in &seq.steps {
            match *step {
                Step::Alloc(size) => {
                    let slot = self.slots;
                    self.slots += 1;
                    self.ops.push(CandOp::Malloc { size, slot });
                    if seq.kind == SequenceKind::Alloc && size == seq.primary_size && !primary_done
                    {
                        live.push(size, slot);
                        primary_done = true;
                    }
                }
                Step::Fst(size) => self.ops.push(CandOp::Fst { size }),
                Step::Snd(size) => self.ops.push(CandOp::Snd { size }),
                Step::FreeTarget => unreachable!("free steps need a target"),
            }
        }
    }

    fn free_steps(&mut self, seq: &InteractionSequence, target: u32) {
        for step in &seq.steps {
            match *step {
                Step::FreeTarget => self.ops.push(CandOp::Free { slot: target }),
                Step::Alloc(size) => {
                    let slot = self.slots;
                    self.slots += 1;
                    self.ops.push(CandOp::Malloc { size, slot });
                }
                Step::Fst(_) | Step::Snd(_) => unreachable!("markers live in marker sequences"),
            }
        }
    }
}

/// Build candidate `index` of the stream named by `params.seed`.
pub fn construct_candidate(pool: &SequencePool, params: &SearchParams, index: u64) -> Candidate {
    let mut rng = SplitMix64::for_index(params.seed, index);
    construct_with(pool, params, &mut rng)
}

pub fn construct_with(
    pool: &SequencePool,
    params: &SearchParams,
    rng: &mut SplitMix64,
) -> Candidate {
    let len = rng.range_inclusive(1, params.max_len.max(1)) as usize;
    let fst_index = rng.below(len as u64) as usize;
    let mut b = Builder {
        ops: Vec::with_capacity(len + 2),
        slots: 0,
    };
    let mut live = LiveSet::default();
    for slot in 0..len {
        if slot == fst_index {
            b.alloc_steps(&pool.fst, &mut live);
            continue;
        }
        if rng.range_inclusive(1, 100) <= u64::from(params.alloc_ratio) {
            let seq = &pool.alloc[rng.below(pool.alloc.len() as u64) as usize];
            b.alloc_steps(seq, &mut live);
        } else {
            let seq = &pool.free[rng.below(pool.free.len() as u64) as usize];
            match free_fallback(pool, &mut live, seq.primary_size, rng) {
                FreeChoice::Free(target) => b.free_steps(seq, target),
                FreeChoice::Alloc(i) => b.alloc_steps(&pool.alloc[i], &mut live),
            }
        }
    }
    b.alloc_steps(&pool.snd, &mut live);
    Candidate {
        prefix: Arc::clone(&pool.starting_state),
        ops: b.ops,
        fst_index,
        len,
        slots: b.slots,
        id_prefix: pool.id_prefix.clone(),
    }
}
