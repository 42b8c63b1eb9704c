//! Pseudo-random black-box search for a target distance.
//!
//! A candidate is the starting state, then `len` interaction sequences with
//! the fst sequence at a random slot, then the snd sequence. Each non-fst
//! slot is an alloc sequence with probability `alloc_ratio` percent and a
//! free sequence otherwise.

pub mod engine;
mod pool;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use engine::{Best, Problem, Score, SearchOutcome, Strategy};
pub use pool::{
    construct_candidate, construct_with, free_fallback, CandOp, Candidate, FreeChoice,
    InteractionSequence, LiveSet, PoolError, SequenceKind, SequencePool, Step,
};

use crate::alloc::{AllocatorConfig, ArenaState};
use crate::driver::{execute, run_external, signed_distance, DriverProgram, ExecError, Machine};

pub const DEFAULT_BUDGET: u64 = 50_000;
pub const DEFAULT_MAX_LEN: u64 = 1000;
pub const DEFAULT_ALLOC_RATIO: u8 = 98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SearchParams {
    /// Maximum number of candidates (`g`).
    pub budget: u64,
    /// Required `addr_fst - addr_snd` (`d`).
    pub target_distance: i64,
    /// Maximum sequences per candidate (`m`).
    pub max_len: u64,
    /// Percent chance that a slot allocates (`r`).
    pub alloc_ratio: u8,
    pub seed: u64,
}

impl SearchParams {
    pub fn new(target_distance: i64, seed: u64) -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            target_distance,
            max_len: DEFAULT_MAX_LEN,
            alloc_ratio: DEFAULT_ALLOC_RATIO,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.budget < 1 {
            return Err("budget must be at least 1".into());
        }
        if self.max_len < 1 {
            return Err("max length must be at least 1".into());
        }
        if self.alloc_ratio > 100 {
            return Err("alloc ratio is a percentage".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    SrcFirst,
    DstFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Overflow,
    Underflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relationship {
    Natural,
    Reversed,
}

/// Natural when the first allocation sits where a front-splitting allocator
/// puts it by default: below the second.
pub fn classify_relationship(order: Order, direction: Direction) -> Relationship {
    match (order, direction) {
        (Order::SrcFirst, Direction::Overflow) | (Order::DstFirst, Direction::Underflow) => {
            Relationship::Natural
        }
        _ => Relationship::Reversed,
    }
}

/// Maps a candidate to its signed distance.
pub trait Executor: Sync {
    fn distance(&self, candidate: &Candidate) -> Result<i64, String>;
}

/// In-process executor; the starting state is executed once and cloned
/// for each candidate.
pub struct SimExecutor {
    config: AllocatorConfig,
    prefix: Arc<DriverProgram>,
    base: ArenaState,
}

impl SimExecutor {
    pub fn new(config: AllocatorConfig, prefix: Arc<DriverProgram>) -> Result<Self, ExecError> {
        let mut machine = Machine::new(&config);
        machine.run(&prefix)?;
        let base = machine.into_state();
        Ok(Self {
            config,
            prefix,
            base,
        })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    /// Arena after the starting state.
    pub fn base_state(&self) -> &ArenaState {
        &self.base
    }

    fn run_ops(&self, ops: &[CandOp], slots: u32) -> Result<i64, String> {
        let config = &self.config;
        let mut state = self.base.clone();
        let mut addrs = vec![0u64; slots as usize];
        let (mut fst, mut snd) = (None, None);
        for (i, op) in ops.iter().enumerate() {
            let r = match *op {
                CandOp::Malloc { size, slot } => {
                    state.alloc(config, size).map(|a| addrs[slot as usize] = a)
                }
                CandOp::Free { slot } => state.dealloc(config, addrs[slot as usize]),
                CandOp::Fst { size } => state.alloc(config, size).map(|a| fst = Some(a)),
                CandOp::Snd { size } => state.alloc(config, size).map(|a| snd = Some(a)),
            };
            r.map_err(|e| format!("operation {i}: {e}"))?;
        }
        match (fst, snd) {
            (Some(f), Some(s)) => Ok(signed_distance(f, s)),
            _ => Err("fst or snd missing".into()),
        }
    }
}

impl Executor for SimExecutor {
    fn distance(&self, candidate: &Candidate) -> Result<i64, String> {
        if Arc::ptr_eq(&candidate.prefix, &self.prefix) {
            return self.run_ops(&candidate.ops, candidate.slots);
        }
        let execution =
            execute(&candidate.to_program(), &self.config).map_err(|e| e.to_string())?;
        execution
            .result
            .distance
            .ok_or_else(|| "fst or snd missing".into())
    }
}

/// Runs every candidate through an external driver executable.
pub struct ExternalExecutor {
    pub path: PathBuf,
    pub timeout: Duration,
}

impl Executor for ExternalExecutor {
    fn distance(&self, candidate: &Candidate) -> Result<i64, String> {
        let out = run_external(&self.path, &candidate.to_program(), self.timeout)
            .map_err(|e| e.to_string())?;
        out.distance
            .ok_or_else(|| "driver reported no distance".into())
    }
}

struct HlmProblem<'a, E> {
    pool: &'a SequencePool,
    params: &'a SearchParams,
    executor: &'a E,
}

impl<E: Executor> Problem for HlmProblem<'_, E> {
    type Candidate = Candidate;

    fn candidate(&self, index: u64) -> Candidate {
        construct_candidate(self.pool, self.params, index)
    }

    fn evaluate(&self, candidate: &Candidate) -> Result<Score, String> {
        let distance = self.executor.distance(candidate)?;
        let error = distance.abs_diff(self.params.target_distance);
        Ok(Score {
            solved: error == 0,
            error,
            distance: Some(distance),
        })
    }
}

/// Search for a candidate whose distance equals `params.target_distance`.
pub fn search<E: Executor>(
    pool: &SequencePool,
    params: &SearchParams,
    executor: &E,
    strategy: Strategy,
) -> SearchOutcome<Candidate> {
    engine::run(
        &HlmProblem {
            pool,
            params,
            executor,
        },
        params.budget,
        strategy,
    )
}

#[cfg(test)]
mod tests;
