//! Synthetic benchmark grid: experiment specs, execution and aggregation.

mod aggregate;
mod states;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, to_csv, AggregateRow, CSV_HEADER};
pub use states::{
    resolve as resolve_state, synthesize, StartingState, StateError, StateStats, SynthSpec,
    SYNTHETIC,
};

use crate::alloc::AllocatorConfig;
use crate::driver::ExecError;
use crate::search::{
    classify_relationship, construct_candidate, search, Direction, Executor, InteractionSequence,
    Order, Relationship, SearchParams, SequenceKind, SequencePool, SimExecutor, Strategy,
    DEFAULT_ALLOC_RATIO, DEFAULT_BUDGET, DEFAULT_MAX_LEN,
};

pub const PAPER_SIZES: [u64; 6] = [8, 64, 512, 4096, 16384, 65536];
pub const PAPER_NOISES: [usize; 3] = [0, 1, 4];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentSpec {
    pub profile: String,
    pub state: String,
    pub src_size: u64,
    pub dst_size: u64,
    pub direction: Direction,
    pub order: Order,
    pub noise: usize,
}

impl ExperimentSpec {
    pub fn relationship(&self) -> Relationship {
        classify_relationship(self.order, self.direction)
    }

    /// Sizes of the first and second allocated buffers.
    pub fn first_second(&self) -> (u64, u64) {
        match self.order {
            Order::SrcFirst => (self.src_size, self.dst_size),
            Order::DstFirst => (self.dst_size, self.src_size),
        }
    }

    /// Stable identifier used for checkpointing.
    pub fn key(&self) -> String {
        format!(
            "{}/{}/n{}/{}-{}/{}/{}",
            self.profile,
            self.state,
            self.noise,
            self.src_size,
            self.dst_size,
            match self.direction {
                Direction::Overflow => "overflow",
                Direction::Underflow => "underflow",
            },
            match self.order {
                Order::SrcFirst => "src-first",
                Order::DstFirst => "dst-first",
            }
        )
    }
}

/// Every ordered size pair `(x, y)`, with `x` the first-allocated source,
/// in both corruption directions: `2 * sizes^2` specs per combination.
pub fn generate_grid(
    sizes: &[u64],
    noises: &[usize],
    profiles: &[String],
    states: &[String],
) -> Vec<ExperimentSpec> {
    let mut out = Vec::with_capacity(
        sizes.len() * sizes.len() * 2 * noises.len() * profiles.len() * states.len(),
    );
    for profile in profiles {
        for state in states {
            for &noise in noises {
                for &x in sizes {
                    for &y in sizes {
                        for direction in [Direction::Overflow, Direction::Underflow] {
                            out.push(ExperimentSpec {
                                profile: profile.clone(),
                                state: state.clone(),
                                src_size: x,
                                dst_size: y,
                                direction,
                                order: Order::SrcFirst,
                                noise,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Required `addr_fst - addr_snd` for adjacency of the two buffers.
pub fn target_distance(spec: &ExperimentSpec, config: &AllocatorConfig) -> i64 {
    let (first, second) = spec.first_second();
    match spec.relationship() {
        // The first buffer must sit directly below the second.
        Relationship::Natural => -(config.footprint(first) as i64),
        Relationship::Reversed => config.footprint(second) as i64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentParams {
    pub budget: u64,
    pub max_len: u64,
    pub alloc_ratio: u8,
    pub seed: u64,
    /// Size of noise allocations; the source size when absent.
    pub noise_size: Option<u64>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            max_len: DEFAULT_MAX_LEN,
            alloc_ratio: DEFAULT_ALLOC_RATIO,
            seed: 0,
            noise_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub relationship: Relationship,
    pub seed: u64,
    pub target_distance: i64,
    pub solved: bool,
    pub candidates_tried: u64,
    pub candidates_to_best: Option<u64>,
    /// Wall-clock milliseconds; not reproducible.
    pub time_to_best_ms: Option<u64>,
    pub final_distance: Option<i64>,
    pub initial_distance: Option<i64>,
    pub failures: u64,
    /// Noise allocations in the fst and snd sequences combined.
    pub marker_noise: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<String>,
}

impl ExperimentResult {
    /// The record with its timing field cleared, for reproducibility checks.
    pub fn reproducible(&self) -> Self {
        Self {
            time_to_best_ms: None,
            ..self.clone()
        }
    }
}

/// An allocator profile and starting state, with the state pre-executed.
pub struct ExperimentContext {
    pub state: StartingState,
    pub executor: SimExecutor,
}

impl ExperimentContext {
    pub fn new(config: AllocatorConfig, state: StartingState) -> Result<Self, ExecError> {
        let executor = SimExecutor::new(config, Arc::clone(&state.prefix))?;
        Ok(Self { state, executor })
    }

    pub fn config(&self) -> &AllocatorConfig {
        self.executor.config()
    }

    /// Pool offering one alloc and one free sequence per buffer size.
    pub fn pool(&self, spec: &ExperimentSpec, params: &ExperimentParams) -> SequencePool {
        let (first, second) = spec.first_second();
        let noise_size = params.noise_size.unwrap_or(spec.src_size);
        SequencePool::new(
            Arc::clone(&self.state.prefix),
            &[spec.src_size, spec.dst_size],
            InteractionSequence::marker(SequenceKind::Fst, first, spec.noise, noise_size),
            InteractionSequence::marker(SequenceKind::Snd, second, spec.noise, noise_size),
        )
        .expect("buffer sizes are nonzero")
    }

    pub fn run(
        &self,
        spec: &ExperimentSpec,
        params: &ExperimentParams,
        strategy: Strategy,
        keep_solution: bool,
    ) -> ExperimentResult {
        let pool = self.pool(spec, params);
        let target = target_distance(spec, self.config());
        let search_params = SearchParams {
            budget: params.budget,
            target_distance: target,
            max_len: params.max_len,
            alloc_ratio: params.alloc_ratio,
            seed: params.seed,
        };
        // Starting state, fst sequence and snd sequence with nothing between.
        let baseline = construct_candidate(
            &pool,
            &SearchParams {
                max_len: 1,
                ..search_params
            },
            0,
        );
        let initial_distance = self.executor.distance(&baseline).ok();
        let outcome = search(&pool, &search_params, &self.executor, strategy);
        ExperimentResult {
            spec: spec.clone(),
            relationship: spec.relationship(),
            seed: params.seed,
            target_distance: target,
            solved: outcome.solved,
            candidates_tried: outcome.candidates_tried,
            candidates_to_best: outcome.candidates_to_best(),
            time_to_best_ms: outcome.time_to_best.map(|d: Duration| d.as_millis() as u64),
            final_distance: outcome.best_distance(),
            initial_distance,
            failures: outcome.failures,
            marker_noise: pool.fst.noise_count + pool.snd.noise_count,
            solution: if keep_solution {
                outcome.solution().map(|c| c.to_program().serialize())
            } else {
                None
            },
        }
    }
}
