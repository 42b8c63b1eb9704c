//! Index-addressed search loop.
//!
//! Candidate `i` is a pure function of `i`, so the outcome does not depend on
//! how evaluations are scheduled: the parallel path evaluates fixed-size
//! batches and reduces them in index order.

use std::time::{Duration, Instant};

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Score {
    pub solved: bool,
    /// Distance from the goal; 0 iff solved.
    pub error: u64,
    pub distance: Option<i64>,
}

/// A search problem whose candidates are numbered.
pub trait Problem: Sync {
    type Candidate: Send;

    fn candidate(&self, index: u64) -> Self::Candidate;

    fn evaluate(&self, candidate: &Self::Candidate) -> Result<Score, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Serial,
    /// Evaluate batches on a pool of `workers` threads. Without the
    /// `parallel` feature this runs serially.
    Parallel {
        workers: usize,
    },
}

impl Strategy {
    pub fn with_workers(workers: usize) -> Self {
        if workers <= 1 {
            Strategy::Serial
        } else {
            Strategy::Parallel { workers }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Best<C> {
    pub index: u64,
    pub distance: Option<i64>,
    pub error: u64,
    pub candidate: C,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<C> {
    pub solved: bool,
    pub solution_index: Option<u64>,
    pub candidates_tried: u64,
    /// Evaluations that failed among the candidates tried.
    pub failures: u64,
    /// Closest candidate seen; the solution when solved.
    pub best: Option<Best<C>>,
    pub elapsed: Duration,
    pub time_to_best: Option<Duration>,
}

impl<C> SearchOutcome<C> {
    pub fn solution(&self) -> Option<&C> {
        if self.solved {
            self.best.as_ref().map(|b| &b.candidate)
        } else {
            None
        }
    }

    pub fn best_distance(&self) -> Option<i64> {
        self.best.as_ref().and_then(|b| b.distance)
    }

    /// Candidates generated up to and including the best one.
    pub fn candidates_to_best(&self) -> Option<u64> {
        self.best.as_ref().map(|b| b.index + 1)
    }
}

struct Reducer {
    start: Instant,
    best: Option<(u64, Score)>,
    time_to_best: Option<Duration>,
    failures: u64,
    tried: u64,
}

impl Reducer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            best: None,
            time_to_best: None,
            failures: 0,
            tried: 0,
        }
    }

    /// Fold in the result of candidate `index`; true once solved.
    fn push(&mut self, index: u64, result: Result<Score, String>) -> bool {
        self.tried = index + 1;
        match result {
            Ok(score) => {
                if self.best.is_none_or(|(_, b)| score.error < b.error) {
                    self.best = Some((index, score));
                    self.time_to_best = Some(self.start.elapsed());
                }
                score.solved
            }
            Err(message) => {
                self.failures += 1;
                log::debug!("candidate {index} failed: {message}");
                false
            }
        }
    }

    fn finish<P: Problem>(self, problem: &P) -> SearchOutcome<P::Candidate> {
        let solved = self.best.is_some_and(|(_, s)| s.solved);
        SearchOutcome {
            solved,
            solution_index: self.best.filter(|(_, s)| s.solved).map(|(i, _)| i),
            candidates_tried: self.tried,
            failures: self.failures,
            best: self.best.map(|(index, score)| Best {
                index,
                distance: score.distance,
                error: score.error,
                candidate: problem.candidate(index),
            }),
            elapsed: self.start.elapsed(),
            time_to_best: self.time_to_best,
        }
    }
}

/// Evaluate candidates `0..budget` until one is solved.
pub fn run<P: Problem>(
    problem: &P,
    budget: u64,
    strategy: Strategy,
) -> SearchOutcome<P::Candidate> {
    match strategy {
        Strategy::Serial => run_serial(problem, budget),
        #[cfg(feature = "parallel")]
        Strategy::Parallel { workers } => run_parallel(problem, budget, workers),
        #[cfg(not(feature = "parallel"))]
        Strategy::Parallel { .. } => run_serial(problem, budget),
    }
}

fn run_serial<P: Problem>(problem: &P, budget: u64) -> SearchOutcome<P::Candidate> {
    let mut r = Reducer::new();
    for index in 0..budget {
        let result = problem.evaluate(&problem.candidate(index));
        if r.push(index, result) {
            break;
        }
    }
    r.finish(problem)
}

#[cfg(feature = "parallel")]
fn run_parallel<P: Problem>(
    problem: &P,
    budget: u64,
    workers: usize,
) -> SearchOutcome<P::Candidate> {
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("building the worker pool");
    let batch = (workers as u64 * 32).max(64);
    let first_solved = AtomicU64::new(u64::MAX);
    let mut r = Reducer::new();
    pool.install(|| {
        let mut start = 0;
        while start < budget {
            let end = (start + batch).min(budget);
            let results: Vec<Option<Result<Score, String>>> = (start..end)
                .into_par_iter()
                .map(|index| {
                    // Nothing past an already solved index is ever reduced.
                    if index > first_solved.load(Ordering::Relaxed) {
                        return None;
                    }
                    let result = problem.evaluate(&problem.candidate(index));
                    if matches!(result, Ok(Score { solved: true, .. })) {
                        first_solved.fetch_min(index, Ordering::Relaxed);
                    }
                    Some(result)
                })
                .collect();
            for (index, result) in (start..end).zip(results) {
                let result = result.expect("indices before the first solution are evaluated");
                if r.push(index, result) {
                    return;
                }
            }
            start = end;
        }
    });
    r.finish(problem)
}
