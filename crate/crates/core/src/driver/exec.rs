use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Directive, DriverProgram, Probe};
use crate::alloc::{AllocError, AllocatorConfig, ArenaState, Block, MAPPED_BASE};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DriverResult {
    pub addr_fst: Option<u64>,
    pub addr_snd: Option<u64>,
    /// `addr_fst - addr_snd`, present when both markers executed.
    pub distance: Option<i64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub x: String,
    pub y: String,
    pub expected: i64,
    /// `addr(x) - addr(y)`, absent if either allocation was never recorded.
    pub measured: Option<i64>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.measured == Some(self.expected)
    }

    pub fn error(&self) -> Option<u64> {
        self.measured.map(|m| m.abs_diff(self.expected))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub result: DriverResult,
    pub records: Vec<(String, u64)>,
    pub checks: Vec<CheckOutcome>,
    pub snapshot: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecFailure {
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("unknown id `{0}`")]
    UnknownId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("directive {index} `{directive}`: {failure}")]
pub struct ExecError {
    /// 0-based position of the failing directive.
    pub index: usize,
    pub directive: String,
    pub failure: ExecFailure,
}

pub(crate) fn signed_distance(a: u64, b: u64) -> i64 {
    (i128::from(a) - i128::from(b)) as i64
}

/// Executes directives one at a time against an arena.
#[derive(Debug, Clone)]
pub struct Machine<'c> {
    config: &'c AllocatorConfig,
    state: ArenaState,
    ids: FxHashMap<String, u64>,
    addr_fst: Option<u64>,
    addr_snd: Option<u64>,
    pending: Vec<(u64, String)>,
    records: Vec<(String, u64)>,
    checks: Vec<(String, String, i64)>,
    index: usize,
}

impl<'c> Machine<'c> {
    pub fn new(config: &'c AllocatorConfig) -> Self {
        Self::with_state(config, ArenaState::new(config))
    }

    pub fn with_state(config: &'c AllocatorConfig, state: ArenaState) -> Self {
        Self {
            config,
            state,
            ids: FxHashMap::default(),
            addr_fst: None,
            addr_snd: None,
            pending: Vec::new(),
            records: Vec::new(),
            checks: Vec::new(),
            index: 0,
        }
    }

    pub fn state(&self) -> &ArenaState {
        &self.state
    }

    pub fn into_state(self) -> ArenaState {
        self.state
    }

    /// Address currently bound to `id`.
    pub fn address_of(&self, id: &str) -> Option<u64> {
        self.ids.get(id).copied()
    }

    pub fn probe(&mut self, probe: &Probe) {
        match probe {
            Probe::Record { skip, id } => self.pending.push((*skip, id.clone())),
            Probe::Check { x, y, distance } => self.checks.push((x.clone(), y.clone(), *distance)),
        }
    }

    fn allocated(&mut self, address: u64) {
        if self.pending.is_empty() {
            return;
        }
        let records = &mut self.records;
        self.pending.retain_mut(|(skip, id)| {
            if *skip == 0 {
                records.push((std::mem::take(id), address));
                false
            } else {
                *skip -= 1;
                true
            }
        });
    }

    pub fn step(&mut self, d: &Directive) -> Result<(), ExecError> {
        let index = self.index;
        self.index += 1;
        let fail = |failure: ExecFailure| ExecError {
            index,
            directive: d.to_string(),
            failure,
        };
        let config = self.config;
        let address = match d {
            Directive::Malloc { size, .. } | Directive::Fst { size } | Directive::Snd { size } => {
                self.state.alloc(config, *size)
            }
            Directive::Calloc { nmemb, size, .. } => self.state.calloc(config, *nmemb, *size),
            Directive::Realloc { old_id, size, .. } => {
                let old = self
                    .ids
                    .remove(old_id)
                    .ok_or_else(|| fail(ExecFailure::UnknownId(old_id.clone())))?;
                self.state.realloc(config, old, *size)
            }
            Directive::Free { id } => {
                let addr = self
                    .ids
                    .remove(id)
                    .ok_or_else(|| fail(ExecFailure::UnknownId(id.clone())))?;
                return self.state.dealloc(config, addr).map_err(|e| fail(e.into()));
            }
        }
        .map_err(|e| fail(e.into()))?;
        match d {
            Directive::Fst { .. } => self.addr_fst = Some(address),
            Directive::Snd { .. } => self.addr_snd = Some(address),
            _ => {
                let id = d.defines().expect("allocating directives define an id");
                self.ids.insert(id.to_string(), address);
            }
        }
        self.allocated(address);
        Ok(())
    }

    /// Run every directive and probe of `program` in order.
    pub fn run(&mut self, program: &DriverProgram) -> Result<(), ExecError> {
        let mut probes = program.probes().iter().peekable();
        for (i, d) in program.directives().iter().enumerate() {
            while let Some((_, p)) = probes.next_if(|(pos, _)| *pos <= i) {
                self.probe(p);
            }
            self.step(d)?;
        }
        for (_, p) in probes {
            self.probe(p);
        }
        Ok(())
    }

    pub fn result(&self) -> DriverResult {
        let distance = match (self.addr_fst, self.addr_snd) {
            (Some(f), Some(s)) => Some(signed_distance(f, s)),
            _ => None,
        };
        let failure = match (self.addr_fst, self.addr_snd) {
            (Some(f), Some(s)) if (f >= MAPPED_BASE) != (s >= MAPPED_BASE) => Some(format!(
                "cross-region result: fst in the {} region, snd in the {} region",
                region_name(f),
                region_name(s)
            )),
            _ => None,
        };
        DriverResult {
            addr_fst: self.addr_fst,
            addr_snd: self.addr_snd,
            distance,
            failure,
        }
    }

    pub fn check_outcomes(&self) -> Vec<CheckOutcome> {
        let lookup = |id: &str| self.records.iter().find(|(r, _)| r == id).map(|(_, a)| *a);
        self.checks
            .iter()
            .map(|(x, y, expected)| CheckOutcome {
                x: x.clone(),
                y: y.clone(),
                expected: *expected,
                measured: lookup(x).zip(lookup(y)).map(|(a, b)| signed_distance(a, b)),
            })
            .collect()
    }

    pub fn finish(self) -> Execution {
        Execution {
            result: self.result(),
            checks: self.check_outcomes(),
            snapshot: self.state.snapshot(),
            records: self.records,
        }
    }
}

fn region_name(address: u64) -> &'static str {
    if address >= MAPPED_BASE {
        "mapped"
    } else {
        "arena"
    }
}

/// Execute `program` on a fresh arena.
pub fn execute(program: &DriverProgram, config: &AllocatorConfig) -> Result<Execution, ExecError> {
    let mut machine = Machine::new(config);
    machine.run(program)?;
    Ok(machine.finish())
}
