//! Starting states: directive prefixes executed before every candidate.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::driver::{Directive, DriverProgram, ParseErrors};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateStats {
    /// Allocator calls; a realloc is one call.
    pub interactions: u64,
    /// Calls that allocate, reallocs included.
    pub allocs: u64,
    /// Calls that free, reallocs included.
    pub frees: u64,
}

impl StateStats {
    pub fn of(program: &DriverProgram) -> Self {
        let mut s = StateStats::default();
        for d in program.directives() {
            s.interactions += 1;
            match d {
                Directive::Free { .. } => s.frees += 1,
                Directive::Realloc { .. } => {
                    s.allocs += 1;
                    s.frees += 1;
                }
                _ => s.allocs += 1,
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct StartingState {
    pub name: String,
    pub prefix: Arc<DriverProgram>,
    pub stats: StateStats,
}

impl StartingState {
    pub fn new(name: impl Into<String>, prefix: DriverProgram) -> Self {
        let stats = StateStats::of(&prefix);
        Self {
            name: name.into(),
            prefix: Arc::new(prefix),
            stats,
        }
    }

    pub fn empty() -> Self {
        Self::new("empty", DriverProgram::default())
    }

    /// Load a captured trace in the directive format.
    pub fn load(path: &Path) -> Result<Self, StateError> {
        let text = std::fs::read_to_string(path).map_err(|source| StateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let prefix = DriverProgram::parse_trace(&text).map_err(|source| StateError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        if prefix
            .directives()
            .iter()
            .any(|d| matches!(d, Directive::Fst { .. } | Directive::Snd { .. }))
        {
            return Err(StateError::Markers(path.display().to_string()));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "trace".into());
        Ok(Self::new(name, prefix))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("unknown starting state `{0}`")]
    Unknown(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}:\n{source}")]
    Parse { path: String, source: ParseErrors },
    #[error("starting state {0} contains fst/snd markers")]
    Markers(String),
}

/// Parameters of a synthetic starting state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub name: &'static str,
    pub allocs: u64,
    pub frees: u64,
    pub reallocs: u64,
    pub seed: u64,
}

/// Stand-ins with the interaction counts of the captured interpreter traces.
pub const SYNTHETIC: [SynthSpec; 4] = [
    SynthSpec {
        name: "php-emalloc-synth",
        allocs: 366,
        frees: 205,
        reallocs: 0,
        seed: 0x7068_7065,
    },
    SynthSpec {
        name: "php-malloc-synth",
        allocs: 12714,
        frees: 2634,
        reallocs: 270,
        seed: 0x7068_706d,
    },
    SynthSpec {
        name: "python-malloc-synth",
        allocs: 3710,
        frees: 2450,
        reallocs: 0,
        seed: 0x7079_7468,
    },
    SynthSpec {
        name: "ruby-malloc-synth",
        allocs: 51827,
        frees: 19068,
        reallocs: 0,
        seed: 0x7275_6279,
    },
];

/// Request size buckets `(weight, lo, hi)` of the synthetic generator.
const SIZE_BUCKETS: [(f64, u64, u64); 4] = [
    (0.55, 1, 64),
    (0.30, 65, 512),
    (0.12, 513, 4096),
    (0.03, 4097, 65536),
];

fn draw_size(rng: &mut SplitMix64) -> u64 {
    let weights: Vec<f64> = SIZE_BUCKETS.iter().map(|b| b.0).collect();
    let (_, lo, hi) = SIZE_BUCKETS[rng.weighted_index(&weights)];
    rng.range_inclusive(lo, hi)
}

/// Share of frees that release the newest live allocation; startup traces
/// mostly free short-lived temporaries in stack order.
const STACK_FREE: f64 = 0.97;

/// Pick a live index to free: the newest entry with probability
/// [`STACK_FREE`], otherwise `floor(len * u^3)` entries back for uniform `u`.
fn recent_index(rng: &mut SplitMix64, len: usize) -> usize {
    if rng.next_f64() < STACK_FREE {
        return len - 1;
    }
    let u = rng.next_f64();
    let back = ((len as f64) * u.powi(3)) as usize;
    len - 1 - back.min(len - 1)
}

/// Generate a starting state with exactly the requested counts.
///
/// Each step is an alloc, free or realloc with probability proportional to
/// how many of each remain; frees and reallocs pick their target with [`recent_index`].
pub fn synthesize(spec: &SynthSpec) -> StartingState {
    assert!(spec.reallocs <= spec.allocs.min(spec.frees));
    assert!(spec.allocs >= spec.frees);
    let mut rng = SplitMix64::new(spec.seed);
    let mut plain_allocs = spec.allocs - spec.reallocs;
    let mut plain_frees = spec.frees - spec.reallocs;
    let mut reallocs = spec.reallocs;
    let mut live: Vec<String> = Vec::new();
    let mut next_id = 0u64;
    let mut fresh_id = || {
        next_id += 1;
        format!("s{}", next_id - 1)
    };
    let mut directives = Vec::with_capacity((spec.allocs + spec.frees - spec.reallocs) as usize);
    while plain_allocs + plain_frees + reallocs > 0 {
        let (a, f, r) = if live.is_empty() {
            (plain_allocs, 0, 0)
        } else {
            (plain_allocs, plain_frees, reallocs)
        };
        let pick = rng.below(a + f + r);
        if pick < a {
            plain_allocs -= 1;
            let id = fresh_id();
            directives.push(Directive::Malloc {
                size: draw_size(&mut rng),
                id: id.clone(),
            });
            live.push(id);
        } else {
            let i = recent_index(&mut rng, live.len());
            let old_id = live.remove(i);
            if pick < a + f {
                plain_frees -= 1;
                directives.push(Directive::Free { id: old_id });
            } else {
                reallocs -= 1;
                let id = fresh_id();
                directives.push(Directive::Realloc {
                    old_id,
                    size: draw_size(&mut rng),
                    id: id.clone(),
                });
                live.push(id);
            }
        }
    }
    let program =
        DriverProgram::from_parts(directives, Vec::new(), crate::driver::Markers::Optional)
            .expect("synthetic traces are well formed");
    StartingState::new(spec.name, program)
}

/// Resolve a starting state: a synthetic name, `empty`, or a trace path.
pub fn resolve(spec: &str) -> Result<StartingState, StateError> {
    if spec == "empty" {
        return Ok(StartingState::empty());
    }
    if let Some(s) = SYNTHETIC.iter().find(|s| s.name == spec) {
        return Ok(synthesize(s));
    }
    let path = Path::new(spec);
    if path.exists() {
        return StartingState::load(path);
    }
    Err(StateError::Unknown(spec.to_string()))
}
