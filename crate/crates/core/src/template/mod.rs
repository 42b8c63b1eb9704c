//! Exploit templates: driver programs with `#X-SHRIKE` directives that mark
//! where heap manipulation goes and which allocations must end up where.
//!
//! ```text
//! #X-SHRIKE <RECORD-ALLOC 0 1>
//! <malloc 64 a>
//! #X-SHRIKE <HEAP-MANIP 64>
//! #X-SHRIKE <RECORD-ALLOC 0 2>
//! <malloc 64 b>
//! #X-SHRIKE <REQUIRE-DISTANCE 2 1 64>
//! ```

mod fragments;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use fragments::{
    summarize_fragment, Fragment, FragmentDb, FragmentError, InteractionSummary, INDEX_FILE,
};

use crate::alloc::AllocatorConfig;
use crate::driver::{execute, run_external, DriverProgram, Markers, ParseError, ParseErrors};
use crate::rng::SplitMix64;
use crate::search::{
    engine, Problem, Score, SearchOutcome, Strategy, DEFAULT_ALLOC_RATIO, DEFAULT_BUDGET,
    DEFAULT_MAX_LEN,
};

pub const SHRIKE_PREFIX: &str = "#X-SHRIKE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateNode {
    /// A template line copied unchanged, terminator included.
    Verbatim(String),
    /// Heap manipulation, restricted to the listed sizes when present.
    HeapManip(Option<Vec<u64>>),
    /// Capture the allocation `offset` allocations after this point.
    RecordAlloc { offset: u64, id: String },
    /// Require `addr(x) - addr(y) == dist`.
    RequireDistance { x: String, y: String, dist: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub nodes: Vec<TemplateNode>,
    pub source: String,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{0}")]
    Parse(ParseErrors),
    #[error("no fragment allocates size {0}")]
    NoFragment(u64),
    #[error("the fragment database is empty")]
    EmptyDb,
    #[error("instantiated program is invalid:\n{0}")]
    Instance(ParseErrors),
}

fn parse_shrike(body: &str) -> Result<TemplateNode, String> {
    let inner = body
        .strip_prefix('<')
        .and_then(|b| b.strip_suffix('>'))
        .ok_or("shrike directive must be wrapped in angle brackets")?;
    let mut tokens = inner.split_whitespace();
    let name = tokens.next().ok_or("empty shrike directive")?;
    let args: Vec<&str> = tokens.collect();
    match (name, args.as_slice()) {
        ("HEAP-MANIP", []) => Ok(TemplateNode::HeapManip(None)),
        ("HEAP-MANIP", sizes) => sizes
            .iter()
            .map(|s| match s.parse::<u64>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(format!("malformed size list: `{s}` is not a positive size")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|sizes| TemplateNode::HeapManip(Some(sizes))),
        ("RECORD-ALLOC", [offset, id]) => offset
            .parse()
            .map(|offset| TemplateNode::RecordAlloc {
                offset,
                id: id.to_string(),
            })
            .map_err(|_| format!("invalid record offset `{offset}`")),
        ("RECORD-ALLOC", _) => Err("RECORD-ALLOC takes an offset and an id".into()),
        ("REQUIRE-DISTANCE", [x, y, dist]) => dist
            .parse()
            .map(|dist| TemplateNode::RequireDistance {
                x: x.to_string(),
                y: y.to_string(),
                dist,
            })
            .map_err(|_| format!("invalid distance `{dist}`")),
        ("REQUIRE-DISTANCE", _) => Err("REQUIRE-DISTANCE takes two ids and a distance".into()),
        (other, _) => Err(format!("unknown directive `{other}`")),
    }
}

/// Parse and validate a template. Errors carry 1-based line numbers.
pub fn parse_template(text: &str) -> Result<Template, TemplateError> {
    let mut nodes = Vec::new();
    let mut errors = Vec::new();
    // The template with shrike lines lowered to probes, for validation by
    // the driver parser; one output line per input line.
    let mut skeleton = String::with_capacity(text.len());
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.trim();
        let Some(body) = line.strip_prefix(SHRIKE_PREFIX) else {
            skeleton.push_str(raw.trim_end_matches(['\r', '\n']));
            skeleton.push('\n');
            nodes.push(TemplateNode::Verbatim(raw.to_string()));
            continue;
        };
        match parse_shrike(body.trim()) {
            Ok(node) => {
                skeleton.push_str(&lowered(&node));
                nodes.push(node);
            }
            Err(message) => errors.push(ParseError {
                line: i + 1,
                message,
            }),
        }
        skeleton.push('\n');
    }
    if let Err(ParseErrors(more)) = DriverProgram::parse_with(&skeleton, Markers::Optional) {
        errors.extend(more);
    }
    if errors.is_empty()
        && !nodes
            .iter()
            .any(|n| matches!(n, TemplateNode::RequireDistance { .. }))
    {
        errors.push(ParseError {
            line: text.lines().count().max(1),
            message: "template has no REQUIRE-DISTANCE".into(),
        });
    }
    if !errors.is_empty() {
        errors.sort_by_key(|e| e.line);
        return Err(TemplateError::Parse(ParseErrors(errors)));
    }
    Ok(Template {
        nodes,
        source: text.to_string(),
    })
}

/// The probe a shrike node becomes; empty for heap manipulation.
fn lowered(node: &TemplateNode) -> String {
    match node {
        TemplateNode::RecordAlloc { offset, id } => format!("#X-RECORD {offset} {id}"),
        TemplateNode::RequireDistance { x, y, dist } => format!("#X-CHECK {x} {y} {dist}"),
        _ => String::new(),
    }
}

impl Template {
    pub fn checks(&self) -> impl Iterator<Item = (&str, &str, i64)> {
        self.nodes.iter().filter_map(|n| match n {
            TemplateNode::RequireDistance { x, y, dist } => Some((x.as_str(), y.as_str(), *dist)),
            _ => None,
        })
    }

    /// An id prefix no token of the template starts with.
    fn fresh_prefix(&self) -> String {
        let mut prefix = String::from("h");
        while self
            .source
            .split(|c: char| c.is_whitespace() || c == '<' || c == '>')
            .any(|t| t.starts_with(&prefix))
        {
            prefix.push('_');
        }
        prefix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateParams {
    pub budget: u64,
    /// Maximum fragments per HEAP-MANIP.
    pub max_len: u64,
    /// Percentage of manipulation steps that allocate.
    pub alloc_ratio: u8,
    pub seed: u64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            max_len: DEFAULT_MAX_LEN,
            alloc_ratio: DEFAULT_ALLOC_RATIO,
            seed: 0,
        }
    }
}

/// One instantiation: the generated text and its parsed program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateInstance {
    pub text: String,
    pub program: DriverProgram,
    /// Names of the inserted fragments, in order.
    pub fragments: Vec<String>,
}

struct LiveInstance {
    fragment: usize,
    ids: Vec<String>,
}

/// Fragment `fragment`'s directives with every id prefixed by `tag`.
fn renamed(fragment: &Fragment, tag: &str) -> String {
    use crate::driver::Directive::*;
    let r = |id: &str| format!("{tag}{id}");
    let mut out = String::new();
    for d in fragment.program.directives() {
        let d = match d {
            Malloc { size, id } => Malloc {
                size: *size,
                id: r(id),
            },
            Calloc { nmemb, size, id } => Calloc {
                nmemb: *nmemb,
                size: *size,
                id: r(id),
            },
            Free { id } => Free { id: r(id) },
            Realloc { old_id, size, id } => Realloc {
                old_id: r(old_id),
                size: *size,
                id: r(id),
            },
            other => other.clone(),
        };
        out.push_str(&d.to_string());
        out.push('\n');
    }
    out
}

/// Check that every size the template restricts to has a provider.
pub fn check_db(template: &Template, db: &FragmentDb) -> Result<(), TemplateError> {
    for node in &template.nodes {
        match node {
            TemplateNode::HeapManip(Some(sizes)) => {
                if let Some(&s) = sizes.iter().find(|&&s| db.providers(s).is_empty()) {
                    return Err(TemplateError::NoFragment(s));
                }
            }
            TemplateNode::HeapManip(None) if db.sizes().is_empty() => {
                return Err(TemplateError::EmptyDb)
            }
            _ => {}
        }
    }
    Ok(())
}

/// Expand every HEAP-MANIP into `1..=max_len` fragment steps and lower the
/// other shrike directives to driver probes.
///
/// An allocating step picks a size uniformly, then a fragment allocating
/// that size with weight `1 / (1 + noise)`. A freeing step picks a size
/// and frees every surviving allocation of a uniformly chosen live fragment
/// instance providing it; with none live it allocates instead.
pub fn instantiate(
    template: &Template,
    db: &FragmentDb,
    max_len: u64,
    alloc_ratio: u8,
    rng: &mut SplitMix64,
) -> Result<TemplateInstance, TemplateError> {
    check_db(template, db)?;
    let prefix = template.fresh_prefix();
    let all_sizes = db.sizes();
    let mut text = String::with_capacity(template.source.len());
    let mut names = Vec::new();
    let mut live: Vec<LiveInstance> = Vec::new();
    let mut next_tag = 0u64;
    for node in &template.nodes {
        let sizes = match node {
            TemplateNode::Verbatim(raw) => {
                text.push_str(raw);
                if !raw.ends_with('\n') {
                    text.push('\n');
                }
                continue;
            }
            TemplateNode::HeapManip(sizes) => sizes.as_deref().unwrap_or(&all_sizes),
            other => {
                text.push_str(&lowered(other));
                text.push('\n');
                continue;
            }
        };
        let n = rng.range_inclusive(1, max_len.max(1));
        for _ in 0..n {
            let allocate = rng.range_inclusive(1, 100) <= u64::from(alloc_ratio);
            let size = sizes[rng.below(sizes.len() as u64) as usize];
            if !allocate {
                let holders: Vec<usize> = live
                    .iter()
                    .enumerate()
                    .filter(|(_, inst)| {
                        db.fragments()[inst.fragment]
                            .summary
                            .sizes
                            .contains_key(&size)
                    })
                    .map(|(i, _)| i)
                    .collect();
                if !holders.is_empty() {
                    let pos = holders[rng.below(holders.len() as u64) as usize];
                    for id in live.remove(pos).ids {
                        text.push_str(&format!("<free {id}>\n"));
                    }
                    continue;
                }
            }
            let providers = db.providers(size);
            let weights: Vec<f64> = providers
                .iter()
                .map(|&(_, noise)| 1.0 / (1.0 + noise as f64))
                .collect();
            let fragment = providers[rng.weighted_index(&weights)].0;
            let f = &db.fragments()[fragment];
            let tag = format!("{prefix}{next_tag}_");
            next_tag += 1;
            text.push_str(&renamed(f, &tag));
            names.push(f.name.clone());
            let ids: Vec<String> = f
                .surviving_ids()
                .iter()
                .map(|id| format!("{tag}{id}"))
                .collect();
            if !ids.is_empty() {
                live.push(LiveInstance { fragment, ids });
            }
        }
    }
    let program =
        DriverProgram::parse_with(&text, Markers::Optional).map_err(TemplateError::Instance)?;
    Ok(TemplateInstance {
        text,
        program,
        fragments: names,
    })
}

/// Runs instantiated templates and reports `(x, y, expected, measured)`
/// for every check.
pub enum TemplateExecutor {
    Sim(AllocatorConfig),
    External { path: PathBuf, timeout: Duration },
}

type Measured = Vec<(String, String, i64, Option<i64>)>;

impl TemplateExecutor {
    pub fn measure(&self, program: &DriverProgram) -> Result<Measured, String> {
        match self {
            TemplateExecutor::Sim(config) => {
                let execution = execute(program, config).map_err(|e| e.to_string())?;
                Ok(execution
                    .checks
                    .into_iter()
                    .map(|c| (c.x, c.y, c.expected, c.measured))
                    .collect())
            }
            TemplateExecutor::External { path, timeout } => {
                let out = run_external(path, program, *timeout).map_err(|e| e.to_string())?;
                Ok(program
                    .probes()
                    .iter()
                    .filter_map(|(_, p)| match p {
                        crate::driver::Probe::Check { x, y, distance } => {
                            let measured = out
                                .checks
                                .iter()
                                .find(|(cx, cy, _)| cx == x && cy == y)
                                .map(|c| c.2);
                            Some((x.clone(), y.clone(), *distance, measured))
                        }
                        _ => None,
                    })
                    .collect())
            }
        }
    }
}

/// Sum of `|measured - expected|` over the checks; `Err` when a recorded
/// allocation never happened.
pub fn check_error(measured: &Measured) -> Result<Score, String> {
    let mut error = 0u64;
    for (x, y, expected, m) in measured {
        let m = m.ok_or_else(|| format!("check {x} {y}: a record was never captured"))?;
        error = error.saturating_add(m.abs_diff(*expected));
    }
    Ok(Score {
        solved: error == 0,
        error,
        distance: measured.first().and_then(|c| c.3),
    })
}

struct TemplateProblem<'a> {
    template: &'a Template,
    db: &'a FragmentDb,
    params: TemplateParams,
    executor: &'a TemplateExecutor,
}

impl Problem for TemplateProblem<'_> {
    type Candidate = Arc<TemplateInstance>;

    fn candidate(&self, index: u64) -> Self::Candidate {
        let mut rng = SplitMix64::for_index(self.params.seed, index);
        Arc::new(
            instantiate(
                self.template,
                self.db,
                self.params.max_len,
                self.params.alloc_ratio,
                &mut rng,
            )
            .expect("instantiation was checked before the search"),
        )
    }

    fn evaluate(&self, candidate: &Self::Candidate) -> Result<Score, String> {
        check_error(&self.executor.measure(&candidate.program)?)
    }
}

/// Search for an instantiation satisfying every REQUIRE-DISTANCE.
pub fn template_search(
    template: &Template,
    db: &FragmentDb,
    params: TemplateParams,
    executor: &TemplateExecutor,
    strategy: Strategy,
) -> Result<SearchOutcome<Arc<TemplateInstance>>, TemplateError> {
    instantiate(
        template,
        db,
        params.max_len,
        params.alloc_ratio,
        &mut SplitMix64::new(params.seed),
    )?;
    Ok(engine::run(
        &TemplateProblem {
            template,
            db,
            params,
            executor,
        },
        params.budget,
        strategy,
    ))
}
