//! Fragment database: named directive lists with cached interaction summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::AllocatorConfig;
use crate::driver::{Directive, DriverProgram, ExecError, Machine, ParseErrors};
use crate::harness::sha256_hex;

pub const INDEX_FILE: &str = "index.json";

/// Allocator interactions triggered by one fragment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InteractionSummary {
    /// Requested size to number of allocations of that size.
    pub sizes: BTreeMap<u64, u64>,
    pub frees_triggered: bool,
    /// Allocations besides those of the primary size.
    pub noise_count: u64,
}

impl InteractionSummary {
    pub fn total_allocations(&self) -> u64 {
        self.sizes.values().sum()
    }

    /// The most frequently allocated size; ties go to the larger size.
    pub fn primary_size(&self) -> Option<u64> {
        self.sizes
            .iter()
            .max_by_key(|&(&size, &count)| (count, size))
            .map(|(&size, _)| size)
    }

    /// Allocations other than those of `size`.
    pub fn noise_for(&self, size: u64) -> u64 {
        self.total_allocations() - self.sizes.get(&size).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub name: String,
    pub program: DriverProgram,
    pub summary: InteractionSummary,
}

impl Fragment {
    pub fn new(
        name: impl Into<String>,
        program: DriverProgram,
        config: &AllocatorConfig,
    ) -> Result<Self, FragmentError> {
        let name = name.into();
        if !program.probes().is_empty()
            || program
                .directives()
                .iter()
                .any(|d| matches!(d, Directive::Fst { .. } | Directive::Snd { .. }))
        {
            return Err(FragmentError::Markers(name));
        }
        let summary =
            summarize_fragment(&program, config).map_err(|source| FragmentError::Exec {
                name: name.clone(),
                source,
            })?;
        Ok(Self {
            name,
            program,
            summary,
        })
    }

    pub fn parse(
        name: impl Into<String>,
        text: &str,
        config: &AllocatorConfig,
    ) -> Result<Self, FragmentError> {
        let name = name.into();
        let program = DriverProgram::parse_trace(text).map_err(|source| FragmentError::Parse {
            name: name.clone(),
            source,
        })?;
        Self::new(name, program, config)
    }

    /// Ids still allocated after the fragment runs, in definition order.
    pub fn surviving_ids(&self) -> Vec<&str> {
        let mut live: Vec<&str> = Vec::new();
        for d in self.program.directives() {
            match d {
                Directive::Free { id } => live.retain(|l| l != id),
                Directive::Realloc { old_id, id, .. } => {
                    live.retain(|l| l != old_id);
                    live.push(id);
                }
                _ => {
                    if let Some(id) = d.defines() {
                        live.push(id);
                    }
                }
            }
        }
        live
    }
}

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("fragment {name}:\n{source}")]
    Parse { name: String, source: ParseErrors },
    #[error("fragment {name}: {source}")]
    Exec { name: String, source: ExecError },
    #[error("fragment {0} must not contain fst/snd markers or probes")]
    Markers(String),
    #[error("fragment index {path}: {source}")]
    Index {
        path: String,
        source: serde_json::Error,
    },
}

/// Execute `program` on a fresh arena and tally what it asked for.
pub fn summarize_fragment(
    program: &DriverProgram,
    config: &AllocatorConfig,
) -> Result<InteractionSummary, ExecError> {
    Machine::new(config).run(program)?;
    let mut s = InteractionSummary::default();
    for d in program.directives() {
        let size = match *d {
            Directive::Malloc { size, .. } | Directive::Realloc { size, .. } => size,
            Directive::Calloc { nmemb, size, .. } => nmemb * size,
            _ => 0,
        };
        if d.allocates() {
            *s.sizes.entry(size).or_default() += 1;
        }
        if matches!(d, Directive::Free { .. } | Directive::Realloc { .. }) {
            s.frees_triggered = true;
        }
    }
    s.noise_count = s.primary_size().map_or(0, |p| s.noise_for(p));
    Ok(s)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    sha256: String,
    summary: InteractionSummary,
}

/// An immutable fragment collection, sorted by name.
#[derive(Debug, Clone, Default)]
pub struct FragmentDb {
    fragments: Vec<Fragment>,
}

impl FragmentDb {
    pub fn new(mut fragments: Vec<Fragment>) -> Self {
        fragments.sort_by(|a, b| a.name.cmp(&b.name));
        Self { fragments }
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Load every regular file of `dir` except the index. Summaries whose
    /// content hash matches the index are reused; the index is rewritten
    /// when anything changed.
    pub fn load_dir(dir: &Path, config: &AllocatorConfig) -> Result<Self, FragmentError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| FragmentError::Io { path, source }
        };
        let index_path = dir.join(INDEX_FILE);
        let cached: BTreeMap<String, IndexEntry> = match fs::read_to_string(&index_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|source| FragmentError::Index {
                path: index_path.display().to_string(),
                source,
            })?,
            Err(_) => BTreeMap::new(),
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != INDEX_FILE))
            .collect();
        paths.sort();
        let mut index = BTreeMap::new();
        let mut fragments = Vec::with_capacity(paths.len());
        for path in paths {
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let sha256 = sha256_hex(text.as_bytes());
            let fragment = match cached.get(&name) {
                Some(entry) if entry.sha256 == sha256 => {
                    let program = DriverProgram::parse_trace(&text).map_err(|source| {
                        FragmentError::Parse {
                            name: name.clone(),
                            source,
                        }
                    })?;
                    Fragment {
                        name: name.clone(),
                        program,
                        summary: entry.summary.clone(),
                    }
                }
                _ => Fragment::parse(name.clone(), &text, config)?,
            };
            index.insert(
                name,
                IndexEntry {
                    sha256,
                    summary: fragment.summary.clone(),
                },
            );
            fragments.push(fragment);
        }
        if index != cached {
            let text = serde_json::to_string_pretty(&index).expect("index serializes");
            fs::write(&index_path, text + "\n").map_err(io(&index_path))?;
        }
        Ok(Self::new(fragments))
    }

    /// Every size some fragment allocates, ascending.
    pub fn sizes(&self) -> Vec<u64> {
        let mut sizes: Vec<u64> = self
            .fragments
            .iter()
            .flat_map(|f| f.summary.sizes.keys().copied())
            .collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    /// Fragments allocating `size`, with their noise relative to it.
    pub fn providers(&self, size: u64) -> Vec<(usize, u64)> {
        self.fragments
            .iter()
            .enumerate()
            .filter(|(_, f)| f.summary.sizes.contains_key(&size))
            .map(|(i, f)| (i, f.summary.noise_for(size)))
            .collect()
    }
}
