//! Resumable grid runs: `cells.jsonl` checkpoint, `results.csv`,
//! `results.json` and `manifest.json` in one output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{sha256_hex, unix_time, VERSION};
use crate::alloc::profiles::{self, ProfileError};
use crate::alloc::AllocatorConfig;
use crate::benchgen::{
    aggregate, generate_grid, resolve_state, to_csv, ExperimentContext, ExperimentParams,
    ExperimentResult, ExperimentSpec, StateError, PAPER_NOISES, PAPER_SIZES, SYNTHETIC,
};
use crate::search::{Strategy, DEFAULT_ALLOC_RATIO, DEFAULT_BUDGET, DEFAULT_MAX_LEN};

pub const CELLS_FILE: &str = "cells.jsonl";
pub const CSV_FILE: &str = "results.csv";
pub const JSON_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Grid definition. Run `i` of every cell uses seed `seed + i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<u64>,
    #[serde(default = "default_noises")]
    pub noises: Vec<usize>,
    pub profiles: Vec<String>,
    #[serde(default = "default_states")]
    pub states: Vec<String>,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "default_max_len")]
    pub max_len: u64,
    #[serde(default = "default_alloc_ratio")]
    pub alloc_ratio: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub runs: u64,
    /// Size of each noise allocation; unset means the cell's source size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_size: Option<u64>,
    /// Store solving programs in `results.json`.
    #[serde(default)]
    pub keep_solutions: bool,
}

fn default_sizes() -> Vec<u64> {
    PAPER_SIZES.to_vec()
}
fn default_noises() -> Vec<usize> {
    PAPER_NOISES.to_vec()
}
fn default_states() -> Vec<String> {
    SYNTHETIC.iter().map(|s| s.name.to_string()).collect()
}
fn default_budget() -> u64 {
    DEFAULT_BUDGET
}
fn default_max_len() -> u64 {
    DEFAULT_MAX_LEN
}
fn default_alloc_ratio() -> u8 {
    DEFAULT_ALLOC_RATIO
}
fn one() -> u64 {
    1
}

impl GridConfig {
    pub fn new(profiles: Vec<String>) -> Self {
        serde_json::from_value(serde_json::json!({ "profiles": profiles }))
            .expect("defaults are valid")
    }

    pub fn specs(&self) -> Vec<ExperimentSpec> {
        generate_grid(&self.sizes, &self.noises, &self.profiles, &self.states)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn params(&self, seed: u64) -> ExperimentParams {
        ExperimentParams {
            budget: self.budget,
            max_len: self.max_len,
            alloc_ratio: self.alloc_ratio,
            seed,
            noise_size: self.noise_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentSeed {
    pub key: String,
    pub seed: u64,
}

/// Everything needed to reproduce a bench directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// sha256 of the grid config and every resolved allocator profile.
    pub config_hash: String,
    pub grid: GridConfig,
    pub master_seed: u64,
    pub seeds: Vec<ExperimentSeed>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("starting state {state} fails on profile {profile}: {message}")]
    Prefix {
        profile: String,
        state: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} belongs to a different configuration (hash {found}, expected {expected})")]
    Mismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("grid config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_grid(path: &Path) -> Result<GridConfig, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| BenchError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn config_hash(grid: &GridConfig, configs: &BTreeMap<String, AllocatorConfig>) -> String {
    let canonical = serde_json::to_vec(&(VERSION, grid, configs)).expect("config serializes");
    sha256_hex(&canonical)
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub results: Vec<ExperimentResult>,
    pub resumed: usize,
    pub computed: usize,
    pub out_dir: PathBuf,
}

fn cell_id(key: &str, seed: u64) -> String {
    format!("{key}#{seed}")
}

/// Read completed cells, dropping a torn final line; rewrites the file when
/// anything was dropped so later appends start on a clean line.
fn read_checkpoint(path: &Path) -> Result<Vec<ExperimentResult>, BenchError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut done = Vec::new();
    let mut dropped = false;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        match serde_json::from_str::<ExperimentResult>(&line) {
            Ok(r) => done.push(r),
            Err(_) => dropped = true,
        }
    }
    if dropped {
        let mut text = String::new();
        for r in &done {
            text.push_str(&serde_json::to_string(r).expect("result serializes"));
            text.push('\n');
        }
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(done)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), BenchError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

/// Run every (cell, seed) pair of `grid` not already in the checkpoint,
/// on `workers` threads; results reach disk through one writer.
pub fn run_bench(
    grid: &GridConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<BenchSummary, BenchError> {
    if grid.runs == 0 || grid.profiles.is_empty() || grid.states.is_empty() || grid.sizes.is_empty()
    {
        return Err(BenchError::Config(
            "profiles, states, sizes and runs must be nonempty".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut configs = BTreeMap::new();
    for p in &grid.profiles {
        configs.insert(p.clone(), profiles::load(p)?);
    }
    let hash = config_hash(grid, &configs);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let cells_path = out_dir.join(CELLS_FILE);
    let started_unix = match fs::read_to_string(&manifest_path) {
        Ok(text) => {
            let old: RunManifest =
                serde_json::from_str(&text).map_err(|source| BenchError::Json {
                    path: manifest_path.display().to_string(),
                    source,
                })?;
            if old.config_hash != hash {
                return Err(BenchError::Mismatch {
                    path: manifest_path.display().to_string(),
                    found: old.config_hash,
                    expected: hash,
                });
            }
            old.started_unix
        }
        Err(_) => unix_time(),
    };
    let specs = grid.specs();
    let seeds = grid.seeds();
    let mut manifest = RunManifest {
        tool: "heapsieve".into(),
        version: VERSION.into(),
        config_hash: hash,
        grid: grid.clone(),
        master_seed: grid.seed,
        seeds: specs
            .iter()
            .flat_map(|s| {
                let key = s.key();
                seeds.iter().map(move |&seed| ExperimentSeed {
                    key: key.clone(),
                    seed,
                })
            })
            .collect(),
        started_unix,
        finished_unix: None,
    };
    write_json(&manifest_path, &manifest)?;

    let mut done: HashMap<String, ExperimentResult> = read_checkpoint(&cells_path)?
        .into_iter()
        .map(|r| (cell_id(&r.spec.key(), r.seed), r))
        .collect();
    let resumed = done.len();
    let pending: Vec<(&ExperimentSpec, u64)> = specs
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .filter(|(s, seed)| !done.contains_key(&cell_id(&s.key(), *seed)))
        .collect();

    let mut contexts: HashMap<(String, String), ExperimentContext> = HashMap::new();
    for (spec, _) in &pending {
        let k = (spec.profile.clone(), spec.state.clone());
        if contexts.contains_key(&k) {
            continue;
        }
        let ctx =
            ExperimentContext::new(configs[&spec.profile].clone(), resolve_state(&spec.state)?)
                .map_err(|e| BenchError::Prefix {
                    profile: spec.profile.clone(),
                    state: spec.state.clone(),
                    message: e.to_string(),
                })?;
        contexts.insert(k, ctx);
    }

    let (tx, rx) = mpsc::channel::<ExperimentResult>();
    let writer = {
        let path = cells_path.clone();
        std::thread::spawn(move || -> Result<Vec<ExperimentResult>, BenchError> {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            let mut fresh = Vec::new();
            for r in rx {
                let line = serde_json::to_string(&r).expect("result serializes") + "\n";
                file.write_all(line.as_bytes()).map_err(io_err(&path))?;
                file.flush().map_err(io_err(&path))?;
                log::info!(
                    "{} seed {}: {}",
                    r.spec.key(),
                    r.seed,
                    if r.solved { "solved" } else { "unsolved" }
                );
                fresh.push(r);
            }
            Ok(fresh)
        })
    };
    let run_one = |(spec, seed): &(&ExperimentSpec, u64), tx: &mpsc::Sender<ExperimentResult>| {
        let ctx = &contexts[&(spec.profile.clone(), spec.state.clone())];
        let r = ctx.run(
            spec,
            &grid.params(*seed),
            Strategy::Serial,
            grid.keep_solutions,
        );
        // The writer only stops once every sender is gone.
        let _ = tx.send(r);
    };
    dispatch(&pending, workers, &tx, run_one);
    drop(tx);
    let fresh = writer.join().expect("writer thread panicked")?;
    let computed = fresh.len();
    for r in fresh {
        done.insert(cell_id(&r.spec.key(), r.seed), r);
    }

    let results: Vec<ExperimentResult> = specs
        .iter()
        .flat_map(|s| {
            let key = s.key();
            seeds
                .iter()
                .filter_map(|seed| done.get(&cell_id(&key, *seed)).cloned())
                .collect::<Vec<_>>()
        })
        .collect();
    let expected = grid.sizes.len() * grid.sizes.len() * 2 * grid.runs as usize;
    let rows = aggregate(&results, Some(expected));
    let csv_path = out_dir.join(CSV_FILE);
    fs::write(&csv_path, to_csv(&rows)).map_err(io_err(&csv_path))?;
    write_json(
        &out_dir.join(JSON_FILE),
        &serde_json::json!({ "rows": rows, "experiments": results }),
    )?;
    manifest.finished_unix = Some(unix_time());
    write_json(&manifest_path, &manifest)?;
    Ok(BenchSummary {
        results,
        resumed,
        computed,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(feature = "parallel")]
fn dispatch<T: Sync, S: Clone + Send + Sync>(
    items: &[T],
    workers: usize,
    sink: &S,
    f: impl Fn(&T, &S) + Sync,
) {
    use rayon::prelude::*;
    if workers <= 1 {
        items.iter().for_each(|t| f(t, sink));
        return;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| {
        items.par_iter().for_each_with(sink.clone(), |s, t| f(t, s));
    });
}

#[cfg(not(feature = "parallel"))]
fn dispatch<T: Sync, S: Clone + Send + Sync>(
    items: &[T],
    _workers: usize,
    sink: &S,
    f: impl Fn(&T, &S) + Sync,
) {
    items.iter().for_each(|t| f(t, sink));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GridConfig {
        GridConfig {
            sizes: vec![8, 64],
            noises: vec![0],
            states: vec!["empty".into()],
            budget: 200,
            ..GridConfig::new(vec!["ideal".into()])
        }
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let g: GridConfig = serde_json::from_str(r#"{"profiles": ["ideal"]}"#).unwrap();
        assert_eq!(g.sizes, PAPER_SIZES);
        assert_eq!(g.noises, PAPER_NOISES);
        assert_eq!(g.states.len(), 4);
        assert_eq!(
            (g.budget, g.max_len, g.alloc_ratio, g.runs),
            (50_000, 1000, 98, 1)
        );
        assert_eq!(g.noise_size, None);
        let g: GridConfig =
            serde_json::from_str(r#"{"profiles": ["ideal"], "noise-size": 24}"#).unwrap();
        assert_eq!(g.params(3).noise_size, Some(24));
        assert!(serde_json::from_str::<GridConfig>(r#"{"profiles": [], "budgte": 1}"#).is_err());
        let g = GridConfig {
            seed: 7,
            runs: 3,
            ..g
        };
        assert_eq!(g.seeds(), vec![7, 8, 9]);
    }

    #[test]
    fn tiny_grid_writes_every_artifact_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny();
        let first = run_bench(&grid, dir.path(), 1).unwrap();
        assert_eq!((first.computed, first.resumed), (8, 0));
        let csv = fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        assert!(csv.starts_with(
            "allocator,start_state,noise,pct_overall,pct_natural,pct_reversed,partial\n"
        ));
        assert_eq!(csv.lines().count(), 3);
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(manifest.seeds.len(), 8);
        assert!(manifest.finished_unix.is_some());

        // Simulate an interrupted run: two cells lost, one torn line.
        let cells = dir.path().join(CELLS_FILE);
        let text = fs::read_to_string(&cells).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.truncate(6);
        fs::write(&cells, lines.join("\n") + "\n{\"spec\": ").unwrap();
        let second = run_bench(&grid, dir.path(), 1).unwrap();
        assert_eq!((second.computed, second.resumed), (2, 6));
        assert_eq!(fs::read_to_string(dir.path().join(CSV_FILE)).unwrap(), csv);
        let reproducible = |s: &BenchSummary| {
            s.results
                .iter()
                .map(|r| r.reproducible())
                .collect::<Vec<_>>()
        };
        assert_eq!(reproducible(&first), reproducible(&second));

        let third = run_bench(&grid, dir.path(), 1).unwrap();
        assert_eq!((third.computed, third.resumed), (0, 8));
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        run_bench(&tiny(), dir.path(), 1).unwrap();
        let other = GridConfig {
            budget: 100,
            ..tiny()
        };
        assert!(matches!(
            run_bench(&other, dir.path(), 1),
            Err(BenchError::Mismatch { .. })
        ));
    }

    #[test]
    fn workers_do_not_change_results() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_bench(&tiny(), a.path(), 1).unwrap();
        run_bench(&tiny(), b.path(), 4).unwrap();
        assert_eq!(
            fs::read(a.path().join(CSV_FILE)).unwrap(),
            fs::read(b.path().join(CSV_FILE)).unwrap()
        );
    }
}
