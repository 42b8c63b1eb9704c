use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use heapsieve::alloc::{profiles, AllocatorConfig};
use heapsieve::benchgen::{resolve_state, ExperimentContext, ExperimentParams, ExperimentSpec};
use heapsieve::driver::{execute, DriverProgram, Markers, DEFAULT_TIMEOUT};
use heapsieve::harness::bench::{load_grid, run_bench};
use heapsieve::harness::{exit, protocol_output, render};
use heapsieve::search::{
    search, Direction, ExternalExecutor, Order, SearchParams, Strategy, DEFAULT_ALLOC_RATIO,
    DEFAULT_BUDGET, DEFAULT_MAX_LEN,
};
use heapsieve::template::{
    parse_template, template_search, FragmentDb, TemplateExecutor, TemplateParams,
};

#[derive(Parser)]
#[command(
    name = "heapsieve",
    version,
    about = "Heap layout manipulation search over simulated allocators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ProfileArgs {
    /// Shipped profile name or path to a profile JSON file.
    #[arg(long, default_value = "ideal")]
    profile: String,
    /// Profile JSON file; takes precedence over --profile.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ProfileArgs {
    fn spec(&self) -> String {
        match &self.config {
            Some(path) => path.display().to_string(),
            None => self.profile.clone(),
        }
    }

    fn load(&self) -> Result<AllocatorConfig, Failure> {
        profiles::load(&self.spec()).map_err(|e| Failure::input(e.to_string()))
    }
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum number of interaction sequences per candidate.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: u64,
    /// Percentage of sequences that allocate.
    #[arg(long, default_value_t = DEFAULT_ALLOC_RATIO)]
    alloc_ratio: u8,
    /// Worker threads; HEAPSIEVE_WORKERS overrides.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Evaluate candidates with this external driver executable.
    #[arg(long)]
    driver: Option<PathBuf>,
    /// Per-candidate timeout for the external driver, in seconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    driver_timeout: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Overflow,
    Underflow,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    SrcFirst,
    DstFirst,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a trace and print `addr(fst) - addr(snd)`.
    Exec {
        trace: PathBuf,
        #[command(flatten)]
        profile: ProfileArgs,
        /// Print the final heap as `[A:32][F:96]` cells.
        #[arg(long)]
        render: bool,
        /// Write the final heap as an SVG strip.
        #[arg(long)]
        render_svg: Option<PathBuf>,
    },
    /// Search for a layout placing the destination next to the source.
    Search {
        #[command(flatten)]
        profile: ProfileArgs,
        /// Starting state: a synthetic state name, `empty`, or a trace path.
        #[arg(long, default_value = "empty")]
        state: String,
        #[arg(long)]
        src: u64,
        #[arg(long)]
        dst: u64,
        #[arg(long, value_enum, default_value = "overflow")]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value = "src-first")]
        order: OrderArg,
        /// Noise allocations around each of the source and destination.
        #[arg(long, default_value_t = 0)]
        noise: usize,
        /// Size of each noise allocation; defaults to the source size.
        #[arg(long)]
        noise_size: Option<u64>,
        /// Required distance; derived from the sizes when absent.
        #[arg(long, allow_hyphen_values = true)]
        target: Option<i64>,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Run an experiment grid with checkpointing.
    Bench {
        /// Grid config JSON.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "bench-out")]
        out_dir: PathBuf,
    },
    /// Solve a template against a fragment database.
    Template {
        template: PathBuf,
        /// Directory of fragment files.
        #[arg(long)]
        fragments: PathBuf,
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Print or draw the heap left by a trace.
    Render {
        trace: PathBuf,
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: exit::PARSE,
            message: message.into(),
        }
    }

    fn exec(message: impl Into<String>) -> Self {
        Self {
            code: exit::EXEC,
            message: message.into(),
        }
    }
}

fn workers(flag: usize) -> usize {
    std::env::var("HEAPSIEVE_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(flag)
        .max(1)
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::exec(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::exec(format!("{}: {e}", path.display())))
}

fn load_trace(path: &Path) -> Result<DriverProgram, Failure> {
    DriverProgram::parse_with(&read(path)?, Markers::Optional)
        .map_err(|e| Failure::input(format!("{}:\n{e}", path.display())))
}

/// The external driver reads its profile from the environment.
fn external_profile(profile: &ProfileArgs) {
    if std::env::var_os("HEAPSIEVE_PROFILE").is_none() {
        std::env::set_var("HEAPSIEVE_PROFILE", profile.spec());
    }
}

fn run(cli: Cli) -> Result<i32, Failure> {
    match cli.command {
        Command::Exec {
            trace,
            profile,
            render: ascii,
            render_svg,
        } => {
            let config = profile.load()?;
            let program = load_trace(&trace)?;
            let execution = execute(&program, &config).map_err(|e| Failure::exec(e.to_string()))?;
            print!("{}", protocol_output(&execution));
            if let Some(f) = &execution.result.failure {
                eprintln!("warning: {f}");
            }
            if ascii {
                println!("{}", render::ascii(&execution.snapshot));
            }
            if let Some(path) = render_svg {
                write(&path, &render::svg(&execution.snapshot, config.alignment))?;
            }
            Ok(exit::SOLVED)
        }
        Command::Render {
            trace,
            profile,
            svg,
        } => {
            let config = profile.load()?;
            let program = load_trace(&trace)?;
            let execution = execute(&program, &config).map_err(|e| Failure::exec(e.to_string()))?;
            println!("{}", render::ascii(&execution.snapshot));
            if let Some(path) = svg {
                write(&path, &render::svg(&execution.snapshot, config.alignment))?;
            }
            Ok(exit::SOLVED)
        }
        Command::Search {
            profile,
            state,
            src,
            dst,
            direction,
            order,
            noise,
            noise_size,
            target,
            search: args,
        } => {
            if src == 0 || dst == 0 {
                return Err(Failure::input("sizes must be at least 1"));
            }
            let config = profile.load()?;
            let state = resolve_state(&state).map_err(|e| Failure::input(e.to_string()))?;
            let ctx = ExperimentContext::new(config, state)
                .map_err(|e| Failure::exec(format!("starting state: {e}")))?;
            let spec = ExperimentSpec {
                profile: ctx.config().label().to_string(),
                state: ctx.state.name.clone(),
                src_size: src,
                dst_size: dst,
                direction: match direction {
                    DirectionArg::Overflow => Direction::Overflow,
                    DirectionArg::Underflow => Direction::Underflow,
                },
                order: match order {
                    OrderArg::SrcFirst => Order::SrcFirst,
                    OrderArg::DstFirst => Order::DstFirst,
                },
                noise,
            };
            let exp = ExperimentParams {
                budget: args.budget,
                max_len: args.max_len,
                alloc_ratio: args.alloc_ratio,
                seed: args.seed,
                noise_size,
            };
            let pool = ctx.pool(&spec, &exp);
            let target =
                target.unwrap_or_else(|| heapsieve::benchgen::target_distance(&spec, ctx.config()));
            let params = SearchParams {
                budget: args.budget,
                target_distance: target,
                max_len: args.max_len,
                alloc_ratio: args.alloc_ratio,
                seed: args.seed,
            };
            params.validate().map_err(Failure::input)?;
            let strategy = Strategy::with_workers(workers(args.workers));
            let outcome = match &args.driver {
                Some(path) => {
                    external_profile(&profile);
                    let exec = ExternalExecutor {
                        path: path.clone(),
                        timeout: Duration::from_secs(args.driver_timeout),
                    };
                    search(&pool, &params, &exec, strategy)
                }
                None => search(&pool, &params, &ctx.executor, strategy),
            };
            let summary = json!({
                "solved": outcome.solved,
                "target-distance": target,
                "best-distance": outcome.best_distance(),
                "candidates-tried": outcome.candidates_tried,
                "candidates-to-best": outcome.candidates_to_best(),
                "failures": outcome.failures,
                "seed": args.seed,
                "spec": spec,
            });
            write(
                &args.out_dir.join("outcome.json"),
                &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
            )?;
            finish(
                outcome.solved,
                outcome.solution().map(|c| c.to_program().serialize()),
                outcome.best_distance(),
                outcome.candidates_tried,
                &args.out_dir,
            )
        }
        Command::Template {
            template,
            fragments,
            profile,
            search: args,
        } => {
            let config = profile.load()?;
            let t = parse_template(&read(&template)?)
                .map_err(|e| Failure::input(format!("{}:\n{e}", template.display())))?;
            let db = FragmentDb::load_dir(&fragments, &config)
                .map_err(|e| Failure::input(e.to_string()))?;
            let params = TemplateParams {
                budget: args.budget,
                max_len: args.max_len,
                alloc_ratio: args.alloc_ratio,
                seed: args.seed,
            };
            let executor = match &args.driver {
                Some(path) => {
                    external_profile(&profile);
                    TemplateExecutor::External {
                        path: path.clone(),
                        timeout: Duration::from_secs(args.driver_timeout),
                    }
                }
                None => TemplateExecutor::Sim(config),
            };
            let outcome = template_search(
                &t,
                &db,
                params,
                &executor,
                Strategy::with_workers(workers(args.workers)),
            )
            .map_err(|e| Failure::input(e.to_string()))?;
            let summary = json!({
                "solved": outcome.solved,
                "best-error": outcome.best.as_ref().map(|b| b.error),
                "candidates-tried": outcome.candidates_tried,
                "candidates-to-best": outcome.candidates_to_best(),
                "failures": outcome.failures,
                "seed": args.seed,
                "fragments": outcome.solution().map(|s| s.fragments.clone()),
            });
            write(
                &args.out_dir.join("outcome.json"),
                &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
            )?;
            finish(
                outcome.solved,
                outcome.solution().map(|s| s.text.clone()),
                outcome.best_distance(),
                outcome.candidates_tried,
                &args.out_dir,
            )
        }
        Command::Bench {
            grid,
            budget,
            seed,
            workers: w,
            out_dir,
        } => {
            let mut grid = load_grid(&grid).map_err(|e| Failure::input(e.to_string()))?;
            if let Some(b) = budget {
                grid.budget = b;
            }
            if let Some(s) = seed {
                grid.seed = s;
            }
            let summary =
                run_bench(&grid, &out_dir, workers(w)).map_err(|e| Failure::exec(e.to_string()))?;
            let solved = summary.results.iter().filter(|r| r.solved).count();
            println!(
                "{solved}/{} solved ({} resumed, {} computed); results in {}",
                summary.results.len(),
                summary.resumed,
                summary.computed,
                summary.out_dir.display()
            );
            print!(
                "{}",
                fs::read_to_string(out_dir.join("results.csv")).unwrap_or_default()
            );
            Ok(exit::SOLVED)
        }
    }
}

fn finish(
    solved: bool,
    solution: Option<String>,
    best: Option<i64>,
    tried: u64,
    out_dir: &Path,
) -> Result<i32, Failure> {
    let best = best.map_or("none".to_string(), |d| d.to_string());
    match solution {
        Some(text) if solved => {
            let path = out_dir.join("solution.trace");
            write(&path, &text)?;
            println!(
                "solved: distance {best} after {tried} candidates; wrote {}",
                path.display()
            );
            Ok(exit::SOLVED)
        }
        _ => {
            println!("unsolved: best distance {best} after {tried} candidates");
            Ok(exit::UNSOLVED)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
