//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here reuses allocator internals beyond the public
//! snapshot and placement views.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use heapsieve::alloc::{
    AllocatorConfig, AllocatorKind, ArenaState, BlockState, Coalescing, FitPolicy, Placement,
    Region, SizeRoute, SplitFrom,
};
use heapsieve::driver::Machine;
use heapsieve::rng::SplitMix64;

/// Free-list configuration of the introductory walkthrough: best fit, LIFO
/// free lists, no inline metadata and no size rounding.
pub fn walkthrough_config() -> AllocatorConfig {
    AllocatorConfig {
        name: Some("walkthrough".into()),
        alignment: 1,
        min_split_remainder: Some(1),
        ..AllocatorConfig::ideal()
    }
}

/// `create(name)` allocates the 12-byte User, the name plus terminator and a
/// 4-byte id; `destroy` frees all three.
fn create(k: usize, name_len: u64) -> String {
    format!(
        "<malloc 12 u{k}>\n<malloc {} n{k}>\n<malloc 4 i{k}>\n",
        name_len + 1
    )
}

fn destroy(k: usize) -> String {
    format!("<free u{k}>\n<free n{k}>\n<free i{k}>\n")
}

fn free_sizes(state: &ArenaState, config: &AllocatorConfig) -> Vec<u64> {
    let mut v: Vec<u64> = state
        .free_list(config)
        .iter()
        .map(|f| f.footprint)
        .collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v
}

/// Replays the create/destroy walkthrough, checking the holes after every
/// step. Returns the final `(name, User)` addresses.
pub fn walkthrough() -> Result<(u64, u64), String> {
    let config = walkthrough_config();
    let mut text = String::new();
    for (k, len) in [7, 3, 1, 3].into_iter().enumerate() {
        text += &create(k + 1, len);
    }
    text += &destroy(1);
    text += &destroy(3);
    let setup = heapsieve::driver::DriverProgram::parse_trace(&text).map_err(|e| e.to_string())?;
    let mut m = Machine::new(&config);
    m.run(&setup).map_err(|e| e.to_string())?;

    let expect = |m: &Machine, want: &[u64], at: &str| -> Result<(), String> {
        let got = free_sizes(m.state(), &config);
        if got == want {
            Ok(())
        } else {
            Err(format!("{at}: holes {got:?}, expected {want:?}"))
        }
    };
    expect(&m, &[24, 18], "after destroying users 1 and 3")?;

    let steps: [(&str, &[u64]); 5] = [
        ("<malloc 12 u5>", &[24, 6]),
        ("<malloc 8 n5>", &[16, 6]),
        ("<malloc 4 i5>", &[16, 2]),
        ("<malloc 12 u6>", &[4, 2]),
        ("<malloc 4 n6>", &[2]),
    ];
    for (line, holes) in steps {
        let p = heapsieve::driver::DriverProgram::parse_trace(line).map_err(|e| e.to_string())?;
        m.run(&p).map_err(|e| e.to_string())?;
        expect(&m, holes, line)?;
    }
    let name = m.address_of("n6").ok_or("n6 not live")?;
    let user = m.address_of("u2").ok_or("u2 not live")?;
    if name + 4 != user {
        return Err(format!("name at {name} does not end at User {user}"));
    }
    Ok((name, user))
}

fn arena_layout(state: &ArenaState) -> Vec<(u64, u64, bool)> {
    state
        .snapshot()
        .iter()
        .filter(|b| b.region == Region::Arena)
        .map(|b| (b.offset, b.footprint, b.is_free()))
        .collect()
}

/// Splitting and hole-creation outcomes on a 128-byte hole.
pub fn figures() -> Result<(), String> {
    let split = |split_from: SplitFrom| -> Result<(u64, u64), String> {
        let config = AllocatorConfig {
            split_from,
            ..AllocatorConfig::ideal()
        };
        let mut s = ArenaState::new(&config);
        let hole = s.alloc(&config, 128).map_err(|e| e.to_string())?;
        s.alloc(&config, 8).map_err(|e| e.to_string())?;
        s.dealloc(&config, hole).map_err(|e| e.to_string())?;
        let a = s.alloc(&config, 32).map_err(|e| e.to_string())?;
        let b = s.alloc(&config, 16).map_err(|e| e.to_string())?;
        Ok((a, b))
    };
    let front = split(SplitFrom::Front)?;
    if front != (0, 32) {
        return Err(format!("front split gave {front:?}, expected (0, 32)"));
    }
    let end = split(SplitFrom::End)?;
    if end != (96, 80) {
        return Err(format!("end split gave {end:?}, expected (96, 80)"));
    }

    let holes = |coalescing: Coalescing| -> Result<Vec<(u64, u64, bool)>, String> {
        let config = AllocatorConfig {
            coalescing,
            ..AllocatorConfig::ideal()
        };
        let mut s = ArenaState::new(&config);
        let a = s.alloc(&config, 128).map_err(|e| e.to_string())?;
        let b = s.alloc(&config, 128).map_err(|e| e.to_string())?;
        s.alloc(&config, 8).map_err(|e| e.to_string())?;
        s.dealloc(&config, a).map_err(|e| e.to_string())?;
        s.dealloc(&config, b).map_err(|e| e.to_string())?;
        Ok(arena_layout(&s))
    };
    let immediate = holes(Coalescing::Immediate)?;
    if immediate != [(0, 256, true), (256, 8, false)] {
        return Err(format!("immediate coalescing gave {immediate:?}"));
    }
    let delayed = holes(Coalescing::Delayed { threshold: 10 })?;
    if delayed != [(0, 128, true), (128, 128, true), (256, 8, false)] {
        return Err(format!("delayed coalescing gave {delayed:?}"));
    }
    Ok(())
}

/// Shipped profiles plus variants covering the remaining policy switches.
pub fn invariant_profiles() -> Vec<AllocatorConfig> {
    let mut out: Vec<AllocatorConfig> = heapsieve::alloc::profiles::NAMES
        .iter()
        .map(|n| heapsieve::alloc::profiles::builtin(n).unwrap())
        .collect();
    let ideal = AllocatorConfig::ideal();
    out.push(AllocatorConfig {
        name: Some("ideal-delayed-4".into()),
        coalescing: Coalescing::Delayed { threshold: 4 },
        ..ideal.clone()
    });
    out.push(AllocatorConfig {
        name: Some("ideal-never".into()),
        coalescing: Coalescing::Never,
        ..ideal.clone()
    });
    out.push(AllocatorConfig {
        name: Some("ideal-first-fit".into()),
        fit_policy: FitPolicy::FirstFit,
        ..ideal.clone()
    });
    out.push(AllocatorConfig {
        name: Some("ideal-next-fit-end".into()),
        fit_policy: FitPolicy::NextFit,
        split_from: SplitFrom::End,
        ..ideal
    });
    out
}

/// Request sizes skewed toward small classes with occasional large and
/// mapped requests.
pub fn random_size(rng: &mut SplitMix64) -> u64 {
    match rng.below(100) {
        0..=59 => rng.range_inclusive(1, 256),
        60..=84 => rng.range_inclusive(257, 4096),
        85..=96 => rng.range_inclusive(4097, 70_000),
        _ => rng.range_inclusive(70_001, 400_000),
    }
}

pub struct Live {
    pub addr: u64,
    pub size: u64,
}

/// Checks every structural property of `state` against the caller's own
/// record of live requests.
pub fn check_structure(
    state: &ArenaState,
    config: &AllocatorConfig,
    live: &[Live],
) -> Result<(), String> {
    let snap = state.snapshot();
    let arena: Vec<_> = snap.iter().filter(|b| b.region == Region::Arena).collect();

    // Tiling and conservation.
    let mut cursor = 0;
    for b in &arena {
        if b.offset != cursor {
            return Err(format!(
                "arena gap or overlap at {cursor}: next block at {}",
                b.offset
            ));
        }
        if b.footprint == 0 {
            return Err(format!("empty block at {}", b.offset));
        }
        cursor += b.footprint;
    }
    if cursor != state.wilderness_offset() {
        return Err(format!(
            "blocks sum to {cursor}, wilderness at {}",
            state.wilderness_offset()
        ));
    }

    // Mapped regions stay disjoint and out of the arena.
    let mut mapped_end = 0;
    for b in snap.iter().filter(|b| b.region == Region::Mapped) {
        if b.offset < mapped_end || b.offset < cursor {
            return Err(format!("mapped block at {} overlaps", b.offset));
        }
        mapped_end = b.offset + b.footprint;
    }

    // Adjacent free pairs.
    let pairs = arena
        .windows(2)
        .filter(|w| w[0].is_free() && w[1].is_free())
        .count();
    match config.coalescing {
        Coalescing::Immediate if pairs > 0 => {
            return Err(format!(
                "{pairs} adjacent free pairs under immediate coalescing"
            ))
        }
        Coalescing::Delayed { threshold } if pairs > threshold as usize => {
            return Err(format!(
                "{pairs} adjacent free pairs above threshold {threshold}"
            ))
        }
        _ => {}
    }

    // Live requests are disjoint and sit inside a block of the right kind.
    let mut spans: Vec<(u64, u64)> = live
        .iter()
        .map(|l| (l.addr, l.addr + l.size.max(1)))
        .collect();
    spans.sort_unstable();
    if let Some(w) = spans.windows(2).find(|w| w[0].1 > w[1].0) {
        return Err(format!("live requests overlap: {:?} and {:?}", w[0], w[1]));
    }
    let mut per_run: HashMap<u64, u64> = HashMap::new();
    for l in live {
        let at = snap.partition_point(|b| b.offset <= l.addr);
        let containing = at
            .checked_sub(1)
            .map(|i| &snap[i])
            .filter(|b| l.addr < b.offset + b.footprint)
            .ok_or_else(|| format!("live address {} outside every block", l.addr))?;
        if l.addr + l.size.max(1) > containing.offset + containing.footprint {
            return Err(format!("request at {} spills out of its block", l.addr));
        }
        match (containing.state, config.size_class_of(l.size)) {
            (
                BlockState::Run {
                    class_size,
                    slot_count,
                    ..
                },
                SizeRoute::Small {
                    class_size: want, ..
                },
            ) => {
                if class_size != want {
                    return Err(format!(
                        "{}-byte request in a run of class {class_size}",
                        l.size
                    ));
                }
                let rel = l.addr - containing.offset;
                if rel % class_size != 0 || rel / class_size >= slot_count {
                    return Err(format!("address {} is not a slot of its run", l.addr));
                }
                *per_run.entry(containing.offset).or_default() += 1;
            }
            (BlockState::Run { .. }, route) => {
                return Err(format!(
                    "{}-byte request routed {route:?} found in a run",
                    l.size
                ))
            }
            (BlockState::Allocated { .. }, SizeRoute::Small { .. }) => {
                return Err(format!("small request at {} outside a run", l.addr))
            }
            (BlockState::Allocated { .. }, _) => {}
            (BlockState::Free, _) => {
                return Err(format!("live address {} inside a free block", l.addr))
            }
        }
    }
    for b in &arena {
        if let BlockState::Run { live_slots, .. } = b.state {
            let mine = per_run.get(&b.offset).copied().unwrap_or(0);
            if mine != live_slots {
                return Err(format!(
                    "run at {} reports {live_slots} live slots, {mine} tracked",
                    b.offset
                ));
            }
            if config.release_empty_runs && live_slots == 0 {
                return Err(format!("empty run at {} was not released", b.offset));
            }
        }
    }
    let allocated = snap
        .iter()
        .filter(|b| matches!(b.state, BlockState::Allocated { .. }))
        .count();
    let unslotted = live.len() - per_run.values().sum::<u64>() as usize;
    if allocated != unslotted {
        return Err(format!(
            "{allocated} allocated blocks for {unslotted} live block requests"
        ));
    }
    state.check_invariants(config)
}

/// `ops` random malloc/free/realloc/calloc operations, verifying the heap
/// after each one. Returns the number of checks performed.
pub fn invariant_run(config: &AllocatorConfig, seed: u64, ops: usize) -> Result<usize, String> {
    let mut rng = SplitMix64::new(seed);
    let mut state = ArenaState::new(config);
    let mut live: Vec<Live> = Vec::new();
    for op in 0..ops {
        let roll = rng.below(100);
        let result = if live.is_empty() || roll < 50 {
            let size = random_size(&mut rng);
            state
                .alloc(config, size)
                .map(|addr| live.push(Live { addr, size }))
        } else if roll < 85 {
            let l = live.swap_remove(rng.below(live.len() as u64) as usize);
            state.dealloc(config, l.addr)
        } else if roll < 95 {
            let i = rng.below(live.len() as u64) as usize;
            let size = random_size(&mut rng);
            state
                .realloc(config, live[i].addr, size)
                .map(|addr| live[i] = Live { addr, size })
        } else {
            let (n, size) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 512));
            state.calloc(config, n, size).map(|addr| {
                live.push(Live {
                    addr,
                    size: n * size,
                })
            })
        };
        result.map_err(|e| format!("op {op}: {e}"))?;
        check_structure(&state, config, &live)
            .map_err(|e| format!("{} seed {seed} op {op}: {e}", config.label()))?;
    }
    Ok(ops)
}

/// Exhaustive best fit over the caller's own view of the free list:
/// the smallest adequate block, most recently freed first.
#[derive(Default)]
pub struct BestFitOracle {
    stamps: BTreeMap<(u64, u64), u64>,
    clock: u64,
}

pub enum OracleChoice {
    Block(u64),
    Wilderness,
    /// Several candidates became free in the same step; order unknown.
    Ambiguous,
}

impl BestFitOracle {
    /// Update recency stamps from the heap's current free blocks.
    pub fn observe(&mut self, state: &ArenaState) {
        let now: Vec<(u64, u64)> = state
            .snapshot()
            .iter()
            .filter(|b| b.region == Region::Arena && b.is_free())
            .map(|b| (b.offset, b.footprint))
            .collect();
        let fresh: Vec<_> = now
            .iter()
            .filter(|k| !self.stamps.contains_key(k))
            .copied()
            .collect();
        self.stamps.retain(|k, _| now.contains(k));
        if !fresh.is_empty() {
            self.clock += 1;
        }
        for k in fresh {
            self.stamps.insert(k, self.clock);
        }
    }

    pub fn choose(&self, footprint: u64) -> OracleChoice {
        let best = self
            .stamps
            .iter()
            .filter(|((_, fp), _)| *fp >= footprint)
            .min_by_key(|((_, fp), stamp)| (*fp, std::cmp::Reverse(**stamp)));
        match best {
            None => OracleChoice::Wilderness,
            Some((&(offset, fp), &stamp)) => {
                let ties = self
                    .stamps
                    .iter()
                    .filter(|((_, f), s)| *f == fp && **s == stamp)
                    .count();
                if ties > 1 {
                    OracleChoice::Ambiguous
                } else {
                    OracleChoice::Block(offset)
                }
            }
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct OracleTally {
    pub compared: u64,
    pub skipped: u64,
    pub mismatches: u64,
}

/// One random malloc/free trace of `len` directives, comparing every
/// free-list placement with [`BestFitOracle`].
pub fn best_fit_trace(
    config: &AllocatorConfig,
    seed: u64,
    len: usize,
) -> Result<OracleTally, String> {
    assert_eq!(config.kind, AllocatorKind::FreeList);
    let mut rng = SplitMix64::new(seed);
    let mut state = ArenaState::new(config);
    let mut oracle = BestFitOracle::default();
    let mut live: Vec<u64> = Vec::new();
    let mut tally = OracleTally::default();
    for step in 0..len {
        if !live.is_empty() && rng.below(100) < 45 {
            let a = live.swap_remove(rng.below(live.len() as u64) as usize);
            state.dealloc(config, a).map_err(|e| e.to_string())?;
        } else {
            let size = if rng.below(4) == 0 {
                rng.range_inclusive(1, 2048)
            } else {
                8 * rng.range_inclusive(1, 24)
            };
            let SizeRoute::Block { footprint } = config.size_class_of(size) else {
                continue;
            };
            let chosen = state.clone().find_fit(config, footprint).map(|f| f.offset);
            let addr = state.alloc(config, size).map_err(|e| e.to_string())?;
            let Some(Placement::Block {
                offset,
                footprint: placed,
            }) = state.placement(config, addr)
            else {
                return Err(format!("step {step}: allocation at {addr} is not a block"));
            };
            live.push(addr);
            let expected = match oracle.choose(footprint) {
                OracleChoice::Ambiguous => {
                    tally.skipped += 1;
                    oracle.observe(&state);
                    continue;
                }
                OracleChoice::Block(o) => Some(o),
                OracleChoice::Wilderness => None,
            };
            tally.compared += 1;
            let placed_ok = match expected {
                Some(o) => offset == o,
                None => offset + placed == state.wilderness_offset(),
            };
            if chosen != expected || !placed_ok {
                tally.mismatches += 1;
            }
        }
        oracle.observe(&state);
    }
    Ok(tally)
}

/// A random valid trace of `len` directives: mixed malloc, calloc, free and
/// realloc, usually an fst/snd pair, and record/check probes.
pub fn random_program(rng: &mut SplitMix64, len: usize) -> String {
    let markers = (rng.below(10) < 8 && len >= 2).then(|| {
        let f = rng.below(len as u64 - 1) as usize;
        (
            f,
            rng.range_inclusive(f as u64 + 1, len as u64 - 1) as usize,
        )
    });
    let mut out = String::new();
    let mut live: Vec<String> = Vec::new();
    let mut records: Vec<String> = Vec::new();
    let mut next = 0;
    let mut fresh = || {
        next += 1;
        format!("a{next}")
    };
    for i in 0..len {
        if rng.below(8) == 0 {
            let r = format!("r{}", records.len());
            out += &format!("#X-RECORD {} {r}\n", rng.below(3));
            records.push(r);
        }
        if let Some((f, s)) = markers {
            if i == f {
                out += &format!("<fst {}>\n", random_size(rng));
                continue;
            }
            if i == s {
                out += &format!("<snd {}>\n", random_size(rng));
                continue;
            }
        }
        let roll = rng.below(100);
        if live.is_empty() || roll < 50 {
            let id = fresh();
            out += &format!("<malloc {} {id}>\n", random_size(rng));
            live.push(id);
        } else if roll < 58 {
            let id = fresh();
            out += &format!(
                "<calloc {} {} {id}>\n",
                rng.range_inclusive(1, 16),
                rng.range_inclusive(1, 300)
            );
            live.push(id);
        } else if roll < 88 {
            let id = live.swap_remove(rng.below(live.len() as u64) as usize);
            out += &format!("<free {id}>\n");
        } else {
            let i = rng.below(live.len() as u64) as usize;
            let id = fresh();
            out += &format!("<realloc {} {} {id}>\n", live[i], random_size(rng));
            live[i] = id;
        }
    }
    for _ in 0..records.len().min(4) {
        let x = &records[rng.below(records.len() as u64) as usize];
        let y = &records[rng.below(records.len() as u64) as usize];
        out += &format!(
            "#X-CHECK {x} {y} {}\n",
            rng.range_inclusive(0, 512) as i64 - 256
        );
    }
    out
}
