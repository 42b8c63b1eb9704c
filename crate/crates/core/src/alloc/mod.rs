//! Deterministic allocator simulations.
//!
//! One [`ArenaState`] models a single arena starting at offset 0 plus a
//! mapped region at [`MAPPED_BASE`]. The arena is managed by an address
//! ordered block list; segregated-storage runs are blocks of that list which
//! are carved into fixed-size slots.

mod config;
mod heap;
pub mod profiles;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    AllocatorConfig, AllocatorKind, Coalescing, ConfigError, FitPolicy, FreeListOrg, LargeStrategy,
    SizeRoute, SplitFrom,
};
use heap::{FreeListHeap, HeapPolicy, NodeState};

/// Base address of the mapped region; far above any arena offset.
pub const MAPPED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("zero-byte request")]
    ZeroSize,
    #[error("out of memory: {requested} bytes requested, {available} left in the arena")]
    OutOfMemory { requested: u64, available: u64 },
    #[error("invalid free of address {0:#x}")]
    InvalidFree(u64),
    #[error("calloc size overflow: {nmemb} x {size}")]
    Overflow { nmemb: u64, size: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Arena,
    Mapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockState {
    Free,
    Allocated {
        tag: u64,
    },
    /// A segregated-storage run occupying the block.
    Run {
        class_size: u64,
        slot_count: u64,
        live_slots: u64,
    },
}

/// One entry of a heap snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: u64,
    pub footprint: u64,
    pub state: BlockState,
    pub region: Region,
}

impl Block {
    pub fn is_free(&self) -> bool {
        self.state == BlockState::Free
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeClassRun {
    pub class_size: u64,
    pub base_offset: u64,
    pub slot_count: u64,
    bitmap: Vec<u64>,
}

impl SizeClassRun {
    fn new(class_size: u64, base_offset: u64, slot_count: u64) -> Self {
        Self {
            class_size,
            base_offset,
            slot_count,
            bitmap: vec![0; slot_count.div_ceil(64) as usize],
        }
    }

    pub fn is_allocated(&self, slot: u64) -> bool {
        self.bitmap[(slot / 64) as usize] & (1 << (slot % 64)) != 0
    }

    fn set(&mut self, slot: u64, on: bool) {
        let word = &mut self.bitmap[(slot / 64) as usize];
        if on {
            *word |= 1 << (slot % 64);
        } else {
            *word &= !(1 << (slot % 64));
        }
    }

    pub fn live_slots(&self) -> u64 {
        self.bitmap.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn slot_address(&self, slot: u64) -> u64 {
        self.base_offset + slot * self.class_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct ClassState {
    /// Freed slots, most recent last.
    free_slots: Vec<(u32, u64)>,
    /// Newest run and its first never-used slot.
    bump: Option<(u32, u64)>,
}

/// Where an address currently lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Block {
        offset: u64,
        footprint: u64,
    },
    Slot {
        class_size: u64,
        run_base: u64,
        slot: u64,
    },
    Mapped {
        base: u64,
        footprint: u64,
    },
}

/// Reference to a free block chosen by [`ArenaState::find_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitRef {
    pub offset: u64,
    pub footprint: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArenaState {
    heap: FreeListHeap,
    /// Indexed by run id; `None` once released.
    runs: Vec<Option<SizeClassRun>>,
    classes: Vec<ClassState>,
    run_by_base: BTreeMap<u64, u32>,
    mapped: BTreeMap<u64, (u64, u64)>,
    mapped_cursor: u64,
    next_tag: u64,
}

fn block_policy(config: &AllocatorConfig) -> HeapPolicy<'_> {
    match config.kind {
        AllocatorKind::FreeList => HeapPolicy {
            fit: config.fit_policy,
            split: config.split_from,
            coalescing: config.coalescing,
            min_split: config.min_split(),
            class_bounds: match &config.free_list_org {
                FreeListOrg::Single => &[],
                FreeListOrg::Segregated { class_upper_bounds } => class_upper_bounds,
            },
        },
        // The page heap behind segregated storage: best fit over page spans.
        AllocatorKind::SegregatedStorage => HeapPolicy {
            fit: FitPolicy::BestFit,
            split: SplitFrom::Front,
            coalescing: config.coalescing,
            min_split: config.page_size,
            class_bounds: &[],
        },
    }
}

fn page_policy(config: &AllocatorConfig) -> HeapPolicy<'_> {
    HeapPolicy {
        fit: FitPolicy::BestFit,
        ..block_policy(config)
    }
}

impl ArenaState {
    pub fn new(config: &AllocatorConfig) -> Self {
        let track_order =
            config.kind == AllocatorKind::FreeList && config.fit_policy != FitPolicy::BestFit;
        Self {
            heap: FreeListHeap::new(config.capacity, track_order),
            runs: Vec::new(),
            classes: vec![ClassState::default(); config.size_classes.len()],
            run_by_base: BTreeMap::new(),
            mapped: BTreeMap::new(),
            mapped_cursor: MAPPED_BASE,
            next_tag: 0,
        }
    }

    fn run(&self, id: u32) -> &SizeClassRun {
        self.runs[id as usize].as_ref().expect("run is live")
    }

    fn run_mut(&mut self, id: u32) -> &mut SizeClassRun {
        self.runs[id as usize].as_mut().expect("run is live")
    }

    fn tag(&mut self) -> NodeState {
        self.next_tag += 1;
        NodeState::Used { tag: self.next_tag }
    }

    /// Allocate `size` bytes and return the user-visible address.
    pub fn alloc(&mut self, config: &AllocatorConfig, size: u64) -> Result<u64, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let header = config.header_bytes;
        match config.size_class_of(size) {
            SizeRoute::Block { footprint } => {
                let state = self.tag();
                let offset = self
                    .heap
                    .alloc_node(&block_policy(config), footprint, state)?;
                Ok(offset + header)
            }
            SizeRoute::Pages { footprint } => {
                let state = self.tag();
                let offset = self
                    .heap
                    .alloc_node(&page_policy(config), footprint, state)?;
                Ok(offset + header)
            }
            SizeRoute::Small {
                class_index,
                class_size,
            } => self.alloc_slot(config, class_index, class_size),
            SizeRoute::Mapped { footprint } => {
                self.next_tag += 1;
                let tag = self.next_tag;
                let base = self.mapped_cursor;
                self.mapped_cursor += footprint;
                self.mapped.insert(base, (footprint, tag));
                Ok(base + header)
            }
        }
    }

    fn alloc_slot(
        &mut self,
        config: &AllocatorConfig,
        class_index: usize,
        class_size: u64,
    ) -> Result<u64, AllocError> {
        let class = &self.classes[class_index];
        let (run, slot) = if let Some(&reused) = class.free_slots.last() {
            self.classes[class_index].free_slots.pop();
            reused
        } else {
            match class.bump {
                Some((run, next)) if next < self.run(run).slot_count => {
                    self.classes[class_index].bump = Some((run, next + 1));
                    (run, next)
                }
                _ => {
                    let bytes = config.run_bytes(class_size);
                    let run = self.runs.len() as u32;
                    let base = self.heap.alloc_node(
                        &page_policy(config),
                        bytes,
                        NodeState::Run { run },
                    )?;
                    self.runs.push(Some(SizeClassRun::new(
                        class_size,
                        base,
                        bytes / class_size,
                    )));
                    self.run_by_base.insert(base, run);
                    self.classes[class_index].bump = Some((run, 1));
                    (run, 0)
                }
            }
        };
        let run = self.run_mut(run);
        run.set(slot, true);
        Ok(run.slot_address(slot))
    }

    /// Locate a live allocation by its user-visible address.
    pub fn placement(&self, config: &AllocatorConfig, address: u64) -> Option<Placement> {
        let header = config.header_bytes;
        if address >= MAPPED_BASE {
            let base = address.checked_sub(header)?;
            return self
                .mapped
                .get(&base)
                .map(|&(footprint, _)| Placement::Mapped { base, footprint });
        }
        if let Some((&base, &run)) = self.run_by_base.range(..=address).next_back() {
            let r = self.run(run);
            let end = base + config.run_bytes(r.class_size);
            if address < end {
                let rel = address - base;
                let slot = rel / r.class_size;
                if rel.is_multiple_of(r.class_size) && slot < r.slot_count && r.is_allocated(slot) {
                    return Some(Placement::Slot {
                        class_size: r.class_size,
                        run_base: base,
                        slot,
                    });
                }
                return None;
            }
        }
        let offset = address.checked_sub(header)?;
        match self.heap.used_node(offset) {
            Some(node) if matches!(node.state, NodeState::Used { .. }) => Some(Placement::Block {
                offset,
                footprint: node.footprint,
            }),
            _ => None,
        }
    }

    pub fn dealloc(&mut self, config: &AllocatorConfig, address: u64) -> Result<(), AllocError> {
        match self.placement(config, address) {
            Some(Placement::Mapped { base, .. }) => {
                self.mapped.remove(&base);
                Ok(())
            }
            Some(Placement::Slot { run_base, slot, .. }) => {
                let run_idx = self.run_by_base[&run_base];
                let run = self.run_mut(run_idx);
                run.set(slot, false);
                let empty = run.live_slots() == 0;
                let class_index = config
                    .size_classes
                    .binary_search(&run.class_size)
                    .expect("run class is configured");
                let class = &mut self.classes[class_index];
                if empty && config.release_empty_runs {
                    class.free_slots.retain(|&(r, _)| r != run_idx);
                    if class.bump.is_some_and(|(r, _)| r == run_idx) {
                        class.bump = None;
                    }
                    self.run_by_base.remove(&run_base);
                    self.runs[run_idx as usize] = None;
                    return self.heap.free_run(&page_policy(config), run_base);
                }
                class.free_slots.push((run_idx, slot));
                Ok(())
            }
            Some(Placement::Block { offset, .. }) => {
                self.heap.free_node(&block_policy(config), offset)
            }
            None => Err(AllocError::InvalidFree(address)),
        }
    }

    pub fn realloc(
        &mut self,
        config: &AllocatorConfig,
        address: u64,
        new_size: u64,
    ) -> Result<u64, AllocError> {
        if new_size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let placement = self
            .placement(config, address)
            .ok_or(AllocError::InvalidFree(address))?;
        let route = config.size_class_of(new_size);
        let in_place = match (placement, route) {
            (
                Placement::Slot { class_size, .. },
                SizeRoute::Small {
                    class_size: want, ..
                },
            ) => class_size == want,
            (Placement::Mapped { footprint, .. }, SizeRoute::Mapped { footprint: want }) => {
                footprint == want
            }
            (
                Placement::Block { offset, .. },
                SizeRoute::Block { footprint: want } | SizeRoute::Pages { footprint: want },
            ) => self
                .heap
                .resize_in_place(&block_policy(config), offset, want),
            _ => false,
        };
        if in_place {
            return Ok(address);
        }
        let moved = self.alloc(config, new_size)?;
        self.dealloc(config, address)?;
        Ok(moved)
    }

    pub fn calloc(
        &mut self,
        config: &AllocatorConfig,
        nmemb: u64,
        size: u64,
    ) -> Result<u64, AllocError> {
        let total = nmemb
            .checked_mul(size)
            .ok_or(AllocError::Overflow { nmemb, size })?;
        self.alloc(config, total)
    }

    /// The free block the allocator would pick for `footprint` bytes. Only
    /// the next-fit cursor moves.
    pub fn find_fit(&mut self, config: &AllocatorConfig, footprint: u64) -> Option<FitRef> {
        let n = self.heap.find_fit(&block_policy(config), footprint)?;
        let node = self.heap.node(n);
        Some(FitRef {
            offset: node.offset,
            footprint: node.footprint,
        })
    }

    /// Free blocks of the arena in free-list order.
    pub fn free_list(&self, config: &AllocatorConfig) -> Vec<FitRef> {
        self.heap
            .free_list_order(&block_policy(config))
            .into_iter()
            .map(|(offset, footprint)| FitRef { offset, footprint })
            .collect()
    }

    pub fn wilderness_offset(&self) -> u64 {
        self.heap.wilderness()
    }

    pub fn mapped_cursor(&self) -> u64 {
        self.mapped_cursor
    }

    /// Adjacent free pairs waiting for a delayed coalesce.
    pub fn pending_free_count(&self) -> u32 {
        self.heap.pending()
    }

    pub fn next_fit_cursor(&self) -> Option<(u32, u64)> {
        self.heap.next_fit_cursor()
    }

    /// Live segregated-storage runs in carving order.
    pub fn runs(&self) -> Vec<&SizeClassRun> {
        self.runs.iter().flatten().collect()
    }

    /// Ordered listing of every block: arena blocks by offset, then mapped.
    pub fn snapshot(&self) -> Vec<Block> {
        let mut out: Vec<Block> = self
            .heap
            .iter()
            .map(|node| Block {
                offset: node.offset,
                footprint: node.footprint,
                state: match node.state {
                    NodeState::Free { .. } => BlockState::Free,
                    NodeState::Used { tag } => BlockState::Allocated { tag },
                    NodeState::Run { run } => {
                        let r = self.run(run);
                        BlockState::Run {
                            class_size: r.class_size,
                            slot_count: r.slot_count,
                            live_slots: r.live_slots(),
                        }
                    }
                    NodeState::Vacant => unreachable!("vacant nodes are unlinked"),
                },
                region: Region::Arena,
            })
            .collect();
        out.extend(
            self.mapped
                .iter()
                .map(|(&offset, &(footprint, tag))| Block {
                    offset,
                    footprint,
                    state: BlockState::Allocated { tag },
                    region: Region::Mapped,
                }),
        );
        out
    }

    /// Verify every structural invariant; the error names the first failure.
    pub fn check_invariants(&self, config: &AllocatorConfig) -> Result<(), String> {
        let alignment = match config.kind {
            AllocatorKind::FreeList => config.alignment,
            AllocatorKind::SegregatedStorage => config.page_size,
        };
        self.heap.check(&block_policy(config), alignment)?;
        for (i, run) in self.runs.iter().enumerate() {
            let Some(run) = run else { continue };
            let bytes = config.run_bytes(run.class_size);
            if run.slot_count != bytes / run.class_size {
                return Err(format!(
                    "run {i} has {} slots, expected {}",
                    run.slot_count,
                    bytes / run.class_size
                ));
            }
            if config.size_classes.binary_search(&run.class_size).is_err() {
                return Err(format!("run {i} has unconfigured class {}", run.class_size));
            }
            let node = self
                .heap
                .used_node(run.base_offset)
                .ok_or_else(|| format!("run {i} has no backing block"))?;
            if node.state != (NodeState::Run { run: i as u32 }) || node.footprint != bytes {
                return Err(format!("run {i} backing block was split or merged"));
            }
        }
        for (class_index, class) in self.classes.iter().enumerate() {
            let class_size = config.size_classes[class_index];
            for &(run, slot) in &class.free_slots {
                let Some(r) = &self.runs[run as usize] else {
                    return Err(format!("free slot {slot} in released run {run}"));
                };
                if r.class_size != class_size || r.is_allocated(slot) {
                    return Err(format!("stale free slot {slot} in run {run}"));
                }
            }
        }
        let mut end = MAPPED_BASE;
        for (&base, &(footprint, _)) in &self.mapped {
            if base < end {
                return Err(format!(
                    "mapped block at {base:#x} overlaps its predecessor"
                ));
            }
            end = base + footprint;
        }
        if end > self.mapped_cursor {
            return Err("mapped block beyond the mapped cursor".into());
        }
        Ok(())
    }
}
