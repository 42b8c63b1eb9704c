//! Address-ordered block list with LIFO free indices.
//!
//! Blocks live in a slab and are chained in offset order, so neighbour
//! lookups during coalescing are O(1). Free blocks are indexed twice: by
//! `(footprint, recency)` for best fit, and, when a scanning fit policy is
//! configured, by `(list class, recency)` which is the free-list order.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::ops::Bound;

use rustc_hash::FxHashMap;

use super::config::{Coalescing, FitPolicy, SplitFrom};
use super::AllocError;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NodeState {
    Free { stamp: u64 },
    Used { tag: u64 },
    Run { run: u32 },
    Vacant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Node {
    pub offset: u64,
    pub footprint: u64,
    prev: u32,
    next: u32,
    pub state: NodeState,
}

/// Per-call view of the policy axes the heap needs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeapPolicy<'a> {
    pub fit: FitPolicy,
    pub split: SplitFrom,
    pub coalescing: Coalescing,
    pub min_split: u64,
    /// Upper bounds of segregated free lists; empty for a single list.
    pub class_bounds: &'a [u64],
}

impl HeapPolicy<'_> {
    fn class_of(&self, footprint: u64) -> u32 {
        self.class_bounds.partition_point(|&b| b < footprint) as u32
    }
}

type OrderKey = (u32, Reverse<u64>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct FreeListHeap {
    nodes: Vec<Node>,
    vacant: Vec<u32>,
    head: u32,
    tail: u32,
    used: FxHashMap<u64, u32>,
    best: BTreeMap<(u64, Reverse<u64>), u32>,
    order: Option<BTreeMap<OrderKey, u32>>,
    cursor: Option<OrderKey>,
    wilderness: u64,
    capacity: u64,
    pending: u32,
    next_stamp: u64,
}

impl FreeListHeap {
    pub fn new(capacity: u64, track_order: bool) -> Self {
        Self {
            nodes: Vec::new(),
            vacant: Vec::new(),
            head: NIL,
            tail: NIL,
            used: FxHashMap::default(),
            best: BTreeMap::new(),
            order: track_order.then(BTreeMap::new),
            cursor: None,
            wilderness: 0,
            capacity,
            pending: 0,
            next_stamp: 0,
        }
    }

    pub fn wilderness(&self) -> u64 {
        self.wilderness
    }

    pub fn pending(&self) -> u32 {
        self.pending
    }

    pub fn next_fit_cursor(&self) -> Option<(u32, u64)> {
        self.cursor.map(|(c, Reverse(s))| (c, s))
    }

    pub fn node(&self, n: u32) -> &Node {
        &self.nodes[n as usize]
    }

    /// Node allocated at `offset`, if any.
    pub fn used_node(&self, offset: u64) -> Option<&Node> {
        self.used.get(&offset).map(|&n| &self.nodes[n as usize])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Node> + '_ {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            if cur == NIL {
                return None;
            }
            let node = &self.nodes[cur as usize];
            cur = node.next;
            Some(node)
        })
    }

    /// Free blocks in free-list order: class ascending, most recent first.
    pub fn free_list_order(&self, policy: &HeapPolicy<'_>) -> Vec<(u64, u64)> {
        let mut entries: Vec<(OrderKey, u32)> = self
            .best
            .iter()
            .map(|(&(fp, stamp), &n)| ((policy.class_of(fp), stamp), n))
            .collect();
        entries.sort_unstable_by_key(|e| e.0);
        entries
            .into_iter()
            .map(|(_, n)| {
                let node = &self.nodes[n as usize];
                (node.offset, node.footprint)
            })
            .collect()
    }

    fn new_node(&mut self, offset: u64, footprint: u64, state: NodeState) -> u32 {
        let node = Node {
            offset,
            footprint,
            prev: NIL,
            next: NIL,
            state,
        };
        match self.vacant.pop() {
            Some(i) => {
                self.nodes[i as usize] = node;
                i
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        }
    }

    fn link_after(&mut self, at: u32, n: u32) {
        let next = self.nodes[at as usize].next;
        self.nodes[n as usize].prev = at;
        self.nodes[n as usize].next = next;
        self.nodes[at as usize].next = n;
        if next == NIL {
            self.tail = n;
        } else {
            self.nodes[next as usize].prev = n;
        }
    }

    fn push_tail(&mut self, n: u32) {
        if self.tail == NIL {
            self.head = n;
            self.tail = n;
        } else {
            self.link_after(self.tail, n);
        }
    }

    fn unlink_and_vacate(&mut self, n: u32) {
        let Node { prev, next, .. } = self.nodes[n as usize];
        if prev == NIL {
            self.head = next;
        } else {
            self.nodes[prev as usize].next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.nodes[next as usize].prev = prev;
        }
        self.nodes[n as usize].state = NodeState::Vacant;
        self.vacant.push(n);
    }

    fn is_free(&self, n: u32) -> bool {
        n != NIL && matches!(self.nodes[n as usize].state, NodeState::Free { .. })
    }

    fn insert_free(&mut self, policy: &HeapPolicy<'_>, n: u32) {
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        let node = &mut self.nodes[n as usize];
        node.state = NodeState::Free { stamp };
        let fp = node.footprint;
        self.best.insert((fp, Reverse(stamp)), n);
        if let Some(order) = &mut self.order {
            order.insert((policy.class_of(fp), Reverse(stamp)), n);
        }
    }

    fn remove_free(&mut self, policy: &HeapPolicy<'_>, n: u32) {
        let node = &self.nodes[n as usize];
        let NodeState::Free { stamp } = node.state else {
            unreachable!("remove_free on a non-free block");
        };
        let fp = node.footprint;
        self.best.remove(&(fp, Reverse(stamp)));
        if let Some(order) = &mut self.order {
            order.remove(&(policy.class_of(fp), Reverse(stamp)));
        }
    }

    /// Select a free block for `footprint` bytes. Only the next-fit cursor
    /// is mutated.
    pub fn find_fit(&mut self, policy: &HeapPolicy<'_>, footprint: u64) -> Option<u32> {
        let fits = |n: &u32| self.nodes[*n as usize].footprint >= footprint;
        match policy.fit {
            FitPolicy::BestFit => self
                .best
                .range((footprint, Reverse(u64::MAX))..)
                .next()
                .map(|(_, &n)| n),
            FitPolicy::FirstFit => {
                let order = self.order.as_ref().expect("first fit tracks list order");
                let start = (policy.class_of(footprint), Reverse(u64::MAX));
                order.range(start..).map(|(_, n)| *n).find(fits)
            }
            FitPolicy::NextFit => {
                let order = self.order.as_ref().expect("next fit tracks list order");
                let found = match self.cursor {
                    Some(c) => order
                        .range((Bound::Excluded(c), Bound::Unbounded))
                        .chain(order.range(..=c))
                        .find(|(_, n)| fits(n)),
                    None => order.iter().find(|(_, n)| fits(n)),
                };
                let (key, n) = found.map(|(k, n)| (*k, *n))?;
                self.cursor = Some(key);
                Some(n)
            }
        }
    }

    /// Place a block of `footprint` bytes, returning its offset.
    pub fn alloc_node(
        &mut self,
        policy: &HeapPolicy<'_>,
        footprint: u64,
        state: NodeState,
    ) -> Result<u64, AllocError> {
        let (offset, node) = match self.find_fit(policy, footprint) {
            Some(n) => {
                self.remove_free(policy, n);
                let Node {
                    offset,
                    footprint: have,
                    ..
                } = self.nodes[n as usize];
                let excess = have - footprint;
                if excess > 0 && excess >= policy.min_split {
                    match policy.split {
                        SplitFrom::Front => {
                            let node = &mut self.nodes[n as usize];
                            node.footprint = footprint;
                            node.state = state;
                            let rest = self.new_node(offset + footprint, excess, NodeState::Vacant);
                            self.link_after(n, rest);
                            self.insert_free(policy, rest);
                            (offset, n)
                        }
                        SplitFrom::End => {
                            self.nodes[n as usize].footprint = excess;
                            self.insert_free(policy, n);
                            let placed = self.new_node(offset + excess, footprint, state);
                            self.link_after(n, placed);
                            (offset + excess, placed)
                        }
                    }
                } else {
                    self.nodes[n as usize].state = state;
                    (offset, n)
                }
            }
            None => {
                let offset = self.wilderness;
                let available = self.capacity.saturating_sub(offset);
                if footprint > available {
                    return Err(AllocError::OutOfMemory {
                        requested: footprint,
                        available,
                    });
                }
                let n = self.new_node(offset, footprint, state);
                self.push_tail(n);
                self.wilderness = offset + footprint;
                (offset, n)
            }
        };
        self.used.insert(offset, node);
        Ok(offset)
    }

    /// Release the used block at `offset`. Run blocks are left alone.
    pub fn free_node(&mut self, policy: &HeapPolicy<'_>, offset: u64) -> Result<(), AllocError> {
        self.free_matching(policy, offset, |s| matches!(s, NodeState::Used { .. }))
    }

    /// Release the run block at `offset`.
    pub fn free_run(&mut self, policy: &HeapPolicy<'_>, offset: u64) -> Result<(), AllocError> {
        self.free_matching(policy, offset, |s| matches!(s, NodeState::Run { .. }))
    }

    fn free_matching(
        &mut self,
        policy: &HeapPolicy<'_>,
        offset: u64,
        accept: impl Fn(NodeState) -> bool,
    ) -> Result<(), AllocError> {
        match self.used.get(&offset) {
            Some(&n) if accept(self.nodes[n as usize].state) => {
                self.used.remove(&offset);
                self.release(policy, n);
                Ok(())
            }
            _ => Err(AllocError::InvalidFree(offset)),
        }
    }

    /// Return node `n` (not tracked as used) to the free structures.
    fn release(&mut self, policy: &HeapPolicy<'_>, n: u32) {
        match policy.coalescing {
            Coalescing::Immediate => {
                let mut n = n;
                let prev = self.nodes[n as usize].prev;
                if self.is_free(prev) {
                    self.remove_free(policy, prev);
                    self.nodes[prev as usize].footprint += self.nodes[n as usize].footprint;
                    self.unlink_and_vacate(n);
                    n = prev;
                }
                let next = self.nodes[n as usize].next;
                if self.is_free(next) {
                    self.remove_free(policy, next);
                    self.nodes[n as usize].footprint += self.nodes[next as usize].footprint;
                    self.unlink_and_vacate(next);
                }
                if self.nodes[n as usize].next == NIL {
                    // Adjacent to the wilderness: give the bytes back.
                    self.wilderness = self.nodes[n as usize].offset;
                    self.unlink_and_vacate(n);
                } else {
                    self.insert_free(policy, n);
                }
            }
            Coalescing::Delayed { threshold } => {
                let Node { prev, next, .. } = self.nodes[n as usize];
                let pairs = u32::from(self.is_free(prev)) + u32::from(self.is_free(next));
                self.insert_free(policy, n);
                self.pending += pairs;
                if self.pending >= threshold {
                    self.coalesce_all(policy);
                }
            }
            Coalescing::Never => self.insert_free(policy, n),
        }
    }

    /// Merge every run of adjacent free blocks.
    pub fn coalesce_all(&mut self, policy: &HeapPolicy<'_>) {
        let mut cur = self.head;
        while cur != NIL {
            if self.is_free(cur) && self.is_free(self.nodes[cur as usize].next) {
                self.remove_free(policy, cur);
                while self.is_free(self.nodes[cur as usize].next) {
                    let next = self.nodes[cur as usize].next;
                    self.remove_free(policy, next);
                    self.nodes[cur as usize].footprint += self.nodes[next as usize].footprint;
                    self.unlink_and_vacate(next);
                }
                self.insert_free(policy, cur);
            }
            cur = self.nodes[cur as usize].next;
        }
        self.pending = 0;
    }

    /// Try to resize the used block at `offset` without moving it.
    pub fn resize_in_place(
        &mut self,
        policy: &HeapPolicy<'_>,
        offset: u64,
        new_footprint: u64,
    ) -> bool {
        let Some(&n) = self.used.get(&offset) else {
            return false;
        };
        let old = self.nodes[n as usize].footprint;
        if new_footprint == old {
            return true;
        }
        if new_footprint < old {
            let excess = old - new_footprint;
            if excess >= policy.min_split {
                self.nodes[n as usize].footprint = new_footprint;
                let rest = self.new_node(offset + new_footprint, excess, NodeState::Vacant);
                self.link_after(n, rest);
                self.release(policy, rest);
            }
            return true;
        }
        let next = self.nodes[n as usize].next;
        if !self.is_free(next) || old + self.nodes[next as usize].footprint < new_footprint {
            return false;
        }
        self.remove_free(policy, next);
        let total = old + self.nodes[next as usize].footprint;
        let rest = total - new_footprint;
        if rest > 0 && rest >= policy.min_split {
            self.nodes[n as usize].footprint = new_footprint;
            let next_node = &mut self.nodes[next as usize];
            next_node.offset = offset + new_footprint;
            next_node.footprint = rest;
            self.insert_free(policy, next);
        } else {
            self.nodes[n as usize].footprint = total;
            self.unlink_and_vacate(next);
        }
        true
    }

    /// Structural self-check; returns a description of the first violation.
    pub fn check(&self, policy: &HeapPolicy<'_>, alignment: u64) -> Result<(), String> {
        let mut expected = 0u64;
        let mut free_count = 0usize;
        let mut used_count = 0usize;
        let mut adjacent_free = 0u32;
        let mut prev_free = false;
        let mut prev = NIL;
        let mut cur = self.head;
        while cur != NIL {
            let node = &self.nodes[cur as usize];
            if node.prev != prev {
                return Err(format!("broken back link at offset {}", node.offset));
            }
            if node.offset != expected {
                return Err(format!(
                    "gap or overlap: block at {} but previous block ends at {expected}",
                    node.offset
                ));
            }
            if node.footprint == 0 {
                return Err(format!("zero footprint block at {}", node.offset));
            }
            if !node.offset.is_multiple_of(alignment) || !node.footprint.is_multiple_of(alignment) {
                return Err(format!(
                    "misaligned block ({}, {}) for alignment {alignment}",
                    node.offset, node.footprint
                ));
            }
            expected += node.footprint;
            let is_free = match node.state {
                NodeState::Free { stamp } => {
                    free_count += 1;
                    if self.best.get(&(node.footprint, Reverse(stamp))) != Some(&cur) {
                        return Err(format!(
                            "free block at {} missing from its list",
                            node.offset
                        ));
                    }
                    if let Some(order) = &self.order {
                        let key = (policy.class_of(node.footprint), Reverse(stamp));
                        if order.get(&key) != Some(&cur) {
                            return Err(format!(
                                "free block at {} missing from list order",
                                node.offset
                            ));
                        }
                    }
                    true
                }
                NodeState::Used { .. } | NodeState::Run { .. } => {
                    used_count += 1;
                    if self.used.get(&node.offset) != Some(&cur) {
                        return Err(format!("used block at {} not indexed", node.offset));
                    }
                    false
                }
                NodeState::Vacant => {
                    return Err(format!("vacant node linked at {}", node.offset));
                }
            };
            if is_free && prev_free {
                adjacent_free += 1;
            }
            prev_free = is_free;
            prev = cur;
            cur = node.next;
        }
        if prev != self.tail {
            return Err("tail pointer out of sync".into());
        }
        if expected != self.wilderness {
            return Err(format!(
                "blocks cover {expected} bytes but wilderness is at {}",
                self.wilderness
            ));
        }
        if free_count != self.best.len() {
            return Err(format!(
                "{} free-list entries for {free_count} free blocks",
                self.best.len()
            ));
        }
        if let Some(order) = &self.order {
            if order.len() != free_count {
                return Err("list order out of sync with free blocks".into());
            }
        }
        if used_count != self.used.len() {
            return Err("used index out of sync with blocks".into());
        }
        match policy.coalescing {
            Coalescing::Immediate => {
                if adjacent_free > 0 {
                    return Err(format!(
                        "{adjacent_free} adjacent free pairs under immediate coalescing"
                    ));
                }
                if prev_free {
                    return Err("free block left next to the wilderness".into());
                }
            }
            Coalescing::Delayed { threshold } => {
                if adjacent_free > threshold {
                    return Err(format!(
                        "{adjacent_free} adjacent free pairs exceed the delayed threshold {threshold}"
                    ));
                }
            }
            Coalescing::Never => {}
        }
        Ok(())
    }
}
