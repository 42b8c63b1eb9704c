//! Heap allocator simulation and heap layout manipulation search.

pub mod alloc;
pub mod benchgen;
pub mod driver;
pub mod harness;
pub mod rng;
pub mod search;
pub mod template;
