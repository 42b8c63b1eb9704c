use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocatorKind {
    FreeList,
    SegregatedStorage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitPolicy {
    #[default]
    BestFit,
    FirstFit,
    NextFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitFrom {
    #[default]
    Front,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coalescing {
    #[default]
    Immediate,
    /// Merging is deferred until `threshold` adjacent free pairs are pending.
    Delayed {
        threshold: u32,
    },
    Never,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreeListOrg {
    #[default]
    Single,
    Segregated {
        #[serde(rename = "class-upper-bounds")]
        class_upper_bounds: Vec<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LargeStrategy {
    PageBestFit,
    #[default]
    MappedRegion,
}

/// Policy description of one simulated allocator.
///
/// Fields that only make sense for one [`AllocatorKind`] are ignored by the
/// other. Loaded from JSON with kebab-case keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct AllocatorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: AllocatorKind,
    #[serde(default)]
    pub fit_policy: FitPolicy,
    #[serde(default)]
    pub split_from: SplitFrom,
    #[serde(default)]
    pub coalescing: Coalescing,
    #[serde(default)]
    pub free_list_org: FreeListOrg,
    #[serde(default)]
    pub header_bytes: u64,
    #[serde(default = "default_alignment")]
    pub alignment: u64,
    /// Defaults to `alignment + header_bytes` when absent.
    #[serde(default)]
    pub min_split_remainder: Option<u64>,
    /// Requests at or above this size take `large_strategy`; absent means never.
    #[serde(default)]
    pub large_threshold: Option<u64>,
    #[serde(default)]
    pub large_strategy: LargeStrategy,
    /// Requests at or above this size are always mapped, whatever the large strategy.
    #[serde(default)]
    pub mapped_threshold: Option<u64>,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
    #[serde(default)]
    pub size_classes: Vec<u64>,
    #[serde(default = "default_run_pages")]
    pub run_pages: u64,
    /// Return a run to the page heap once its last slot is freed.
    #[serde(default)]
    pub release_empty_runs: bool,
    #[serde(default = "default_capacity")]
    pub capacity: u64,
}

fn default_alignment() -> u64 {
    8
}

fn default_page_size() -> u64 {
    4096
}

fn default_run_pages() -> u64 {
    1
}

fn default_capacity() -> u64 {
    1 << 30
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("alignment {0} is not a power of two")]
    Alignment(u64),
    #[error("page size {0} is not a power of two multiple of the alignment")]
    PageSize(u64),
    #[error("header bytes {0} are not a multiple of the alignment")]
    Header(u64),
    #[error("size classes must be strictly ascending and nonzero")]
    SizeClasses,
    #[error("largest size class {class} is not below the large threshold {threshold}")]
    ClassAboveThreshold { class: u64, threshold: u64 },
    #[error("segregated storage needs at least one size class")]
    NoSizeClasses,
    #[error("free-list class bounds must be strictly ascending and nonzero")]
    ClassBounds,
    #[error("delayed coalescing threshold must be at least 1")]
    DelayedThreshold,
    #[error("run pages must be at least 1")]
    RunPages,
    #[error("capacity {0} is not a multiple of the page size")]
    Capacity(u64),
}

/// Where a request of a given size is served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeRoute {
    /// Free-list block with this footprint.
    Block { footprint: u64 },
    /// Slot in a segregated-storage run.
    Small { class_index: usize, class_size: u64 },
    /// Page-granular best fit in the arena.
    Pages { footprint: u64 },
    /// Mapped region outside the arena.
    Mapped { footprint: u64 },
}

impl SizeRoute {
    /// Bytes the request occupies, as seen by an adjacent allocation.
    pub fn footprint(&self) -> u64 {
        match *self {
            SizeRoute::Block { footprint }
            | SizeRoute::Pages { footprint }
            | SizeRoute::Mapped { footprint } => footprint,
            SizeRoute::Small { class_size, .. } => class_size,
        }
    }
}

#[inline]
pub(crate) fn round_up(value: u64, to: u64) -> u64 {
    debug_assert!(to.is_power_of_two());
    (value + (to - 1)) & !(to - 1)
}

impl AllocatorConfig {
    /// A best-fit, front-splitting, immediately coalescing free list with no
    /// inline metadata.
    pub fn ideal() -> Self {
        Self {
            name: Some("ideal".into()),
            kind: AllocatorKind::FreeList,
            fit_policy: FitPolicy::BestFit,
            split_from: SplitFrom::Front,
            coalescing: Coalescing::Immediate,
            free_list_org: FreeListOrg::Single,
            header_bytes: 0,
            alignment: 8,
            min_split_remainder: None,
            large_threshold: None,
            large_strategy: LargeStrategy::MappedRegion,
            mapped_threshold: None,
            page_size: 4096,
            size_classes: Vec::new(),
            run_pages: 1,
            release_empty_runs: false,
            capacity: default_capacity(),
        }
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or("custom")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.alignment.is_power_of_two() {
            return Err(ConfigError::Alignment(self.alignment));
        }
        if !self.page_size.is_power_of_two() || self.page_size < self.alignment {
            return Err(ConfigError::PageSize(self.page_size));
        }
        if !self.header_bytes.is_multiple_of(self.alignment) {
            return Err(ConfigError::Header(self.header_bytes));
        }
        if !self.capacity.is_multiple_of(self.page_size) {
            return Err(ConfigError::Capacity(self.capacity));
        }
        if let Coalescing::Delayed { threshold } = self.coalescing {
            if threshold < 1 {
                return Err(ConfigError::DelayedThreshold);
            }
        }
        if let FreeListOrg::Segregated { class_upper_bounds } = &self.free_list_org {
            if !strictly_ascending(class_upper_bounds) {
                return Err(ConfigError::ClassBounds);
            }
        }
        if self.kind == AllocatorKind::SegregatedStorage {
            if self.size_classes.is_empty() {
                return Err(ConfigError::NoSizeClasses);
            }
            if self.run_pages < 1 {
                return Err(ConfigError::RunPages);
            }
        }
        if !strictly_ascending(&self.size_classes) {
            return Err(ConfigError::SizeClasses);
        }
        if let (Some(&class), Some(threshold)) = (self.size_classes.last(), self.large_threshold) {
            if class >= threshold {
                return Err(ConfigError::ClassAboveThreshold { class, threshold });
            }
        }
        Ok(())
    }

    pub fn min_split(&self) -> u64 {
        self.min_split_remainder
            .unwrap_or(self.alignment + self.header_bytes)
            .max(1)
    }

    /// Rounding bucket and routing for a request of `size` bytes.
    pub fn size_class_of(&self, size: u64) -> SizeRoute {
        let size = size.max(1);
        let mapped = || SizeRoute::Mapped {
            footprint: round_up(size + self.header_bytes, self.page_size),
        };
        let pages = || SizeRoute::Pages {
            footprint: round_up(size + self.header_bytes, self.page_size),
        };
        if self.mapped_threshold.is_some_and(|t| size >= t) {
            return mapped();
        }
        if self.large_threshold.is_some_and(|t| size >= t) {
            return match self.large_strategy {
                LargeStrategy::PageBestFit => pages(),
                LargeStrategy::MappedRegion => mapped(),
            };
        }
        match self.kind {
            AllocatorKind::FreeList => SizeRoute::Block {
                footprint: self.block_footprint(size),
            },
            AllocatorKind::SegregatedStorage => {
                let idx = self.size_classes.partition_point(|&c| c < size);
                match self.size_classes.get(idx) {
                    Some(&class_size) => SizeRoute::Small {
                        class_index: idx,
                        class_size,
                    },
                    // Between the largest class and the threshold: page level.
                    None => pages(),
                }
            }
        }
    }

    /// Footprint of a free-list block serving `size` user bytes.
    pub fn block_footprint(&self, size: u64) -> u64 {
        round_up(
            round_up(size.max(1), self.alignment) + self.header_bytes,
            self.alignment,
        )
    }

    /// Footprint a request of `size` bytes occupies once placed.
    pub fn footprint(&self, size: u64) -> u64 {
        self.size_class_of(size).footprint()
    }

    /// Bytes reserved for one run of the given class.
    pub fn run_bytes(&self, class_size: u64) -> u64 {
        let min_pages = class_size.div_ceil(self.page_size);
        self.run_pages.max(min_pages) * self.page_size
    }
}

fn strictly_ascending(v: &[u64]) -> bool {
    v.first().is_none_or(|&f| f > 0) && v.windows(2).all(|w| w[0] < w[1])
}
