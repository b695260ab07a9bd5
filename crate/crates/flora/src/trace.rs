//! Sequential-operation accounting.
//!
//! The counter tracks how many separately issued operations a forward pass
//! executes, split by category and by whether the op exists only because an
//! adapter is attached. Counts are incremented by the layer and block code
//! (not by the tensor primitives), so they reflect the deployment execution
//! model: pre-assembled fused weights, one count per issued op.

use std::collections::BTreeMap;

use serde::Serialize;

/// Category of a counted operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCategory {
    /// Matmul against a weight with adapter partitions stacked in.
    FusedMatmul,
    /// Full-size matmul against an unfused base weight.
    PlainMatmul,
    /// Rank-sized adapter-only matmul.
    SmallMatmul,
    /// Element-wise add of two activations.
    Add,
    /// Repeat-and-add (shrink) of a rank-sized output into a full one.
    RepeatAdd,
    /// Concatenation of activations (memory op, e.g. `[x; dx]`).
    Concat,
}

pub const OP_CATEGORIES: [OpCategory; 6] = [
    OpCategory::FusedMatmul,
    OpCategory::PlainMatmul,
    OpCategory::SmallMatmul,
    OpCategory::Add,
    OpCategory::RepeatAdd,
    OpCategory::Concat,
];

impl OpCategory {
    pub fn name(self) -> &'static str {
        match self {
            OpCategory::FusedMatmul => "fused_matmul",
            OpCategory::PlainMatmul => "plain_matmul",
            OpCategory::SmallMatmul => "small_matmul",
            OpCategory::Add => "add",
            OpCategory::RepeatAdd => "repeat_add",
            OpCategory::Concat => "concat",
        }
    }

}

/// Whether an op belongs to the frozen base computation or exists because
/// of the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    Base,
    Adapter,
}

/// Counts per category, one row of the ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CategoryCounts {
    pub fused_matmul: u64,
    pub plain_matmul: u64,
    pub small_matmul: u64,
    pub add: u64,
    pub repeat_add: u64,
    pub concat: u64,
}

impl CategoryCounts {
    fn bump(&mut self, cat: OpCategory) {
        *self.slot_mut(cat) += 1;
    }

    fn slot_mut(&mut self, cat: OpCategory) -> &mut u64 {
        match cat {
            OpCategory::FusedMatmul => &mut self.fused_matmul,
            OpCategory::PlainMatmul => &mut self.plain_matmul,
            OpCategory::SmallMatmul => &mut self.small_matmul,
            OpCategory::Add => &mut self.add,
            OpCategory::RepeatAdd => &mut self.repeat_add,
            OpCategory::Concat => &mut self.concat,
        }
    }

    pub fn get(&self, cat: OpCategory) -> u64 {
        match cat {
            OpCategory::FusedMatmul => self.fused_matmul,
            OpCategory::PlainMatmul => self.plain_matmul,
            OpCategory::SmallMatmul => self.small_matmul,
            OpCategory::Add => self.add,
            OpCategory::RepeatAdd => self.repeat_add,
            OpCategory::Concat => self.concat,
        }
    }

    pub fn total(&self) -> u64 {
        OP_CATEGORIES.iter().map(|&c| self.get(c)).sum()
    }

    pub fn add_counts(&mut self, other: &CategoryCounts) {
        for cat in OP_CATEGORIES {
            *self.slot_mut(cat) += other.get(cat);
        }
    }

    /// Integer division by a positive count; panics in debug builds if any
    /// slot is not divisible (used to normalize per-step counts).
    pub fn div_exact(&self, n: u64) -> CategoryCounts {
        let mut out = CategoryCounts::default();
        for cat in OP_CATEGORIES {
            let v = self.get(cat);
            debug_assert_eq!(v % n, 0, "count {} not divisible by {}", cat.name(), n);
            *out.slot_mut(cat) = v / n;
        }
        out
    }
}

/// Exact, deterministic per-run operation ledger.
#[derive(Debug, Clone, Default, Serialize)]
pub struct OpCounter {
    pub base: CategoryCounts,
    pub adapter: CategoryCounts,
    /// Adapter-attributed counts keyed by the projection (or block site)
    /// that issued them.
    pub adapter_by_site: BTreeMap<String, CategoryCounts>,
}

impl OpCounter {
    pub fn new() -> Self {
        OpCounter::default()
    }

    pub fn record(&mut self, cat: OpCategory, attr: Attribution, site: Option<&str>) {
        match attr {
            Attribution::Base => self.base.bump(cat),
            Attribution::Adapter => {
                self.adapter.bump(cat);
                if let Some(site) = site {
                    self.adapter_by_site
                        .entry(site.to_string())
                        .or_default()
                        .bump(cat);
                }
            }
        }
    }

    pub fn total(&self, cat: OpCategory) -> u64 {
        self.base.get(cat) + self.adapter.get(cat)
    }

    pub fn total_all(&self) -> u64 {
        self.base.total() + self.adapter.total()
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.base.add_counts(&other.base);
        self.adapter.add_counts(&other.adapter);
        for (site, counts) in &other.adapter_by_site {
            self.adapter_by_site
                .entry(site.clone())
                .or_default()
                .add_counts(counts);
        }
    }

    /// Normalizes every count by `n` (e.g. number of decode steps).
    pub fn div_exact(&self, n: u64) -> OpCounter {
        OpCounter {
            base: self.base.div_exact(n),
            adapter: self.adapter.div_exact(n),
            adapter_by_site: self
                .adapter_by_site
                .iter()
                .map(|(k, v)| (k.clone(), v.div_exact(n)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_split_by_attribution_and_site() {
        let mut c = OpCounter::new();
        c.record(OpCategory::PlainMatmul, Attribution::Base, Some("query"));
        c.record(OpCategory::SmallMatmul, Attribution::Adapter, Some("query"));
        c.record(OpCategory::SmallMatmul, Attribution::Adapter, Some("query"));
        c.record(OpCategory::Add, Attribution::Adapter, Some("query"));

        assert_eq!(c.base.plain_matmul, 1);
        assert_eq!(c.adapter.small_matmul, 2);
        let q = &c.adapter_by_site["query"];
        assert_eq!(q.total(), 3);
        // base-attributed ops never land in the per-site adapter map
        assert_eq!(q.plain_matmul, 0);
    }

    #[test]
    fn div_exact_normalizes() {
        let mut c = OpCounter::new();
        for _ in 0..6 {
            c.record(OpCategory::FusedMatmul, Attribution::Base, None);
        }
        assert_eq!(c.div_exact(3).base.fused_matmul, 2);
    }
}
