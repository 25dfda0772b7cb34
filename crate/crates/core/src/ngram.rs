//! Adaptive multi-level n-gram memory.
//!
//! One count table per order `n` in `2..=n_max`. Each table maps the `n - 1`
//! preceding tokens to the tokens seen after them, with a count and the
//! ordinal of the last time that window was reinforced. Counts are raw
//! frequencies; a query returns the count-argmax, which is also the
//! probability-argmax since all candidates share a denominator.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NgramError {
    #[error("n_max must be at least 2, got {0}")]
    OrderTooSmall(usize),
    #[error("order {n} outside the store's range 2..={n_max}")]
    OrderOutOfRange { n: usize, n_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextRecord {
    pub count: u64,
    pub last_update_ordinal: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextEntry {
    next: HashMap<TokenId, NextRecord>,
    last_ordinal: u64,
}

/// Count table for a single order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramLevel {
    order: usize,
    table: HashMap<Vec<TokenId>, ContextEntry>,
}

impl NgramLevel {
    fn new(order: usize) -> Self {
        Self {
            order,
            table: HashMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn context_count(&self) -> usize {
        self.table.len()
    }

    pub fn record(&self, context: &[TokenId], next: TokenId) -> Option<NextRecord> {
        self.table.get(context)?.next.get(&next).copied()
    }

    /// Count-argmax; ties go to the most recently reinforced token, then the
    /// smaller id.
    fn best_next(&self, context: &[TokenId]) -> Option<(TokenId, u64)> {
        let entry = self.table.get(context)?;
        entry
            .next
            .iter()
            .max_by(|(ta, a), (tb, b)| {
                a.count
                    .cmp(&b.count)
                    .then(a.last_update_ordinal.cmp(&b.last_update_ordinal))
                    .then(tb.cmp(ta))
            })
            .map(|(&t, r)| (t, r.count))
    }

    fn bump(&mut self, context: &[TokenId], next: TokenId, ordinal: u64) {
        let entry = match self.table.get_mut(context) {
            Some(e) => e,
            None => self.table.entry(context.to_vec()).or_default(),
        };
        entry.last_ordinal = ordinal;
        let rec = entry.next.entry(next).or_insert(NextRecord {
            count: 0,
            last_update_ordinal: ordinal,
        });
        rec.count += 1;
        rec.last_update_ordinal = ordinal;
    }

    fn evict_to(&mut self, cap: usize) {
        while self.table.len() > cap {
            let oldest = self
                .table
                .iter()
                .min_by_key(|(_, e)| e.last_ordinal)
                .map(|(k, _)| k.clone())
                .expect("non-empty table");
            self.table.remove(&oldest);
        }
    }
}

/// A successful lookup: the predicted token and the order that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryHit {
    pub token: TokenId,
    pub level_n: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLevelNgram {
    levels: Vec<NgramLevel>,
    committed: Vec<TokenId>,
    global_ordinal: u64,
    runtime_update_enabled: bool,
    max_contexts: Option<usize>,
}

impl MultiLevelNgram {
    /// Builds a store over `token_ids` with one table per order in `2..=n_max`.
    ///
    /// Windows are counted in sequence order, so this is equivalent to
    /// starting empty and calling [`update`](Self::update) once per token.
    pub fn initialize(token_ids: &[TokenId], n_max: usize) -> Result<Self, NgramError> {
        if n_max < 2 {
            return Err(NgramError::OrderTooSmall(n_max));
        }
        let mut store = Self {
            levels: (2..=n_max).map(NgramLevel::new).collect(),
            committed: Vec::with_capacity(token_ids.len()),
            global_ordinal: 0,
            runtime_update_enabled: true,
            max_contexts: None,
        };
        for &t in token_ids {
            store.push_and_count(t);
        }
        Ok(store)
    }

    pub fn with_runtime_update(mut self, enabled: bool) -> Self {
        self.runtime_update_enabled = enabled;
        self
    }

    /// Caps the number of contexts kept per level, evicting the least recently
    /// updated ones. With a cap the count-equivalence property no longer holds.
    pub fn with_max_contexts(mut self, cap: Option<usize>) -> Self {
        self.max_contexts = cap;
        if let Some(cap) = cap {
            for level in &mut self.levels {
                level.evict_to(cap);
            }
        }
        self
    }

    pub fn n_max(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn runtime_update_enabled(&self) -> bool {
        self.runtime_update_enabled
    }

    pub fn levels(&self) -> &[NgramLevel] {
        &self.levels
    }

    pub fn update(&mut self, new_token: TokenId) {
        if self.runtime_update_enabled {
            self.push_and_count(new_token);
        } else {
            self.committed.push(new_token);
        }
    }

    fn push_and_count(&mut self, token: TokenId) {
        self.committed.push(token);
        let len = self.committed.len();
        for level in &mut self.levels {
            let n = level.order;
            if len < n {
                break;
            }
            self.global_ordinal += 1;
            let context = &self.committed[len - n..len - 1];
            level.bump(context, token, self.global_ordinal);
            if let Some(cap) = self.max_contexts {
                level.evict_to(cap);
            }
        }
    }

    fn level(&self, n: usize) -> Result<&NgramLevel, NgramError> {
        if n < 2 || n > self.n_max() {
            return Err(NgramError::OrderOutOfRange {
                n,
                n_max: self.n_max(),
            });
        }
        Ok(&self.levels[n - 2])
    }

    /// Predicts the next token from the last `n - 1` tokens of `context`.
    /// Returns `None` for an unseen context or one shorter than `n - 1`.
    pub fn query(&self, context: &[TokenId], n: usize) -> Result<Option<TokenId>, NgramError> {
        Ok(self.query_level(context, n)?.map(|(t, _)| t))
    }

    fn query_level(
        &self,
        context: &[TokenId],
        n: usize,
    ) -> Result<Option<(TokenId, u64)>, NgramError> {
        let level = self.level(n)?;
        if context.len() < n - 1 {
            return Ok(None);
        }
        Ok(level.best_next(&context[context.len() - (n - 1)..]))
    }

    /// Highest-order match first, falling back one order at a time.
    pub fn query_multilevel(&self, context_tail: &[TokenId]) -> Option<QueryHit> {
        (2..=self.n_max()).rev().find_map(|n| self.query_at(context_tail, n))
    }

    /// Single-order lookup that never errors for an in-range `n`.
    pub fn query_at(&self, context_tail: &[TokenId], n: usize) -> Option<QueryHit> {
        self.query_level(context_tail, n)
            .ok()
            .flatten()
            .map(|(token, count)| QueryHit {
                token,
                level_n: n,
                count,
            })
    }

    pub fn count_of(&self, n: usize, context: &[TokenId], next: TokenId) -> Result<u64, NgramError> {
        Ok(self
            .level(n)?
            .record(context, next)
            .map_or(0, |r| r.count))
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let levels = self
            .levels
            .iter()
            .map(|level| {
                let mut entries: Vec<SnapshotEntry> = level
                    .table
                    .iter()
                    .flat_map(|(ctx, e)| {
                        e.next.iter().map(move |(&next, r)| SnapshotEntry {
                            context: ctx.clone(),
                            next,
                            count: r.count,
                            ordinal: r.last_update_ordinal,
                        })
                    })
                    .collect();
                entries.sort_by(|a, b| a.context.cmp(&b.context).then(a.next.cmp(&b.next)));
                SnapshotLevel {
                    n: level.order,
                    entries,
                }
            })
            .collect();
        StoreSnapshot {
            n_max: self.n_max(),
            levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub context: Vec<TokenId>,
    pub next: TokenId,
    pub count: u64,
    pub ordinal: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotLevel {
    pub n: usize,
    pub entries: Vec<SnapshotEntry>,
}

/// Serializable view of a store, entries sorted by (context, next).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub n_max: usize,
    pub levels: Vec<SnapshotLevel>,
}

impl StoreSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}
