//! Deterministic autoregressive model contract and the built-in oracles.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::ExternalOracle;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("extend called with an empty batch")]
    EmptyBatch,
    #[error("cannot connect to {endpoint}: {source}")]
    Connect {
        endpoint: String,
        source: std::io::Error,
    },
    #[error("timed out waiting for the oracle after {consumed} consumed tokens")]
    Timeout { consumed: usize },
    #[error("transport failure after {consumed} consumed tokens: {message}")]
    Transport { consumed: usize, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("oracle reported an error: {0}")]
    Remote(String),
    #[error("invalid oracle parameters: {0}")]
    InvalidSpec(String),
}

/// A greedy autoregressive predictor with an internal cache of consumed tokens.
///
/// `extend` consumes a batch and returns one prediction per consumed token:
/// prediction `j` is the argmax next token given everything consumed up to
/// and including `tokens[j]`. Predictions must not depend on how the stream
/// was chunked into `extend` calls.
pub trait ModelOracle {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<TokenId>, OracleError>;

    fn reset(&mut self) -> Result<(), OracleError>;

    fn consumed_len(&self) -> usize;

    /// Drops cached tokens beyond `len`. Returns `Ok(false)` when the oracle
    /// cannot truncate; callers then reset and replay.
    fn truncate_cache(&mut self, _len: usize) -> Result<bool, OracleError> {
        Ok(false)
    }

    fn eos(&self) -> Option<TokenId>;

    fn vocab_size(&self) -> usize;
}

impl<O: ModelOracle + ?Sized> ModelOracle for Box<O> {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<TokenId>, OracleError> {
        (**self).extend(tokens)
    }
    fn reset(&mut self) -> Result<(), OracleError> {
        (**self).reset()
    }
    fn consumed_len(&self) -> usize {
        (**self).consumed_len()
    }
    fn truncate_cache(&mut self, len: usize) -> Result<bool, OracleError> {
        (**self).truncate_cache(len)
    }
    fn eos(&self) -> Option<TokenId> {
        (**self).eos()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
}

/// Teacher-forcing stand-in: predicts by position only.
///
/// Inside the prompt it predicts the next prompt token; after the prompt plus
/// `p` more tokens it predicts `target[p]`, and `eos` once the target is
/// exhausted. Token values never matter, only how many have been consumed.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    prompt: Vec<TokenId>,
    target: Vec<TokenId>,
    eos: TokenId,
    consumed: usize,
}

impl ReplayOracle {
    pub fn new(prompt: Vec<TokenId>, target: Vec<TokenId>, eos: TokenId) -> Result<Self, OracleError> {
        if target.is_empty() {
            return Err(OracleError::InvalidSpec("replay target is empty".into()));
        }
        Ok(Self {
            prompt,
            target,
            eos,
            consumed: 0,
        })
    }

    fn predict_at(&self, consumed_after: usize) -> TokenId {
        if consumed_after < self.prompt.len() {
            return self.prompt[consumed_after];
        }
        self.target
            .get(consumed_after - self.prompt.len())
            .copied()
            .unwrap_or(self.eos)
    }
}

impl ModelOracle for ReplayOracle {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<TokenId>, OracleError> {
        if tokens.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        let start = self.consumed;
        self.consumed += tokens.len();
        Ok((start + 1..=self.consumed).map(|c| self.predict_at(c)).collect())
    }

    fn reset(&mut self) -> Result<(), OracleError> {
        self.consumed = 0;
        Ok(())
    }

    fn consumed_len(&self) -> usize {
        self.consumed
    }

    fn truncate_cache(&mut self, len: usize) -> Result<bool, OracleError> {
        self.consumed = self.consumed.min(len);
        Ok(true)
    }

    fn eos(&self) -> Option<TokenId> {
        Some(self.eos)
    }

    fn vocab_size(&self) -> usize {
        let max = self
            .prompt
            .iter()
            .chain(&self.target)
            .chain(std::iter::once(&self.eos))
            .max()
            .copied()
            .unwrap_or(0);
        max as usize + 1
    }
}

/// Fixed-order count-argmax language model over a token corpus.
#[derive(Debug, Clone)]
pub struct MarkovOracle {
    order: usize,
    seed: u64,
    vocab_size: usize,
    eos: Option<TokenId>,
    table: HashMap<Vec<TokenId>, TokenId>,
    consumed: Vec<TokenId>,
}

impl MarkovOracle {
    pub fn new(corpus: &[TokenId], order: usize, seed: u64) -> Result<Self, OracleError> {
        if order < 1 {
            return Err(OracleError::InvalidSpec("markov order must be at least 1".into()));
        }
        if corpus.len() <= order {
            return Err(OracleError::InvalidSpec(format!(
                "markov corpus of {} tokens is too short for order {order}",
                corpus.len()
            )));
        }
        let mut counts: HashMap<&[TokenId], HashMap<TokenId, u64>> = HashMap::new();
        for w in corpus.windows(order + 1) {
            *counts
                .entry(&w[..order])
                .or_default()
                .entry(w[order])
                .or_insert(0) += 1;
        }
        let table = counts
            .into_iter()
            .map(|(ctx, nexts)| {
                let best = nexts
                    .into_iter()
                    .max_by(|(ta, a), (tb, b)| a.cmp(b).then(tb.cmp(ta)))
                    .map(|(t, _)| t)
                    .expect("non-empty");
                (ctx.to_vec(), best)
            })
            .collect();
        let vocab_size = *corpus.iter().max().expect("non-empty corpus") as usize + 1;
        Ok(Self {
            order,
            seed,
            vocab_size,
            eos: None,
            table,
            consumed: Vec::new(),
        })
    }

    pub fn with_eos(mut self, eos: Option<TokenId>) -> Self {
        self.eos = eos;
        if let Some(e) = eos {
            self.vocab_size = self.vocab_size.max(e as usize + 1);
        }
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn predict_from(&self, history: &[TokenId]) -> TokenId {
        let ctx = &history[history.len().saturating_sub(self.order)..];
        if ctx.len() == self.order {
            if let Some(&t) = self.table.get(ctx) {
                return t;
            }
        }
        (context_hash(self.seed, ctx) % self.vocab_size as u64) as TokenId
    }
}

/// FNV-1a over the seed and context, finished with a splitmix64 mix. Stable
/// across platforms and toolchains, unlike `DefaultHasher`.
fn context_hash(seed: u64, ctx: &[TokenId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &t in ctx {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h ^= ctx.len() as u64;
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl ModelOracle for MarkovOracle {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<TokenId>, OracleError> {
        if tokens.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            self.consumed.push(t);
            out.push(self.predict_from(&self.consumed));
        }
        Ok(out)
    }

    fn reset(&mut self) -> Result<(), OracleError> {
        self.consumed.clear();
        Ok(())
    }

    fn consumed_len(&self) -> usize {
        self.consumed.len()
    }

    fn truncate_cache(&mut self, len: usize) -> Result<bool, OracleError> {
        self.consumed.truncate(len);
        Ok(true)
    }

    fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// How to construct an oracle; every decode run builds a fresh instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleSpec {
    Replay {
        prompt: Vec<TokenId>,
        target: Vec<TokenId>,
        eos: TokenId,
    },
    Markov {
        corpus: Vec<TokenId>,
        order: usize,
        seed: u64,
        #[serde(default)]
        eos: Option<TokenId>,
    },
    External {
        endpoint: String,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
}

impl OracleSpec {
    pub fn build(&self) -> Result<Box<dyn ModelOracle + Send>, OracleError> {
        Ok(match self {
            OracleSpec::Replay { prompt, target, eos } => {
                Box::new(ReplayOracle::new(prompt.clone(), target.clone(), *eos)?)
            }
            OracleSpec::Markov {
                corpus,
                order,
                seed,
                eos,
            } => Box::new(MarkovOracle::new(corpus, *order, *seed)?.with_eos(*eos)),
            OracleSpec::External {
                endpoint,
                timeout_ms,
            } => {
                let timeout = timeout_ms.map(Duration::from_millis);
                Box::new(ExternalOracle::connect_with_timeout(endpoint, timeout)?)
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OracleSpec::Replay { .. } => "replay",
            OracleSpec::Markov { .. } => "markov",
            OracleSpec::External { .. } => "external",
        }
    }

    /// Compact description for trace headers: sizes instead of full token lists.
    pub fn summary(&self) -> serde_json::Value {
        match self {
            OracleSpec::Replay { prompt, target, eos } => serde_json::json!({
                "kind": "replay", "prompt_len": prompt.len(), "target_len": target.len(), "eos": eos,
            }),
            OracleSpec::Markov {
                corpus,
                order,
                seed,
                eos,
            } => serde_json::json!({
                "kind": "markov", "corpus_len": corpus.len(), "order": order, "seed": seed, "eos": eos,
            }),
            OracleSpec::External { endpoint, .. } => serde_json::json!({
                "kind": "external", "endpoint": endpoint,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Prefill,
    Verify,
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CallKind::Prefill => "prefill",
            CallKind::Verify => "verify",
        })
    }
}

/// Affine latency model, in abstract time units.
///
/// A verify call over a batch of `b` tokens costs
/// `verify_base + verify_per_token * b`; the per-token term is small, so
/// checking several drafted tokens costs about as much as decoding one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub prefill_per_token: f64,
    pub verify_base: f64,
    pub verify_per_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_per_token: 0.002,
            verify_base: 1.0,
            verify_per_token: 0.05,
        }
    }
}

impl CostModel {
    /// Every verify call costs exactly one unit and prefill is free, so
    /// simulated time reduces to a count of verify calls.
    pub fn flat() -> Self {
        Self {
            prefill_per_token: 0.0,
            verify_base: 1.0,
            verify_per_token: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("prefill_per_token", self.prefill_per_token),
            ("verify_base", self.verify_base),
            ("verify_per_token", self.verify_per_token),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("cost model field {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn simulate(&self, kind: CallKind, batch_len: usize) -> f64 {
        let b = batch_len as f64;
        match kind {
            CallKind::Prefill => self.prefill_per_token * b,
            CallKind::Verify => self.verify_base + self.verify_per_token * b,
        }
    }
}
