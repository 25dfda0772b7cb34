//! Lossless speculative decoding with an adaptive multi-level n-gram drafter.
//!
//! The n-gram store ([`ngram`]) learns from the prompt and from every token
//! the model commits. Each decoding step drafts up to `k` tokens from it and
//! checks them against the model ([`oracle`]) in a single batched call
//! ([`decoder`]); the accepted prefix plus the model's own next token are
//! committed, so the output is exactly what greedy decoding would produce.
//! [`metrics`] turns decode traces into hit ratio and speed-up figures.
//!
//! ```
//! use anpd::{anpd_decode, baseline_decode, compute_metrics, CostModel, DecodeOptions, MarkovOracle};
//!
//! # fn main() -> Result<(), Box<dyn std::error::Error>> {
//! let corpus: Vec<u32> = b"abcabcabd".repeat(20).into_iter().map(u32::from).collect();
//! let prompt = corpus[..12].to_vec();
//! let opts = DecodeOptions { max_new_tokens: 100, ..DecodeOptions::default() };
//! let cost = CostModel::default();
//! let base = baseline_decode(&mut MarkovOracle::new(&corpus, 2, 0)?, &prompt, &opts, &cost)?;
//! let fast = anpd_decode(&mut MarkovOracle::new(&corpus, 2, 0)?, &prompt, &opts, &cost)?;
//! assert_eq!(fast.output, base.output);
//! let metrics = compute_metrics(&fast, &base, &cost)?;
//! println!("alpha {:.3}, speed-up {:.2}x", metrics.alpha, metrics.speedup_sim);
//! # Ok(())
//! # }
//! ```

pub mod bundled;
pub mod decoder;
pub mod metrics;
pub mod ngram;
pub mod oracle;
pub mod scenario;
pub mod tokenizer;
pub mod trace;
pub mod wire;

pub type TokenId = u32;

pub use decoder::{
    anpd_decode, anpd_decode_with_store, baseline_decode, build_draft, verify_step, DecodeError,
    DecodeOptions, DecodeResult, StepRecord,
};
pub use metrics::{compute_metrics, sweep, theoretical_bound, BenchCase, RunMetrics, SweepTable};
pub use ngram::{MultiLevelNgram, QueryHit};
pub use oracle::{CostModel, MarkovOracle, ModelOracle, OracleError, OracleSpec, ReplayOracle};
pub use tokenizer::{CorpusStats, Mode, Vocab};
