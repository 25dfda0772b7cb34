//! Greedy autoregressive baseline and n-gram draft/verify decoding.
//!
//! Both loops share one step shape: commit the carried token (the model's
//! own prediction), optionally draft from the n-gram store, then issue one
//! verify call whose last relevant prediction becomes the next carried token.
//! The baseline never drafts, so every verify batch holds a single token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ngram::{MultiLevelNgram, NgramError};
use crate::oracle::{CallKind, CostModel, ModelOracle, OracleError};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode options: {0}")]
    InvalidOptions(String),
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("oracle failed during {stage} (step {step}): {source}")]
    Oracle {
        stage: &'static str,
        step: usize,
        #[source]
        source: OracleError,
    },
    #[error(transparent)]
    Ngram(#[from] NgramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    /// Highest n-gram order; tables exist for every order in `2..=n_max`.
    pub n_max: usize,
    /// Maximum drafted tokens per step.
    pub k_draft: usize,
    pub max_new_tokens: usize,
    /// Feed committed tokens back into the n-gram store during generation.
    pub runtime_update: bool,
    pub stop_at_eos: bool,
    /// Query only at `n_max`, with no lower-order fallback.
    pub fixed_level_only: bool,
    /// Per-level context cap for the n-gram store; `None` is unbounded.
    pub max_contexts: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            n_max: 5,
            k_draft: 7,
            max_new_tokens: 256,
            runtime_update: true,
            stop_at_eos: true,
            fixed_level_only: false,
            max_contexts: None,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.n_max < 2 {
            return Err(DecodeError::InvalidOptions(format!(
                "n_max must be >= 2, got {}",
                self.n_max
            )));
        }
        if self.k_draft < 1 {
            return Err(DecodeError::InvalidOptions(format!(
                "k_draft must be >= 1, got {}",
                self.k_draft
            )));
        }
        if self.max_contexts == Some(0) {
            return Err(DecodeError::InvalidOptions("max_contexts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// Speculated tokens, not including the carried token.
    pub drafted: Vec<TokenId>,
    /// Matched order per drafted token, with a trailing 0 when a query miss
    /// cut the draft short of `k_draft`.
    pub draft_levels: Vec<usize>,
    pub accepted_count: usize,
    /// The carried token followed by the accepted drafts.
    pub committed_this_step: Vec<TokenId>,
    pub verify_batch_len: usize,
    pub sim_time: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTotals {
    pub proposed_draft_tokens: usize,
    pub accepted_draft_tokens: usize,
    pub llm_calls: usize,
    /// Extend calls spent re-feeding the cache of oracles that cannot truncate.
    pub replay_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub output: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub prompt_len: usize,
    pub prefill_sim_time: f64,
    pub totals: DecodeTotals,
    pub k_draft: usize,
    pub n_max: usize,
}

impl DecodeResult {
    pub fn verify_sim_time(&self) -> f64 {
        self.steps.iter().map(|s| s.sim_time).sum()
    }

    pub fn total_sim_time(&self) -> f64 {
        self.prefill_sim_time + self.verify_sim_time()
    }
}

/// Result of drafting: tokens with the order that produced each, and whether
/// a query miss ended the draft early.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Draft {
    pub tokens: Vec<TokenId>,
    pub levels: Vec<usize>,
    pub truncated: bool,
}

impl Draft {
    fn trace_levels(&self) -> Vec<usize> {
        let mut levels = self.levels.clone();
        if self.truncated {
            levels.push(0);
        }
        levels
    }
}

/// Chains up to `k_draft` n-gram queries. Each query sees the committed tail
/// extended by the tokens drafted so far; the store is not modified.
pub fn build_draft(
    store: &MultiLevelNgram,
    committed_tail: &[TokenId],
    k_draft: usize,
    fixed_level_only: bool,
) -> Draft {
    let n_max = store.n_max();
    let keep = committed_tail.len().min(n_max - 1);
    let mut context: Vec<TokenId> = committed_tail[committed_tail.len() - keep..].to_vec();
    let mut draft = Draft::default();
    for _ in 0..k_draft {
        let hit = if fixed_level_only {
            store.query_at(&context, n_max)
        } else {
            store.query_multilevel(&context)
        };
        let Some(hit) = hit else {
            draft.truncated = true;
            break;
        };
        draft.tokens.push(hit.token);
        draft.levels.push(hit.level_n);
        context.push(hit.token);
    }
    draft
}

/// Outcome of one verification call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub accepted_count: usize,
    pub next_carried: TokenId,
    pub predictions: Vec<TokenId>,
}

/// Feeds `[carried] ++ drafted` in one call and accepts the longest prefix of
/// `drafted` that the oracle would have produced itself. The next carried
/// token is the oracle's prediction right after the accepted prefix: the
/// correction on a mismatch, or a bonus token when everything matched.
pub fn verify_step(
    oracle: &mut dyn ModelOracle,
    carried: TokenId,
    drafted: &[TokenId],
) -> Result<Verification, OracleError> {
    let mut batch = Vec::with_capacity(drafted.len() + 1);
    batch.push(carried);
    batch.extend_from_slice(drafted);
    let predictions = oracle.extend(&batch)?;
    if predictions.len() != batch.len() {
        return Err(OracleError::Protocol(format!(
            "oracle returned {} predictions for a batch of {}",
            predictions.len(),
            batch.len()
        )));
    }
    let accepted_count = drafted
        .iter()
        .zip(&predictions)
        .take_while(|(d, p)| d == p)
        .count();
    Ok(Verification {
        accepted_count,
        next_carried: predictions[accepted_count],
        predictions,
    })
}

fn oracle_err(stage: &'static str, step: usize) -> impl FnOnce(OracleError) -> DecodeError {
    move |source| DecodeError::Oracle {
        stage,
        step,
        source,
    }
}

/// Shared bookkeeping for both decoding loops.
struct Session<'a> {
    oracle: &'a mut dyn ModelOracle,
    prompt: &'a [TokenId],
    options: DecodeOptions,
    cost: CostModel,
    eos: Option<TokenId>,
    output: Vec<TokenId>,
    steps: Vec<StepRecord>,
    totals: DecodeTotals,
}

impl<'a> Session<'a> {
    fn start(
        oracle: &'a mut dyn ModelOracle,
        prompt: &'a [TokenId],
        options: &DecodeOptions,
        cost: &CostModel,
    ) -> Result<(Self, TokenId), DecodeError> {
        if prompt.is_empty() {
            return Err(DecodeError::EmptyPrompt);
        }
        cost.validate().map_err(DecodeError::InvalidOptions)?;
        oracle.reset().map_err(oracle_err("reset", 0))?;
        let preds = oracle.extend(prompt).map_err(oracle_err("prefill", 0))?;
        let carried = *preds.last().ok_or_else(|| DecodeError::Oracle {
            stage: "prefill",
            step: 0,
            source: OracleError::Protocol("prefill returned no predictions".into()),
        })?;
        let eos = if options.stop_at_eos { oracle.eos() } else { None };
        Ok((
            Self {
                oracle,
                prompt,
                options: *options,
                cost: *cost,
                eos,
                output: Vec::new(),
                steps: Vec::new(),
                totals: DecodeTotals {
                    llm_calls: 1,
                    ..DecodeTotals::default()
                },
            },
            carried,
        ))
    }

    fn done(&self) -> bool {
        self.output.len() >= self.options.max_new_tokens
            || (self.eos.is_some() && self.output.last().copied() == self.eos)
    }

    /// Brings the oracle cache back to `prompt ++ output[..len-1]`, the state
    /// expected right before a verify call that starts with the carried token.
    fn rollback(&mut self, step: usize) -> Result<(), DecodeError> {
        let want = self.prompt.len() + self.output.len() - 1;
        if self.oracle.consumed_len() == want {
            return Ok(());
        }
        if self
            .oracle
            .truncate_cache(want)
            .map_err(oracle_err("truncate", step))?
            && self.oracle.consumed_len() == want
        {
            return Ok(());
        }
        self.oracle.reset().map_err(oracle_err("reset", step))?;
        let mut history = self.prompt.to_vec();
        history.extend_from_slice(&self.output[..self.output.len() - 1]);
        self.oracle.extend(&history).map_err(oracle_err("replay", step))?;
        self.totals.replay_calls += 1;
        Ok(())
    }

    fn finish(self) -> DecodeResult {
        DecodeResult {
            output: self.output,
            steps: self.steps,
            prompt_len: self.prompt.len(),
            prefill_sim_time: self.cost.simulate(CallKind::Prefill, self.prompt.len()),
            totals: self.totals,
            k_draft: self.options.k_draft,
            n_max: self.options.n_max,
        }
    }
}

/// Plain greedy decoding: prefill, then one single-token call per new token.
pub fn baseline_decode(
    oracle: &mut dyn ModelOracle,
    prompt: &[TokenId],
    options: &DecodeOptions,
    cost: &CostModel,
) -> Result<DecodeResult, DecodeError> {
    let (mut s, mut carried) = Session::start(oracle, prompt, options, cost)?;
    while !s.done() {
        let step = s.steps.len();
        s.output.push(carried);
        let preds = s.oracle.extend(&[carried]).map_err(oracle_err("verify", step))?;
        s.totals.llm_calls += 1;
        s.steps.push(StepRecord {
            step_index: step,
            drafted: Vec::new(),
            draft_levels: Vec::new(),
            accepted_count: 0,
            committed_this_step: vec![carried],
            verify_batch_len: 1,
            sim_time: s.cost.simulate(CallKind::Verify, 1),
        });
        carried = *preds.last().ok_or_else(|| DecodeError::Oracle {
            stage: "verify",
            step,
            source: OracleError::Protocol("empty prediction batch".into()),
        })?;
    }
    Ok(s.finish())
}

/// Draft/verify decoding. The output always equals [`baseline_decode`]'s.
pub fn anpd_decode(
    oracle: &mut dyn ModelOracle,
    prompt: &[TokenId],
    options: &DecodeOptions,
    cost: &CostModel,
) -> Result<DecodeResult, DecodeError> {
    anpd_decode_with_store(oracle, prompt, options, cost).map(|(r, _)| r)
}

/// Like [`anpd_decode`], also returning the final n-gram store.
pub fn anpd_decode_with_store(
    oracle: &mut dyn ModelOracle,
    prompt: &[TokenId],
    options: &DecodeOptions,
    cost: &CostModel,
) -> Result<(DecodeResult, MultiLevelNgram), DecodeError> {
    options.validate()?;
    let mut store = MultiLevelNgram::initialize(prompt, options.n_max)?
        .with_runtime_update(options.runtime_update)
        .with_max_contexts(options.max_contexts);
    let (mut s, mut carried) = Session::start(oracle, prompt, options, cost)?;

    while !s.done() {
        let step = s.steps.len();
        s.output.push(carried);
        store.update(carried);
        let mut committed = vec![carried];

        // Nothing drafted once generation is over; the call still happens so
        // step accounting matches the baseline.
        let draft = if s.done() {
            Draft::default()
        } else {
            build_draft(
                &store,
                store.committed(),
                options.k_draft,
                options.fixed_level_only,
            )
        };

        s.rollback(step)?;
        let v = verify_step(s.oracle, carried, &draft.tokens).map_err(oracle_err("verify", step))?;
        s.totals.llm_calls += 1;

        let mut accepted = 0;
        for &tok in &draft.tokens[..v.accepted_count] {
            if s.done() {
                break;
            }
            s.output.push(tok);
            store.update(tok);
            committed.push(tok);
            accepted += 1;
        }
        s.totals.proposed_draft_tokens += draft.tokens.len();
        s.totals.accepted_draft_tokens += accepted;
        let batch = draft.tokens.len() + 1;
        s.steps.push(StepRecord {
            step_index: step,
            drafted: draft.tokens.clone(),
            draft_levels: draft.trace_levels(),
            accepted_count: accepted,
            committed_this_step: committed,
            verify_batch_len: batch,
            sim_time: s.cost.simulate(CallKind::Verify, batch),
        });
        carried = v.predictions[accepted];
    }
    Ok((s.finish(), store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{MarkovOracle, ReplayOracle};

    fn opts(n: usize, k: usize, m: usize) -> DecodeOptions {
        DecodeOptions {
            n_max: n,
            k_draft: k,
            max_new_tokens: m,
            ..DecodeOptions::default()
        }
    }

    #[test]
    fn baseline_follows_replay_target() {
        let mut o = ReplayOracle::new(vec![1], vec![5, 6, 7], 0).unwrap();
        let r = baseline_decode(&mut o, &[1], &opts(2, 1, 3), &CostModel::default()).unwrap();
        assert_eq!(r.output, vec![5, 6, 7]);
        assert_eq!(r.totals.llm_calls, 4);
        assert!(r.steps.iter().all(|s| s.verify_batch_len == 1));
    }

    #[test]
    fn baseline_stops_at_eos() {
        let mut o = ReplayOracle::new(vec![1], vec![5, 6], 0).unwrap();
        let r = baseline_decode(&mut o, &[1], &opts(2, 1, 10), &CostModel::default()).unwrap();
        assert_eq!(r.output, vec![5, 6, 0]);
    }

    #[test]
    fn zero_budget() {
        let mut o = ReplayOracle::new(vec![1], vec![5], 0).unwrap();
        let r = baseline_decode(&mut o, &[1], &opts(2, 1, 0), &CostModel::default()).unwrap();
        assert!(r.output.is_empty() && r.steps.is_empty());
        assert_eq!(r.totals.llm_calls, 1);
        let r = anpd_decode(&mut o, &[1], &opts(2, 1, 0), &CostModel::default()).unwrap();
        assert!(r.output.is_empty() && r.steps.is_empty());
    }

    #[test]
    fn baseline_matches_hand_rolled_markov_loop() {
        let corpus: Vec<TokenId> = (0..300).map(|i| ((i * 7 + i / 5) % 13) as TokenId).collect();
        let mut o = MarkovOracle::new(&corpus, 2, 3).unwrap();
        let prompt = [4, 9, 1];
        let r = baseline_decode(&mut o, &prompt, &opts(2, 1, 50), &CostModel::default()).unwrap();

        // independent loop: re-query the oracle from scratch on the full history
        let mut history = prompt.to_vec();
        let mut expected = Vec::new();
        for _ in 0..50 {
            let mut fresh = MarkovOracle::new(&corpus, 2, 3).unwrap();
            let next = *fresh.extend(&history).unwrap().last().unwrap();
            expected.push(next);
            history.push(next);
        }
        assert_eq!(r.output, expected);
    }

    #[test]
    fn perfect_drafts_commit_k_plus_one() {
        let target: Vec<TokenId> = [1, 2].repeat(10);
        let mut o = ReplayOracle::new(vec![1, 2, 1, 2], target.clone(), 0).unwrap();
        let r = anpd_decode(&mut o, &[1, 2, 1, 2], &opts(2, 2, 6), &CostModel::default()).unwrap();
        assert_eq!(r.output, target[..6]);
        let per_step: Vec<usize> = r.steps.iter().map(|s| s.committed_this_step.len()).collect();
        assert_eq!(per_step, vec![3, 3]);
        assert_eq!(r.steps[0].drafted, vec![2, 1]);
        assert_eq!(r.steps[0].draft_levels, vec![2, 2]);
    }

    #[test]
    fn hostile_drafts_commit_one_per_step() {
        let target: Vec<TokenId> = (10..18).collect();
        let prompt = vec![1, 2, 3];
        let mut o = ReplayOracle::new(prompt.clone(), target.clone(), 0).unwrap();
        let r = anpd_decode(&mut o, &prompt, &opts(3, 4, 8), &CostModel::default()).unwrap();
        assert_eq!(r.output, target);
        assert_eq!(r.totals.accepted_draft_tokens, 0);
        assert!(r.steps.iter().all(|s| s.committed_this_step.len() == 1));
    }

    #[test]
    fn empty_draft_degenerates_to_autoregressive() {
        let mut o = ReplayOracle::new(vec![9], vec![4, 5], 0).unwrap();
        let r = anpd_decode(&mut o, &[9], &opts(3, 4, 2), &CostModel::default()).unwrap();
        let first = &r.steps[0];
        assert!(first.drafted.is_empty());
        assert_eq!(first.draft_levels, vec![0]);
        assert_eq!(first.verify_batch_len, 1);
        assert_eq!(first.committed_this_step, vec![4]);
    }

    #[test]
    fn draft_chains_bigrams() {
        let s = MultiLevelNgram::initialize(&[1, 2, 3, 1, 2, 3], 2).unwrap();
        let d = build_draft(&s, &[3, 1], 2, false);
        assert_eq!((d.tokens, d.levels, d.truncated), (vec![2, 3], vec![2, 2], false));

        let empty = MultiLevelNgram::initialize(&[], 3).unwrap();
        let d = build_draft(&empty, &[1, 2], 3, false);
        assert!(d.tokens.is_empty() && d.levels.is_empty() && d.truncated);
    }

    #[test]
    fn draft_context_includes_drafted_tokens() {
        // trigram (2,3)->4 and bigram 2->3 are known; (9,2) is not
        let s = MultiLevelNgram::initialize(&[2, 3, 4], 3).unwrap();
        let d = build_draft(&s, &[9, 2], 2, false);
        assert_eq!(d.tokens, vec![3, 4]);
        assert_eq!(d.levels, vec![2, 3]);
    }

    #[test]
    fn fixed_level_only_skips_fallback() {
        let s = MultiLevelNgram::initialize(&[2, 3, 4], 3).unwrap();
        let d = build_draft(&s, &[9, 2], 2, true);
        assert!(d.tokens.is_empty() && d.truncated);
    }

    #[test]
    fn verify_step_cases() {
        let mut o = ReplayOracle::new(vec![1], vec![5, 6, 7, 8], 0).unwrap();
        o.extend(&[1]).unwrap();
        let v = verify_step(&mut o, 5, &[]).unwrap();
        assert_eq!((v.accepted_count, v.next_carried), (0, 6));

        let mut o = ReplayOracle::new(vec![1], vec![5, 6, 7, 8], 0).unwrap();
        o.extend(&[1]).unwrap();
        let v = verify_step(&mut o, 5, &[6, 7]).unwrap();
        assert_eq!((v.accepted_count, v.next_carried), (2, 8));

        let mut o = ReplayOracle::new(vec![1], vec![5, 6, 7, 8], 0).unwrap();
        o.extend(&[1]).unwrap();
        let v = verify_step(&mut o, 5, &[6, 9]).unwrap();
        assert_eq!((v.accepted_count, v.next_carried), (1, 7));
        assert_eq!(v.predictions.len(), 3);
    }

    #[test]
    fn eos_inside_draft_stops_commitment() {
        let prompt = vec![1, 2, 3, 0, 1, 2];
        let mut o = ReplayOracle::new(prompt.clone(), vec![3], 0).unwrap();
        let r = anpd_decode(&mut o, &prompt, &opts(2, 4, 20), &CostModel::default()).unwrap();
        assert_eq!(r.output, vec![3, 0]);
        let mut o = ReplayOracle::new(prompt.clone(), vec![3], 0).unwrap();
        let b = baseline_decode(&mut o, &prompt, &opts(2, 4, 20), &CostModel::default()).unwrap();
        assert_eq!(b.output, r.output);
    }

    #[test]
    fn options_are_validated() {
        let mut o = ReplayOracle::new(vec![1], vec![5], 0).unwrap();
        let c = CostModel::default();
        assert!(matches!(
            anpd_decode(&mut o, &[1], &opts(1, 2, 4), &c),
            Err(DecodeError::InvalidOptions(_))
        ));
        assert!(matches!(
            anpd_decode(&mut o, &[1], &opts(2, 0, 4), &c),
            Err(DecodeError::InvalidOptions(_))
        ));
        assert!(matches!(anpd_decode(&mut o, &[], &opts(2, 2, 4), &c), Err(DecodeError::EmptyPrompt)));
    }

    /// Wraps an oracle and hides its truncation capability.
    struct NoTruncate<O>(O);

    impl<O: ModelOracle> ModelOracle for NoTruncate<O> {
        fn extend(&mut self, t: &[TokenId]) -> Result<Vec<TokenId>, OracleError> {
            self.0.extend(t)
        }
        fn reset(&mut self) -> Result<(), OracleError> {
            self.0.reset()
        }
        fn consumed_len(&self) -> usize {
            self.0.consumed_len()
        }
        fn eos(&self) -> Option<TokenId> {
            self.0.eos()
        }
        fn vocab_size(&self) -> usize {
            self.0.vocab_size()
        }
    }

    #[test]
    fn rollback_by_replay_when_truncation_unsupported() {
        let corpus: Vec<TokenId> = (0..400).map(|i| ((i * i + 3 * i) % 11) as TokenId).collect();
        let prompt = [3, 1, 4, 1, 5];
        let o = opts(3, 4, 60);
        let c = CostModel::default();
        let mut plain = MarkovOracle::new(&corpus, 2, 9).unwrap();
        let expected = baseline_decode(&mut plain, &prompt, &o, &c).unwrap();
        let mut hidden = NoTruncate(MarkovOracle::new(&corpus, 2, 9).unwrap());
        let r = anpd_decode(&mut hidden, &prompt, &o, &c).unwrap();
        assert_eq!(r.output, expected.output);
        let rejected_steps = r
            .steps
            .iter()
            .filter(|s| s.accepted_count < s.drafted.len())
            .count();
        assert!(r.totals.replay_calls > 0 && r.totals.replay_calls <= rejected_steps);
    }
}
