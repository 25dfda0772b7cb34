use anpd::decoder::{anpd_decode, anpd_decode_with_store, baseline_decode, DecodeOptions};
use anpd::ngram::MultiLevelNgram;
use anpd::oracle::{CostModel, MarkovOracle, ModelOracle, ReplayOracle};
use anpd::trace::{read_trace, write_trace, TraceHeader};
use anpd::TokenId;
use proptest::prelude::*;

fn replay(prompt: &[TokenId], target: &[TokenId]) -> ReplayOracle {
    ReplayOracle::new(prompt.to_vec(), target.to_vec(), 99).unwrap()
}

fn options() -> impl Strategy<Value = DecodeOptions> {
    (2usize..=6, 1usize..=8, 0usize..=120, any::<bool>(), any::<bool>(), any::<bool>()).prop_map(
        |(n_max, k_draft, max_new_tokens, runtime_update, stop_at_eos, fixed_level_only)| DecodeOptions {
            n_max,
            k_draft,
            max_new_tokens,
            runtime_update,
            stop_at_eos,
            fixed_level_only,
            max_contexts: None,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn replay_output_matches_baseline(
        prompt in prop::collection::vec(0u32..6, 1..40),
        target in prop::collection::vec(0u32..6, 1..150),
        opts in options(),
    ) {
        let cost = CostModel::default();
        let base = baseline_decode(&mut replay(&prompt, &target), &prompt, &opts, &cost).unwrap();
        let fast = anpd_decode(&mut replay(&prompt, &target), &prompt, &opts, &cost).unwrap();
        prop_assert_eq!(&base.output, &fast.output);
        prop_assert!(fast.output.len() <= opts.max_new_tokens);
    }

    #[test]
    fn trace_accounting_is_consistent(
        corpus in prop::collection::vec(0u32..12, 50..400),
        prompt in prop::collection::vec(0u32..12, 1..30),
        order in 1usize..=3,
        opts in options(),
    ) {
        let mut o = MarkovOracle::new(&corpus, order, 7).unwrap().with_eos(Some(11));
        let r = anpd_decode(&mut o, &prompt, &opts, &CostModel::default()).unwrap();
        let committed: Vec<TokenId> = r.steps.iter().flat_map(|s| s.committed_this_step.clone()).collect();
        prop_assert_eq!(&committed, &r.output);
        prop_assert_eq!(r.totals.llm_calls, 1 + r.steps.len());
        prop_assert_eq!(
            r.totals.proposed_draft_tokens,
            r.steps.iter().map(|s| s.drafted.len()).sum::<usize>()
        );
        prop_assert_eq!(
            r.totals.accepted_draft_tokens,
            r.steps.iter().map(|s| s.accepted_count).sum::<usize>()
        );
        for s in &r.steps {
            prop_assert!(s.drafted.len() <= opts.k_draft);
            prop_assert_eq!(s.verify_batch_len, s.drafted.len() + 1);
            prop_assert!(s.accepted_count <= s.drafted.len());
            prop_assert_eq!(s.committed_this_step.len(), s.accepted_count + 1);
            prop_assert_eq!(&s.committed_this_step[1..], &s.drafted[..s.accepted_count]);
        }
        prop_assert_eq!(r.steps.len() + r.totals.accepted_draft_tokens, r.output.len());
    }

    #[test]
    fn final_store_matches_prompt_plus_output(
        corpus in prop::collection::vec(0u32..10, 50..300),
        prompt in prop::collection::vec(0u32..10, 1..30),
        opts in options(),
    ) {
        let mut o = MarkovOracle::new(&corpus, 2, 3).unwrap();
        let (r, store) = anpd_decode_with_store(&mut o, &prompt, &opts, &CostModel::default()).unwrap();
        let mut replayed = MultiLevelNgram::initialize(&prompt, opts.n_max).unwrap();
        if opts.runtime_update {
            for &t in &r.output {
                replayed.update(t);
            }
        }
        prop_assert_eq!(replayed.snapshot(), store.snapshot());
    }
}

#[test]
fn trace_file_round_trips_and_sums_to_output() {
    let corpus: Vec<TokenId> = (0..300).map(|i| (i * 7 % 13) as TokenId).collect();
    let prompt = corpus[..20].to_vec();
    let opts = DecodeOptions { max_new_tokens: 80, ..DecodeOptions::default() };
    let mut o = MarkovOracle::new(&corpus, 2, 1).unwrap();
    let r = anpd_decode(&mut o, &prompt, &opts, &CostModel::default()).unwrap();
    let header = TraceHeader {
        prompt_len: prompt.len(),
        n: opts.n_max,
        k: opts.k_draft,
        oracle: serde_json::json!({"kind": "markov"}),
        cost_model: CostModel::default(),
    };
    let mut buf = Vec::new();
    write_trace(&mut buf, &header, &r).unwrap();
    let (h, lines) = read_trace(buf.as_slice()).unwrap();
    assert_eq!(h, header);
    assert_eq!(lines.len(), r.steps.len());
    let joined: Vec<TokenId> = lines.iter().flat_map(|l| l.committed.clone()).collect();
    assert_eq!(joined, r.output);
    let verify: f64 = lines.iter().map(|l| l.sim_time).sum();
    assert!((verify - r.verify_sim_time()).abs() < 1e-9);
}

#[test]
fn zero_new_tokens_produces_nothing() {
    let prompt = [1, 2, 3];
    let opts = DecodeOptions { max_new_tokens: 0, ..DecodeOptions::default() };
    let r = anpd_decode(&mut replay(&prompt, &[4, 5]), &prompt, &opts, &CostModel::default()).unwrap();
    assert!(r.output.is_empty());
    assert!(r.steps.is_empty());
    assert_eq!(r.totals.llm_calls, 1);
}

#[test]
fn eos_stops_both_decoders_at_the_same_place() {
    let prompt = [1, 2, 1, 2];
    let target = [1, 2, 1, 2, 1, 99, 5, 5];
    let opts = DecodeOptions::default();
    let cost = CostModel::default();
    let base = baseline_decode(&mut replay(&prompt, &target), &prompt, &opts, &cost).unwrap();
    let fast = anpd_decode(&mut replay(&prompt, &target), &prompt, &opts, &cost).unwrap();
    assert_eq!(base.output, vec![1, 2, 1, 2, 1, 99]);
    assert_eq!(fast.output, base.output);
}

#[test]
fn oracle_is_left_consistent_after_decoding() {
    let corpus: Vec<TokenId> = (0..200).map(|i| (i % 9) as TokenId).collect();
    let prompt = corpus[..12].to_vec();
    let opts = DecodeOptions { max_new_tokens: 50, stop_at_eos: false, ..DecodeOptions::default() };
    let mut o = MarkovOracle::new(&corpus, 3, 5).unwrap();
    let r = anpd_decode(&mut o, &prompt, &opts, &CostModel::default()).unwrap();
    // the cache may hold rejected drafts, but never fewer than the committed text
    assert!(o.consumed_len() >= prompt.len() + r.output.len() - 1);
}
