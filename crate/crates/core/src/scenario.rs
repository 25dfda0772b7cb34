//! Builds benchmark cases from token streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::BenchCase;
use crate::oracle::OracleSpec;
use crate::tokenizer::{self, Mode, Vocab, EOS_ID};
use crate::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("document of {len} tokens is too short for a {prompt_len}-token prompt plus a target")]
    TooShort { len: usize, prompt_len: usize },
    #[error("prompt length must be positive")]
    EmptyPrompt,
    #[error("markov corpus of {len} tokens cannot supply {prompt_len}-token prompts")]
    CorpusTooShort { len: usize, prompt_len: usize },
}

/// Teacher-forced case: the first `prompt_len` tokens are the prompt and the
/// remainder is the text the replay oracle will reproduce.
pub fn replay_case(
    tokens: &[TokenId],
    prompt_len: usize,
    eos: TokenId,
) -> Result<BenchCase, ScenarioError> {
    if prompt_len == 0 {
        return Err(ScenarioError::EmptyPrompt);
    }
    if tokens.len() <= prompt_len {
        return Err(ScenarioError::TooShort {
            len: tokens.len(),
            prompt_len,
        });
    }
    let prompt = tokens[..prompt_len].to_vec();
    Ok(BenchCase {
        oracle: OracleSpec::Replay {
            prompt: prompt.clone(),
            target: tokens[prompt_len..].to_vec(),
            eos,
        },
        prompt,
    })
}

/// Prompts drawn from seeded random offsets of the corpus, all continued by
/// one Markov oracle trained on that corpus.
pub fn markov_cases(
    corpus: &[TokenId],
    order: usize,
    seed: u64,
    eos: Option<TokenId>,
    num_prompts: usize,
    prompt_len: usize,
) -> Result<Vec<BenchCase>, ScenarioError> {
    if prompt_len == 0 {
        return Err(ScenarioError::EmptyPrompt);
    }
    if corpus.len() < prompt_len {
        return Err(ScenarioError::CorpusTooShort {
            len: corpus.len(),
            prompt_len,
        });
    }
    let spec = OracleSpec::Markov {
        corpus: corpus.to_vec(),
        order,
        seed,
        eos,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_prompts)
        .map(|_| {
            let start = rng.gen_range(0..=corpus.len() - prompt_len);
            BenchCase {
                prompt: corpus[start..start + prompt_len].to_vec(),
                oracle: spec.clone(),
            }
        })
        .collect())
}

/// Splits text into paragraphs at blank lines.
pub fn paragraphs(text: &str) -> Vec<&str> {
    text.split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect()
}

/// The bundled repetitive prose as summarization-style replay cases: for
/// every paragraph after the first, the prompt is all preceding text and the
/// replay target is that paragraph. Byte-level tokens.
pub fn repetitive_replay_cases() -> Vec<BenchCase> {
    document_continuation_cases(crate::bundled::REPETITIVE)
}

/// One case per paragraph `i >= 1`: prompt = paragraphs `0..i` (with their
/// separators), target = paragraph `i`.
pub fn document_continuation_cases(text: &str) -> Vec<BenchCase> {
    let vocab = Vocab::byte_level();
    let mut cases = Vec::new();
    let mut offset = 0;
    for (i, para) in paragraphs(text).into_iter().enumerate() {
        let start = text[offset..].find(para).map_or(offset, |j| offset + j);
        offset = start + para.len();
        if i == 0 {
            continue;
        }
        let prompt = tokenizer::encode(&text.as_bytes()[..start], &vocab, Mode::Byte);
        let target = tokenizer::encode(para.as_bytes(), &vocab, Mode::Byte);
        cases.push(BenchCase {
            oracle: OracleSpec::Replay {
                prompt: prompt.clone(),
                target,
                eos: EOS_ID,
            },
            prompt,
        });
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_case_splits_prompt_and_target() {
        let c = replay_case(&[1, 2, 3, 4], 2, 0).unwrap();
        assert_eq!(c.prompt, vec![1, 2]);
        assert_eq!(
            c.oracle,
            OracleSpec::Replay {
                prompt: vec![1, 2],
                target: vec![3, 4],
                eos: 0
            }
        );
        assert!(replay_case(&[1, 2], 2, 0).is_err());
        assert!(replay_case(&[1, 2], 0, 0).is_err());
    }

    #[test]
    fn markov_prompts_are_seeded_windows() {
        let corpus: Vec<TokenId> = (0..100).collect();
        let a = markov_cases(&corpus, 2, 7, None, 5, 10).unwrap();
        let b = markov_cases(&corpus, 2, 7, None, 5, 10).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert_eq!(c.prompt.len(), 10);
            assert!(c.prompt.windows(2).all(|w| w[1] == w[0] + 1));
        }
        assert!(markov_cases(&corpus[..5], 2, 7, None, 1, 10).is_err());
    }

    #[test]
    fn continuation_cases_grow_the_prompt() {
        let text = "one two\n\nthree\n\nfour five";
        let cases = document_continuation_cases(text);
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].prompt, b"one two\n\n".iter().map(|&b| b as TokenId).collect::<Vec<_>>());
        match &cases[1].oracle {
            OracleSpec::Replay { target, eos, .. } => {
                assert_eq!(target, &b"four five".iter().map(|&b| b as TokenId).collect::<Vec<_>>());
                assert_eq!(*eos, EOS_ID);
            }
            other => panic!("unexpected oracle {other:?}"),
        }
        assert_eq!(repetitive_replay_cases().len(), paragraphs(crate::bundled::REPETITIVE).len() - 1);
    }
}
