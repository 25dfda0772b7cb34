//! Byte-level, whitespace and greedy-BPE tokenization.
//!
//! Every vocabulary produced here shares the same base layout: ids `0..256`
//! are the raw bytes and id `256` is the end-of-sequence token. Word or
//! merged subword entries follow. Because the byte tokens are always present,
//! encoding is total and decoding reproduces the input exactly.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

/// Id of the end-of-sequence token in every vocabulary built by this module.
pub const EOS_ID: TokenId = 256;

const BYTE_TOKENS: usize = 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    InvalidId {
        position: usize,
        id: TokenId,
        vocab_size: usize,
    },
    #[error("cannot train a BPE vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {0} is below the minimum of 257 (256 bytes + eos)")]
    VocabTooSmall(usize),
    #[error("duplicate token string at id {0}")]
    DuplicateToken(usize),
    #[error("eos id {0} is not a valid token id")]
    InvalidEos(TokenId),
    #[error("vocab file: {0}")]
    Format(String),
    #[error("unknown tokenizer mode {0:?} (expected byte, whitespace or bpe)")]
    UnknownMode(String),
}

/// How text is split before lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One token per byte.
    #[default]
    Byte,
    /// Whole-word lookup; unknown words and all whitespace fall back to bytes.
    Whitespace,
    /// Greedy merge of adjacent pieces using the vocabulary's subword entries.
    Bpe,
}

impl FromStr for Mode {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "byte" => Ok(Mode::Byte),
            "whitespace" => Ok(Mode::Whitespace),
            "bpe" => Ok(Mode::Bpe),
            other => Err(TokenizerError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Byte => "byte",
            Mode::Whitespace => "whitespace",
            Mode::Bpe => "bpe",
        })
    }
}

/// Dense id-ordered token table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    eos: Option<TokenId>,
    index: HashMap<Vec<u8>, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    eos: Option<TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from token strings in id order.
    pub fn from_tokens(tokens: Vec<Vec<u8>>, eos: Option<TokenId>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(TokenizerError::DuplicateToken(id));
            }
        }
        if let Some(e) = eos {
            if e as usize >= tokens.len() {
                return Err(TokenizerError::InvalidEos(e));
            }
        }
        Ok(Self { tokens, eos, index })
    }

    /// The 257-entry vocabulary: every byte plus eos.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.push(b"<|eos|>".to_vec());
        Self::from_tokens(tokens, Some(EOS_ID)).expect("byte vocab is well formed")
    }

    /// Byte vocabulary extended with every distinct whitespace-delimited word
    /// of `corpus` (multi-byte words only, sorted for determinism).
    pub fn from_words(corpus: &[u8]) -> Self {
        let base = Self::byte_level();
        let words: BTreeSet<&[u8]> = words(corpus).filter(|w| w.len() > 1).collect();
        let mut tokens = base.tokens;
        tokens.extend(words.into_iter().map(<[u8]>::to_vec));
        Self::from_tokens(tokens, Some(EOS_ID)).expect("words never collide with eos")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn token(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.index.get(bytes).copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[u8]> {
        self.tokens.iter().map(Vec::as_slice)
    }

    fn byte_id(&self, b: u8) -> TokenId {
        // Every vocab built here keeps bytes at ids 0..256; loaded vocabs are
        // looked up to stay correct if they were laid out differently.
        match self.tokens.get(b as usize) {
            Some(t) if t.len() == 1 && t[0] == b => b as TokenId,
            _ => self.index.get(&[b][..]).copied().unwrap_or(b as TokenId),
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            tokens: self.tokens.iter().map(|t| B64.encode(t)).collect(),
            eos: self.eos,
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(s).map_err(|e| TokenizerError::Format(e.to_string()))?;
        let tokens = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                B64.decode(t)
                    .map_err(|e| TokenizerError::Format(format!("token {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let vocab = Self::from_tokens(tokens, file.eos)?;
        for b in 0..=255u8 {
            if vocab.id_of(&[b]).is_none() {
                return Err(TokenizerError::Format(format!(
                    "byte {b:#04x} has no token; encoding would not be total"
                )));
            }
        }
        Ok(vocab)
    }
}

/// Token/word counts for one corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub word_count: usize,
    pub token_count: usize,
    pub ratio: f64,
}

impl CorpusStats {
    pub fn new(word_count: usize, token_count: usize) -> Self {
        let ratio = if word_count == 0 {
            1.0
        } else {
            token_count as f64 / word_count as f64
        };
        Self {
            word_count,
            token_count,
            ratio,
        }
    }
}

/// Maximal runs of non-whitespace bytes.
pub fn words(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    text.split(|b| b.is_ascii_whitespace()).filter(|w| !w.is_empty())
}

/// Splits text into pieces of the form `whitespace* non-whitespace*`, so a
/// word carries its leading space the way sentencepiece-style vocabularies do.
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        while i < text.len() && text[i].is_ascii_whitespace() {
            i += 1;
        }
        while i < text.len() && !text[i].is_ascii_whitespace() {
            i += 1;
        }
        pieces.push(&text[start..i]);
        start = i;
    }
    pieces
}

pub fn encode(text: &[u8], vocab: &Vocab, mode: Mode) -> Vec<TokenId> {
    match mode {
        Mode::Byte => text.iter().map(|&b| vocab.byte_id(b)).collect(),
        Mode::Whitespace => encode_whitespace(text, vocab),
        Mode::Bpe => {
            let mut out = Vec::with_capacity(text.len());
            for piece in pretokenize(text) {
                out.extend(encode_piece_bpe(piece, vocab));
            }
            out
        }
    }
}

fn encode_whitespace(text: &[u8], vocab: &Vocab) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(text.len() / 4);
    let mut i = 0;
    while i < text.len() {
        if text[i].is_ascii_whitespace() {
            out.push(vocab.byte_id(text[i]));
            i += 1;
            continue;
        }
        let start = i;
        while i < text.len() && !text[i].is_ascii_whitespace() {
            i += 1;
        }
        let word = &text[start..i];
        match vocab.id_of(word) {
            Some(id) => out.push(id),
            None => out.extend(word.iter().map(|&b| vocab.byte_id(b))),
        }
    }
    out
}

/// Repeatedly merges the adjacent pair whose concatenation has the smallest
/// id among multi-byte vocab entries. Entries are appended in merge order
/// during training, so id order is merge priority.
fn encode_piece_bpe(piece: &[u8], vocab: &Vocab) -> Vec<TokenId> {
    let mut parts: Vec<&[u8]> = piece.chunks(1).collect();
    loop {
        let mut best: Option<(TokenId, usize)> = None;
        for i in 0..parts.len().saturating_sub(1) {
            let (a, b) = (parts[i], parts[i + 1]);
            // parts are contiguous subslices of `piece`
            let start = a.as_ptr() as usize - piece.as_ptr() as usize;
            let merged = &piece[start..start + a.len() + b.len()];
            if let Some(id) = vocab.id_of(merged) {
                if best.is_none_or(|(best_id, _)| id < best_id) {
                    best = Some((id, i));
                }
            }
        }
        let Some((_, i)) = best else { break };
        let start = parts[i].as_ptr() as usize - piece.as_ptr() as usize;
        let len = parts[i].len() + parts[i + 1].len();
        parts[i] = &piece[start..start + len];
        parts.remove(i + 1);
    }
    parts
        .into_iter()
        .map(|p| vocab.id_of(p).expect("every part is a vocab entry"))
        .collect()
}

pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len());
    for (position, &id) in ids.iter().enumerate() {
        let tok = vocab.token(id).ok_or(TokenizerError::InvalidId {
            position,
            id,
            vocab_size: vocab.len(),
        })?;
        out.extend_from_slice(tok);
    }
    Ok(out)
}

/// Greedy pair-merge BPE training.
///
/// Each round merges the most frequent adjacent pair (within pretokenized
/// pieces), breaking ties by the lexicographically smallest merged string.
/// Training stops at `target_vocab_size` entries or when no pair occurs at
/// least twice.
pub fn train_bpe(corpus: &[u8], target_vocab_size: usize) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if target_vocab_size < BYTE_TOKENS + 1 {
        return Err(TokenizerError::VocabTooSmall(target_vocab_size));
    }

    let mut piece_freq: HashMap<&[u8], usize> = HashMap::new();
    for piece in pretokenize(corpus) {
        *piece_freq.entry(piece).or_insert(0) += 1;
    }
    // Sorted so that training is independent of hash iteration order.
    let mut pieces: Vec<(Vec<Vec<u8>>, usize)> = piece_freq
        .into_iter()
        .map(|(p, f)| (p.chunks(1).map(<[u8]>::to_vec).collect(), f))
        .collect();
    pieces.sort();

    let mut vocab = Vocab::byte_level();
    while vocab.len() < target_vocab_size {
        let mut pair_counts: HashMap<(&[u8], &[u8]), usize> = HashMap::new();
        for (parts, freq) in &pieces {
            for w in parts.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_insert(0) += freq;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .map(|((a, b), c)| (c, [a, b].concat(), a.len()))
            .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(&x.1)).then_with(|| y.2.cmp(&x.2)));
        let Some((_, merged, left_len)) = best else {
            break;
        };

        for (parts, _) in &mut pieces {
            let mut i = 0;
            while i + 1 < parts.len() {
                if parts[i].len() == left_len
                    && parts[i].len() + parts[i + 1].len() == merged.len()
                    && parts[i] == merged[..left_len]
                    && parts[i + 1] == merged[left_len..]
                {
                    let right = parts.remove(i + 1);
                    parts[i].extend_from_slice(&right);
                }
                i += 1;
            }
        }
        if vocab.id_of(&merged).is_none() {
            let id = vocab.tokens.len() as TokenId;
            vocab.index.insert(merged.clone(), id);
            vocab.tokens.push(merged);
        }
    }
    Ok(vocab)
}

pub fn corpus_stats(corpus: &[u8], vocab: &Vocab, mode: Mode) -> CorpusStats {
    CorpusStats::new(words(corpus).count(), encode(corpus, vocab, mode).len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input_round_trips() {
        let v = Vocab::byte_level();
        assert!(encode(b"", &v, Mode::Byte).is_empty());
        assert_eq!(decode(&[], &v).unwrap(), b"");
    }

    #[test]
    fn byte_identity() {
        let v = Vocab::byte_level();
        assert_eq!(encode(b"ab", &v, Mode::Byte), vec![97, 98]);
        assert_eq!(decode(&[97, 98], &v).unwrap(), b"ab");
        assert_eq!(v.len(), 257);
        assert_eq!(v.eos(), Some(EOS_ID));
    }

    #[test]
    fn decode_reports_offending_position() {
        let v = Vocab::byte_level();
        let err = decode(&[1, 2, 9999], &v).unwrap_err();
        assert!(matches!(err, TokenizerError::InvalidId { position: 2, id: 9999, .. }));
    }

    #[test]
    fn bpe_merges_most_frequent_pair() {
        let v = train_bpe(b"aaaa", 258).unwrap();
        assert_eq!(v.len(), 258);
        assert_eq!(v.token(257), Some(&b"aa"[..]));

        let v = train_bpe(b"abab", 258).unwrap();
        assert_eq!(v.token(257), Some(&b"ab"[..]));
    }

    #[test]
    fn bpe_without_budget_is_byte_vocab() {
        let v = train_bpe(b"hello hello hello", 257).unwrap();
        assert_eq!(v, Vocab::byte_level());
    }

    #[test]
    fn bpe_errors() {
        assert!(matches!(train_bpe(b"", 300), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(train_bpe(b"x", 256), Err(TokenizerError::VocabTooSmall(256))));
    }

    #[test]
    fn bpe_tie_break_prefers_smallest_string() {
        // ("c","d"), ("d","a") and ("a","b") all occur twice; "ab" is smallest.
        let v = train_bpe(b"cdab\ncdab", 258).unwrap();
        assert_eq!(v.token(257), Some(&b"ab"[..]));
    }

    #[test]
    fn unseen_word_splits_into_subwords() {
        let corpus = b"Bill and Bilbo sat under the baobab by the bao bar. \
                       Bill and Bilbo sat under the baobab by the bao bar. \
                       Bill and Bilbo sat under the baobab by the bao bar.";
        let v = train_bpe(corpus, 400).unwrap();
        assert!(v.id_of(b"Bilbao").is_none() && v.id_of(b" Bilbao").is_none());
        let ids = encode(b" Bilbao", &v, Mode::Bpe);
        assert!(ids.len() >= 2);
        assert!(ids.len() < 7, "expected some merges to apply, got {ids:?}");
        assert_eq!(decode(&ids, &v).unwrap(), b" Bilbao");
    }

    #[test]
    fn whitespace_mode_maps_known_words() {
        let v = Vocab::from_words(b"hello world");
        let ids = encode(b"hello there world", &v, Mode::Whitespace);
        assert_eq!(ids[0], v.id_of(b"hello").unwrap());
        assert_eq!(*ids.last().unwrap(), v.id_of(b"world").unwrap());
        // "there" is unknown: 5 byte tokens, plus two spaces
        assert_eq!(ids.len(), 1 + 1 + 5 + 1 + 1);
        assert_eq!(decode(&ids, &v).unwrap(), b"hello there world");
    }

    #[test]
    fn stats_examples() {
        let v = Vocab::byte_level();
        let s = corpus_stats(b"hello world", &v, Mode::Byte);
        assert_eq!((s.word_count, s.token_count), (2, 11));
        let s = corpus_stats(b"", &v, Mode::Byte);
        assert_eq!((s.word_count, s.token_count, s.ratio), (0, 0, 1.0));
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = train_bpe(b"abab abab cdcd", 262).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_json(r#"{"tokens":["YQ=="],"eos":5}"#).is_err());
    }

    #[test]
    fn vocab_rejects_duplicates() {
        let err = Vocab::from_tokens(vec![b"a".to_vec(), b"a".to_vec()], None).unwrap_err();
        assert!(matches!(err, TokenizerError::DuplicateToken(1)));
    }

    proptest! {
        #[test]
        fn byte_and_bpe_round_trip(s in "[ -~\n\t]{0,200}") {
            let bv = Vocab::byte_level();
            prop_assert_eq!(decode(&encode(s.as_bytes(), &bv, Mode::Byte), &bv).unwrap(), s.as_bytes());
            let v = train_bpe(b"the quick brown fox jumps over the lazy dog; the dog sleeps", 290).unwrap();
            prop_assert_eq!(decode(&encode(s.as_bytes(), &v, Mode::Bpe), &v).unwrap(), s.as_bytes());
            let wv = Vocab::from_words(b"the quick brown fox");
            prop_assert_eq!(decode(&encode(s.as_bytes(), &wv, Mode::Whitespace), &wv).unwrap(), s.as_bytes());
        }

        #[test]
        fn ratio_at_least_one_on_ascii(s in "[a-z ]{1,120}") {
            let v = train_bpe(b"abc abc abd the them then", 280).unwrap();
            let st = corpus_stats(s.as_bytes(), &v, Mode::Bpe);
            prop_assert!(st.ratio >= 1.0);
            let st = corpus_stats(s.as_bytes(), &Vocab::byte_level(), Mode::Byte);
            prop_assert!(st.ratio >= 1.0);
        }
    }
}
