use std::fs;
use std::path::{Path, PathBuf};

use anpd::decoder::DecodeOptions;
use anpd::metrics::BenchCase;
use anpd::oracle::{CostModel, OracleSpec};
use anpd::scenario;
use anpd::tokenizer::{self, Mode, Vocab, EOS_ID};
use anpd::{bundled, TokenId};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Text given inline, as a file (or `bundled:<name>`), or as raw token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum TextSource {
    Text {
        text: String,
    },
    File {
        file: String,
        /// Half-open paragraph range `[start, end)`; paragraphs are separated
        /// by blank lines.
        #[serde(default)]
        paragraphs: Option<[usize; 2]>,
    },
    Tokens {
        tokens: Vec<TokenId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleConfig {
    /// Replays `target` after the prompt.
    Replay { target: TextSource },
    Markov {
        corpus: TextSource,
        order: usize,
        /// Emit the vocabulary's eos id as a token the model can predict.
        #[serde(default)]
        eos: bool,
    },
    External {
        endpoint: String,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    /// One replay case per paragraph after the first, prompted with all
    /// preceding text.
    Continuation { file: String },
    /// Random corpus windows as prompts for a Markov oracle over the corpus.
    MarkovWindows {
        corpus: TextSource,
        order: usize,
        num_prompts: usize,
        prompt_len: usize,
        #[serde(default)]
        eos: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub vocab_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub prompt: Option<TextSource>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub decode: DecodeOptions,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
}

/// A config ready to run: cases built, tokenizer loaded.
pub struct Loaded {
    pub config: RunConfig,
    pub cases: Vec<BenchCase>,
    pub vocab: Vocab,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let raw = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config: RunConfig =
        serde_json::from_str(&raw).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    config.rebase(base);
    Ok(config)
}

/// Reads a file path or a `bundled:<name>` corpus.
pub fn read_source(path: &str) -> Result<Vec<u8>> {
    if let Some(name) = path.strip_prefix("bundled:") {
        return bundled::get(name)
            .map(|s| s.as_bytes().to_vec())
            .ok_or_else(|| anyhow!("unknown bundled corpus {name:?} (available: {})", bundled::NAMES.join(", ")));
    }
    let meta = fs::metadata(path).with_context(|| format!("cannot read {path}"))?;
    if !meta.is_dir() {
        return fs::read(path).with_context(|| format!("cannot read {path}"));
    }
    // a directory is the concatenation of its files in filename order
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("cannot list {path}"))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(fs::read(&f).with_context(|| format!("cannot read {}", f.display()))?);
    }
    Ok(out)
}

fn rebase_path(base: &Path, p: &mut String) {
    if !p.starts_with("bundled:") && Path::new(p.as_str()).is_relative() {
        *p = base.join(&*p).to_string_lossy().into_owned();
    }
}

impl TextSource {
    fn rebase(&mut self, base: &Path) {
        if let TextSource::File { file, .. } = self {
            rebase_path(base, file);
        }
    }

    /// Raw bytes, or `None` for token-id sources.
    fn bytes(&self) -> Result<Option<Vec<u8>>> {
        match self {
            TextSource::Text { text } => Ok(Some(text.as_bytes().to_vec())),
            TextSource::Tokens { .. } => Ok(None),
            TextSource::File { file, paragraphs } => {
                let data = read_source(file)?;
                let Some([start, end]) = *paragraphs else {
                    return Ok(Some(data));
                };
                let text = String::from_utf8(data).with_context(|| format!("{file} is not UTF-8"))?;
                Ok(Some(paragraph_slice(&text, start, end).with_context(|| format!("in {file}"))?.as_bytes().to_vec()))
            }
        }
    }

    fn tokens(&self, vocab: &Vocab, mode: Mode) -> Result<Vec<TokenId>> {
        match self {
            TextSource::Tokens { tokens } => Ok(tokens.clone()),
            other => Ok(tokenizer::encode(&other.bytes()?.unwrap_or_default(), vocab, mode)),
        }
    }
}

/// The text from the start of paragraph `start` to the start of paragraph
/// `end` (or the end of the text), separators included.
pub fn paragraph_slice(text: &str, start: usize, end: usize) -> Result<&str> {
    let paras = scenario::paragraphs(text);
    if start >= end || end > paras.len() {
        bail!("paragraph range [{start}, {end}) is invalid for {} paragraphs", paras.len());
    }
    let mut offsets = Vec::with_capacity(paras.len());
    let mut pos = 0;
    for p in &paras {
        let at = text[pos..].find(p).map_or(pos, |j| pos + j);
        offsets.push(at);
        pos = at + p.len();
    }
    let from = offsets[start];
    let to = if end == paras.len() {
        text.len()
    } else {
        offsets[end]
    };
    Ok(&text[from..to])
}

impl RunConfig {
    fn rebase(&mut self, base: &Path) {
        if let Some(p) = &mut self.prompt {
            p.rebase(base);
        }
        match &mut self.oracle {
            Some(OracleConfig::Replay { target }) => target.rebase(base),
            Some(OracleConfig::Markov { corpus, .. }) => corpus.rebase(base),
            _ => {}
        }
        match &mut self.scenario {
            Some(ScenarioConfig::Continuation { file }) => rebase_path(base, file),
            Some(ScenarioConfig::MarkovWindows { corpus, .. }) => corpus.rebase(base),
            None => {}
        }
        if let Some(v) = &mut self.tokenizer.vocab_path {
            rebase_path(base, v);
        }
        for p in [&mut self.trace, &mut self.report].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Builds the vocabulary and the benchmark cases. Fails on missing files
    /// or invalid options.
    pub fn resolve(self) -> Result<Loaded> {
        self.decode.validate()?;
        self.cost_model.validate().map_err(|e| anyhow!(e))?;
        let vocab = self.vocab()?;
        let mode = self.tokenizer.mode;
        let eos = vocab.eos().unwrap_or(EOS_ID);
        let cases = match (&self.scenario, &self.prompt, &self.oracle) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                bail!("config sets both `scenario` and `prompt`/`oracle`; use one")
            }
            (Some(ScenarioConfig::Continuation { file }), None, None) => {
                if mode != Mode::Byte {
                    bail!("continuation scenarios are byte-level; set tokenizer.mode to \"byte\"");
                }
                let text = String::from_utf8(read_source(file)?).with_context(|| format!("{file} is not UTF-8"))?;
                let cases = scenario::document_continuation_cases(&text);
                if cases.is_empty() {
                    bail!("{file} needs at least two paragraphs");
                }
                cases
            }
            (
                Some(ScenarioConfig::MarkovWindows {
                    corpus,
                    order,
                    num_prompts,
                    prompt_len,
                    eos: with_eos,
                }),
                None,
                None,
            ) => {
                let corpus = corpus.tokens(&vocab, mode)?;
                scenario::markov_cases(&corpus, *order, self.seed, with_eos.then_some(eos), *num_prompts, *prompt_len)?
            }
            (None, Some(prompt), Some(oracle)) => {
                let prompt = prompt.tokens(&vocab, mode)?;
                let oracle = match oracle {
                    OracleConfig::Replay { target } => OracleSpec::Replay {
                        prompt: prompt.clone(),
                        target: target.tokens(&vocab, mode)?,
                        eos,
                    },
                    OracleConfig::Markov {
                        corpus,
                        order,
                        eos: with_eos,
                    } => OracleSpec::Markov {
                        corpus: corpus.tokens(&vocab, mode)?,
                        order: *order,
                        seed: self.seed,
                        eos: with_eos.then_some(eos),
                    },
                    OracleConfig::External { endpoint, timeout_ms } => OracleSpec::External {
                        endpoint: endpoint.clone(),
                        timeout_ms: *timeout_ms,
                    },
                };
                // surface spec errors (empty targets, bad orders) at load time
                if !matches!(oracle, OracleSpec::External { .. }) {
                    oracle.build()?;
                }
                vec![BenchCase { prompt, oracle }]
            }
            _ => bail!("config needs either `scenario` or both `prompt` and `oracle`"),
        };
        if cases.iter().any(|c| c.prompt.is_empty()) {
            bail!("prompt is empty");
        }
        Ok(Loaded {
            config: self,
            cases,
            vocab,
        })
    }

    fn vocab(&self) -> Result<Vocab> {
        load_vocab(self.tokenizer.mode, self.tokenizer.vocab_path.as_deref(), || self.all_text())
    }

    /// Every text the config mentions, used to build a word vocabulary.
    fn all_text(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut push = |s: &TextSource| -> Result<()> {
            if let Some(b) = s.bytes()? {
                out.extend_from_slice(&b);
                out.push(b'\n');
            }
            Ok(())
        };
        if let Some(p) = &self.prompt {
            push(p)?;
        }
        match &self.oracle {
            Some(OracleConfig::Replay { target }) => push(target)?,
            Some(OracleConfig::Markov { corpus, .. }) => push(corpus)?,
            _ => {}
        }
        if let Some(ScenarioConfig::MarkovWindows { corpus, .. }) = &self.scenario {
            push(corpus)?;
        }
        Ok(out)
    }
}

/// Byte vocab, a vocab file, or (whitespace mode without a file) the word
/// vocabulary of `text`.
pub fn load_vocab(mode: Mode, vocab_path: Option<&str>, text: impl FnOnce() -> Result<Vec<u8>>) -> Result<Vocab> {
    match (mode, vocab_path) {
        (_, Some(p)) => {
            let raw = read_source(p)?;
            let raw = String::from_utf8(raw).with_context(|| format!("{p} is not UTF-8"))?;
            Vocab::from_json(&raw).with_context(|| format!("invalid vocab file {p}"))
        }
        (Mode::Byte, None) => Ok(Vocab::byte_level()),
        (Mode::Whitespace, None) => Ok(Vocab::from_words(&text()?)),
        (Mode::Bpe, None) => bail!("bpe mode needs a vocab file (train one with `anpd train-bpe`)"),
    }
}
