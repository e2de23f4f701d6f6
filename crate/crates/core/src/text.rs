//! Tokenisation, vocabulary and parallel-corpus ingestion.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
/// Sentence start. Also the terminal symbol of the backward decoder.
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "unk"];

const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '"', '\'', '(', ')'];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line counts differ: source has {source_lines}, target has {target_lines}")]
    LineCount {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("{path}:{line}: expected `normal<TAB>simple`")]
    Tsv { path: PathBuf, line: usize },
    #[error("vocabulary max_size must exceed {NUM_SPECIALS}, got {0}")]
    VocabTooSmall(usize),
    #[error("vocabulary file line {line}: {reason}")]
    VocabFile { line: usize, reason: String },
}

pub(crate) fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Lowercases, detaches `.,;:!?"'()` into standalone tokens and splits on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if PUNCTUATION.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// True for tokens made only of punctuation characters.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

/// Joins tokens with spaces and reattaches punctuation to the preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let attach = matches!(t, "." | "," | ";" | ":" | "!" | "?" | ")");
        if !out.is_empty() && !attach && !out.ends_with('(') {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Bidirectional token/id map with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Keeps the `max_size − 4` most frequent tokens; equal counts are ordered
    /// lexicographically.
    pub fn build<'a, I, S>(corpus: I, max_size: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if max_size <= NUM_SPECIALS {
            return Err(CorpusError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                let tok = tok.as_ref();
                if !SPECIAL_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Ok(Self::from_regular(ranked.into_iter().map(|(t, _)| t.to_string())))
    }

    /// Builds from regular tokens in id order (id = position + 4).
    pub fn from_regular(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Regular tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// One regular token per line; line `k` holds id `k + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.regular_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse_file_string(text: &str) -> Result<Self, CorpusError> {
        let mut seen = HashMap::new();
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim_end_matches('\r');
            let bad = |reason: &str| CorpusError::VocabFile {
                line: i + 1,
                reason: reason.to_string(),
            };
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(bad("token must be non-empty without whitespace"));
            }
            if SPECIAL_TOKENS.contains(&tok) {
                return Err(bad("reserved token listed explicitly"));
            }
            if seen.insert(tok.to_string(), i).is_some() {
                return Err(bad("duplicate token"));
            }
            tokens.push(tok.to_string());
        }
        Ok(Self::from_regular(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_file_string().as_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse_file_string(&read_file(path)?)
    }
}

/// Aligned (normal, simple) sentence pair as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Aligned pair before id mapping; `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub line: usize,
}

impl TokenPair {
    pub fn to_ids(&self, vocab: &Vocabulary) -> SentencePair {
        SentencePair {
            source: vocab.encode(&self.source),
            target: vocab.encode(&self.target),
        }
    }
}

pub trait Aligned {
    fn is_identity(&self) -> bool;
}

impl Aligned for SentencePair {
    fn is_identity(&self) -> bool {
        self.source == self.target
    }
}

impl Aligned for TokenPair {
    fn is_identity(&self) -> bool {
        self.source == self.target
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport<T> {
    pub pairs: Vec<T>,
    pub rejected: Vec<RejectedLine>,
}

fn pair_lines<'a>(
    lines: impl Iterator<Item = (usize, &'a str, &'a str)>,
) -> LoadReport<TokenPair> {
    let mut pairs = Vec::new();
    let mut rejected = Vec::new();
    for (line, src, tgt) in lines {
        let source = tokenize(src);
        let target = tokenize(tgt);
        if source.is_empty() || target.is_empty() {
            rejected.push(RejectedLine {
                line,
                reason: "blank sentence".to_string(),
            });
            continue;
        }
        pairs.push(TokenPair {
            source,
            target,
            line,
        });
    }
    LoadReport { pairs, rejected }
}

/// Reads two aligned files; line `i` of each forms pair `i`.
pub fn load_parallel_tokens(
    source_path: &Path,
    target_path: &Path,
) -> Result<LoadReport<TokenPair>, CorpusError> {
    let src = read_file(source_path)?;
    let tgt = read_file(target_path)?;
    let s: Vec<&str> = src.lines().collect();
    let t: Vec<&str> = tgt.lines().collect();
    if s.len() != t.len() {
        return Err(CorpusError::LineCount {
            source_lines: s.len(),
            target_lines: t.len(),
        });
    }
    Ok(pair_lines(
        s.into_iter().zip(t).enumerate().map(|(i, (a, b))| (i + 1, a, b)),
    ))
}

/// Reads `normal<TAB>simple` rows.
pub fn load_tsv_tokens(path: &Path) -> Result<LoadReport<TokenPair>, CorpusError> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => rows.push((i + 1, a, b)),
            _ if line.trim().is_empty() => rows.push((i + 1, "", "")),
            _ => {
                return Err(CorpusError::Tsv {
                    path: path.to_path_buf(),
                    line: i + 1,
                })
            }
        }
    }
    Ok(pair_lines(rows.into_iter()))
}

/// Loads an aligned corpus and maps tokens through `vocab`.
pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    vocab: &Vocabulary,
) -> Result<LoadReport<SentencePair>, CorpusError> {
    let report = load_parallel_tokens(source_path, target_path)?;
    Ok(LoadReport {
        pairs: report.pairs.iter().map(|p| p.to_ids(vocab)).collect(),
        rejected: report.rejected,
    })
}

/// Drops pairs whose two sides are identical, preserving order.
pub fn filter_identical<T: Aligned>(pairs: Vec<T>) -> Vec<T> {
    pairs.into_iter().filter(|p| !p.is_identity()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> CorpusSplit<T> {
    /// Seeded shuffle, then the first `valid` items go to validation, the next
    /// `test` to test and the rest to training. Identity pairs are removed from
    /// the test split only.
    pub fn random(mut pairs: Vec<T>, valid: usize, test: usize, seed: u64) -> Self
    where
        T: Aligned,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        let valid = valid.min(pairs.len());
        let test_n = test.min(pairs.len() - valid);
        let mut rest = pairs.split_off(valid);
        let train = rest.split_off(test_n);
        Self {
            train,
            valid: pairs,
            test: filter_identical(rest),
        }
    }
}
