//! Paraphrase-table lookup and lexical substitution (the first step of the
//! pipeline).
//!
//! A sentence is scanned left to right. At each position the longest complex
//! phrase from the table that matches and counts as "complex" (rare enough in
//! the training corpus) is taken, and scanning resumes after it. Only the
//! `max_constraints` rarest matches are substituted; they become the
//! constraints handed to the generator, rarest first.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::text::{read_file, tokenize, CorpusError};

pub const MAX_PHRASE_TOKENS: usize = 5;
pub const DEFAULT_COMPLEXITY_PERCENTILE: f64 = 30.0;

#[derive(Debug, Error)]
pub enum KbError {
    #[error(transparent)]
    Io(#[from] CorpusError),
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParaphraseRule {
    pub complex: Vec<String>,
    pub simple: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

/// Paraphrase rules keyed by the first token of their complex side.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    rules: Vec<ParaphraseRule>,
    /// head token → indices of the selected rule per distinct complex phrase,
    /// longest phrase first.
    by_head: HashMap<String, Vec<usize>>,
    rejected: Vec<RejectedRow>,
}

impl KnowledgeBase {
    pub fn load(path: &Path) -> Result<Self, KbError> {
        Self::parse(&read_file(path)?, path)
    }

    /// Parses `complex<TAB>simple<TAB>score` rows. Blank lines and `#`
    /// comments are skipped; structurally malformed rows are errors; rows with
    /// an out-of-range score or a degenerate phrase are set aside in
    /// [`KnowledgeBase::rejected`].
    pub fn parse(text: &str, origin: &Path) -> Result<Self, KbError> {
        let mut rules = Vec::new();
        let mut rejected = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let row = raw.trim_end_matches('\r');
            if row.trim().is_empty() || row.starts_with('#') {
                continue;
            }
            let malformed = |reason: String| KbError::Malformed {
                path: origin.to_path_buf(),
                line,
                reason,
            };
            let fields: Vec<&str> = row.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let score: f64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| malformed(format!("score `{}` is not a number", fields[2].trim())))?;
            let complex = tokenize(fields[0]);
            let simple = tokenize(fields[1]);
            let reason = if !(0.0..=1.0).contains(&score) {
                Some(format!("score {score} outside [0, 1]"))
            } else if complex.is_empty() || simple.is_empty() {
                Some("empty phrase".to_string())
            } else if complex.len() > MAX_PHRASE_TOKENS || simple.len() > MAX_PHRASE_TOKENS {
                Some(format!("phrase longer than {MAX_PHRASE_TOKENS} tokens"))
            } else if complex == simple {
                Some("complex and simple sides are identical".to_string())
            } else {
                None
            };
            match reason {
                Some(reason) => rejected.push(RejectedRow { line, reason }),
                None => rules.push(ParaphraseRule {
                    complex,
                    simple,
                    score,
                }),
            }
        }
        Ok(Self::from_rules_with_rejected(rules, rejected))
    }

    pub fn from_rules(rules: Vec<ParaphraseRule>) -> Self {
        Self::from_rules_with_rejected(rules, Vec::new())
    }

    fn from_rules_with_rejected(rules: Vec<ParaphraseRule>, rejected: Vec<RejectedRow>) -> Self {
        // Best rule per complex phrase: highest score, then shorter simple
        // phrase, then lexicographic simple phrase.
        let mut best: HashMap<&[String], usize> = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            best.entry(&r.complex)
                .and_modify(|cur| {
                    let c = &rules[*cur];
                    let better = r.score > c.score
                        || (r.score == c.score
                            && (r.simple.len(), &r.simple) < (c.simple.len(), &c.simple));
                    if better {
                        *cur = i;
                    }
                })
                .or_insert(i);
        }
        let mut by_head: HashMap<String, Vec<usize>> = HashMap::new();
        for &i in best.values() {
            by_head.entry(rules[i].complex[0].clone()).or_default().push(i);
        }
        for list in by_head.values_mut() {
            list.sort_by(|&a, &b| {
                rules[b]
                    .complex
                    .len()
                    .cmp(&rules[a].complex.len())
                    .then_with(|| rules[a].complex.cmp(&rules[b].complex))
            });
        }
        Self {
            rules,
            by_head,
            rejected,
        }
    }

    pub fn rules(&self) -> &[ParaphraseRule] {
        &self.rules
    }

    pub fn rejected(&self) -> &[RejectedRow] {
        &self.rejected
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Selected rules whose complex phrase starts at `tokens[0]`, longest first.
    pub fn candidates<'a, 't>(&'a self, tokens: &'t [String]) -> impl Iterator<Item = &'a ParaphraseRule> + 't
    where
        'a: 't,
    {
        tokens
            .first()
            .and_then(|h| self.by_head.get(h))
            .into_iter()
            .flatten()
            .map(|&i| &self.rules[i])
            .filter(move |r| tokens.starts_with(&r.complex))
    }
}

/// Training-corpus token counts plus the complexity cut-off.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FreqTable {
    counts: HashMap<String, u64>,
    threshold: u64,
}

impl FreqTable {
    pub fn from_corpus<'a, I, S>(sentences: I, percentile: f64) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref().to_string()).or_default() += 1;
            }
        }
        Self::from_counts(counts, percentile)
    }

    pub fn from_counts(counts: HashMap<String, u64>, percentile: f64) -> Self {
        let threshold = occurrence_percentile(&counts, percentile);
        Self { counts, threshold }
    }

    /// Overrides the complexity cut-off.
    pub fn with_threshold(mut self, threshold: u64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn counts(&self) -> &HashMap<String, u64> {
        &self.counts
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    /// Frequency of a phrase: that of its rarest token.
    pub fn phrase_frequency<S: AsRef<str>>(&self, phrase: &[S]) -> u64 {
        phrase.iter().map(|t| self.count(t.as_ref())).min().unwrap_or(0)
    }

    pub fn is_complex<S: AsRef<str>>(&self, phrase: &[S]) -> bool {
        self.phrase_frequency(phrase) <= self.threshold
    }
}

/// Smallest type count `c` such that tokens whose type count is `≤ c` make up
/// at least `percentile`% of running tokens.
fn occurrence_percentile(counts: &HashMap<String, u64>, percentile: f64) -> u64 {
    if percentile <= 0.0 || counts.is_empty() {
        return 0;
    }
    let mut sorted: Vec<u64> = counts.values().copied().collect();
    sorted.sort_unstable();
    let total: u64 = sorted.iter().sum();
    let need = (percentile.min(100.0) / 100.0) * total as f64;
    let mut acc = 0u64;
    for &c in &sorted {
        acc += c;
        if acc as f64 >= need {
            return c;
        }
    }
    *sorted.last().unwrap()
}

/// One substituted span.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    /// Span of the complex phrase in the input sentence.
    pub source_span: Range<usize>,
    /// Span of the simple phrase in the substituted sentence.
    pub target_span: Range<usize>,
    pub complex: Vec<String>,
    pub simple: Vec<String>,
    pub frequency: u64,
}

/// Constraints ordered rarest complex phrase first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet(pub Vec<Constraint>);

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Constraint> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Substitution {
    pub constraints: ConstraintSet,
    pub sentence: Vec<String>,
}

/// A matched span before the `max_constraints` cut.
#[derive(Debug, Clone, PartialEq)]
pub struct Match<'kb> {
    pub span: Range<usize>,
    pub rule: &'kb ParaphraseRule,
}

/// Greedy leftmost-longest matching of complex phrases that pass the
/// frequency test.
pub fn find_matches<'kb>(sentence: &[String], kb: &'kb KnowledgeBase, freq: &FreqTable) -> Vec<Match<'kb>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sentence.len() {
        match kb.candidates(&sentence[i..]).find(|r| freq.is_complex(&r.complex)) {
            Some(rule) => {
                let len = rule.complex.len();
                out.push(Match {
                    span: i..i + len,
                    rule,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

/// Identifies complex phrases and substitutes the `max_constraints` rarest.
pub fn identify_and_substitute(
    sentence: &[String],
    kb: &KnowledgeBase,
    freq: &FreqTable,
    max_constraints: usize,
) -> Substitution {
    let matches = find_matches(sentence, kb, freq);
    let mut order: Vec<(u64, usize)> = matches
        .iter()
        .enumerate()
        .map(|(k, m)| (freq.phrase_frequency(&m.rule.complex), k))
        .collect();
    order.sort_by_key(|&(f, k)| (f, matches[k].span.start));
    order.truncate(max_constraints);
    let mut kept: Vec<usize> = order.iter().map(|&(_, k)| k).collect();
    kept.sort_unstable();

    let mut out = Vec::with_capacity(sentence.len());
    let mut constraints = Vec::with_capacity(kept.len());
    let mut cursor = 0;
    for k in kept {
        let m = &matches[k];
        out.extend_from_slice(&sentence[cursor..m.span.start]);
        let start = out.len();
        out.extend_from_slice(&m.rule.simple);
        constraints.push(Constraint {
            source_span: m.span.clone(),
            target_span: start..out.len(),
            complex: m.rule.complex.clone(),
            simple: m.rule.simple.clone(),
            frequency: freq.phrase_frequency(&m.rule.complex),
        });
        cursor = m.span.end;
    }
    out.extend_from_slice(&sentence[cursor..]);
    constraints.sort_by_key(|c| (c.frequency, c.source_span.start));
    Substitution {
        constraints: ConstraintSet(constraints),
        sentence: out,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coverage {
    pub sentences: usize,
    pub sentences_with_match: usize,
    pub matches: usize,
    pub distinct_rules: usize,
}

/// Match statistics of `kb` over tokenised sentences.
pub fn coverage<S: AsRef<[String]>>(kb: &KnowledgeBase, sentences: &[S], freq: &FreqTable) -> Coverage {
    let mut used = std::collections::HashSet::new();
    let mut cov = Coverage::default();
    for s in sentences {
        let ms = find_matches(s.as_ref(), kb, freq);
        cov.sentences += 1;
        if !ms.is_empty() {
            cov.sentences_with_match += 1;
        }
        cov.matches += ms.len();
        for m in ms {
            used.insert(m.rule as *const ParaphraseRule);
        }
    }
    cov.distinct_rules = used.len();
    cov
}
