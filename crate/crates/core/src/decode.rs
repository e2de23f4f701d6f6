//! Constrained generation: the backward decoder produces the words before a
//! constraint phrase right to left, the forward decoder continues after it,
//! and several constraints are applied one pass at a time.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{AttentionKeys, Direction, Encoding, ModelError, Seq2SeqModel};
use crate::text::{TokenId, BOS, NUM_SPECIALS};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("constraint phrase is empty")]
    EmptyConstraint,
    #[error("constraint token id {id} is not a regular vocabulary entry")]
    ConstraintOov { id: TokenId },
    #[error("forward prefix is empty")]
    EmptyPrefix,
    #[error("beam_size must be at least 1")]
    ZeroBeam,
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSettings {
    pub beam_size: usize,
    /// Per-direction cap on the whole sequence: constraint block plus
    /// generated tokens for the backward pass, prefix plus generated tokens
    /// for the forward pass. Terminal tokens count.
    pub max_decode_len: usize,
    /// Exponent `a` in `log p / len^a`; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl DecodeSettings {
    pub fn from_model(model: &Seq2SeqModel) -> Self {
        Self {
            beam_size: model.config.beam_size,
            max_decode_len: model.config.max_decode_len,
            length_penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; the terminal token is stripped once returned.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub state: Vec<f64>,
    pub finished: bool,
    /// Log-distribution over the next token; empty once finished.
    next: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    AlreadyPresent,
    PassLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    /// Index into the constraint list.
    pub constraint: usize,
    pub source: Vec<TokenId>,
    pub output: Vec<TokenId>,
    /// Start of the constraint block in `output`.
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    /// Model score of the final pass.
    pub score: f64,
    /// First occurrence of each constraint in `tokens`.
    pub positions: Vec<Option<usize>>,
    pub passes: Vec<PassRecord>,
    pub skipped: Vec<(usize, SkipReason)>,
}

pub fn find_phrase(hay: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

fn check_constraint(model: &Seq2SeqModel, c: &[TokenId]) -> Result<()> {
    if c.is_empty() {
        return Err(DecodeError::EmptyConstraint);
    }
    match c.iter().find(|&&id| id < NUM_SPECIALS || id >= model.config.vocab_size) {
        Some(&id) => Err(DecodeError::ConstraintOov { id }),
        None => Ok(()),
    }
}

struct Search<'a> {
    model: &'a Seq2SeqModel,
    dir: Direction,
    enc: &'a Encoding,
    keys: AttentionKeys,
    settings: DecodeSettings,
}

enum Candidate {
    Token { parent: usize, token: TokenId, score: f64 },
    Forced(Hypothesis),
}

impl Candidate {
    fn score(&self) -> f64 {
        match self {
            Candidate::Token { score, .. } => *score,
            Candidate::Forced(h) => h.log_prob,
        }
    }
}

impl<'a> Search<'a> {
    fn new(model: &'a Seq2SeqModel, dir: Direction, enc: &'a Encoding, settings: DecodeSettings) -> Result<Self> {
        if settings.beam_size == 0 {
            return Err(DecodeError::ZeroBeam);
        }
        Ok(Self {
            model,
            dir,
            keys: model.attention_keys(dir, enc)?,
            enc,
            settings,
        })
    }

    /// Feeds `tokens` after starting from `s₀`; the returned hypothesis has no
    /// generated tokens and a zero score.
    fn start(&self, feed: &[TokenId]) -> Result<Hypothesis> {
        let mut state = self.model.init_decoder_state(self.dir, self.enc.mean.data())?;
        let mut next = Vec::new();
        for &t in feed {
            let out = self.model.decode_step(self.dir, t, &state, self.enc, &self.keys)?;
            state = out.state;
            next = out.log_probs;
        }
        Ok(Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            state,
            finished: false,
            next,
        })
    }

    fn push(&self, h: &Hypothesis, token: TokenId, score: f64) -> Result<Hypothesis> {
        let out = self.model.decode_step(self.dir, token, &h.state, self.enc, &self.keys)?;
        let mut tokens = h.tokens.clone();
        tokens.push(token);
        Ok(Hypothesis {
            tokens,
            log_prob: score,
            state: out.state,
            finished: false,
            next: out.log_probs,
        })
    }

    fn ranking(&self, h: &Hypothesis) -> f64 {
        if self.settings.length_penalty == 0.0 {
            h.log_prob
        } else {
            h.log_prob / (h.tokens.len().max(1) as f64).powf(self.settings.length_penalty)
        }
    }

    /// Beam search over at most `budget` generated tokens. Every phrase in
    /// `must` that is missing from `context ++ tokens` is inserted before the
    /// hypothesis may finish.
    fn run(&self, start: Hypothesis, budget: usize, context: &[TokenId], must: &[Vec<TokenId>]) -> Result<Hypothesis> {
        let terminal = self.dir.terminal();
        let pending = |tokens: &[TokenId]| -> Vec<&Vec<TokenId>> {
            let mut full = context.to_vec();
            full.extend_from_slice(tokens);
            must.iter().filter(|p| find_phrase(&full, p).is_none()).collect()
        };
        if budget == 0 && pending(&[]).is_empty() {
            return Ok(Hypothesis {
                finished: true,
                next: Vec::new(),
                ..start
            });
        }

        let mut alive = vec![start];
        let mut finished: Vec<Hypothesis> = Vec::new();
        while !alive.is_empty() {
            let mut cands = Vec::new();
            for (i, h) in alive.iter().enumerate() {
                let missing = pending(&h.tokens);
                let need: usize = missing.iter().map(|p| p.len()).sum();
                let remaining = budget.saturating_sub(h.tokens.len());
                if !missing.is_empty() && remaining <= need + 1 {
                    let mut forced = h.clone();
                    for &t in missing[0] {
                        let score = forced.log_prob + forced.next[t];
                        forced = self.push(&forced, t, score)?;
                    }
                    cands.push(Candidate::Forced(forced));
                    continue;
                }
                for (token, &lp) in h.next.iter().enumerate() {
                    if !self.dir.can_emit(token) || (token == terminal && !missing.is_empty()) {
                        continue;
                    }
                    cands.push(Candidate::Token {
                        parent: i,
                        token,
                        score: h.log_prob + lp,
                    });
                }
            }

            let order = |a: &Candidate, b: &Candidate| {
                b.score().total_cmp(&a.score()).then_with(|| match (a, b) {
                    (Candidate::Token { parent: pa, token: ta, .. }, Candidate::Token { parent: pb, token: tb, .. }) => {
                        let sa = alive[*pa].tokens.iter().chain(std::iter::once(ta));
                        sa.cmp(alive[*pb].tokens.iter().chain(std::iter::once(tb)))
                    }
                    (Candidate::Forced(x), Candidate::Forced(y)) => x.tokens.cmp(&y.tokens),
                    (Candidate::Forced(_), _) => Ordering::Less,
                    (_, Candidate::Forced(_)) => Ordering::Greater,
                })
            };
            let keep = self.settings.beam_size.min(cands.len());
            if keep < cands.len() {
                cands.select_nth_unstable_by(keep, order);
                cands.truncate(keep);
            }
            cands.sort_by(order);

            let mut next_alive = Vec::with_capacity(keep);
            for c in cands {
                let h = match c {
                    Candidate::Forced(h) => h,
                    Candidate::Token { parent, token, score } => {
                        let p = &alive[parent];
                        if token == terminal || p.tokens.len() + 1 >= budget {
                            let mut tokens = p.tokens.clone();
                            tokens.push(token);
                            finished.push(Hypothesis {
                                tokens,
                                log_prob: score,
                                state: p.state.clone(),
                                finished: true,
                                next: Vec::new(),
                            });
                            continue;
                        }
                        self.push(p, token, score)?
                    }
                };
                if h.tokens.len() >= budget && pending(&h.tokens).is_empty() {
                    finished.push(Hypothesis {
                        finished: true,
                        next: Vec::new(),
                        ..h
                    });
                } else {
                    next_alive.push(h);
                }
            }
            alive = next_alive;

            if self.settings.length_penalty == 0.0 {
                let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
                let best_alive = alive.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
                if best_done >= best_alive {
                    break;
                }
            }
        }

        let best = finished
            .into_iter()
            .min_by(|a, b| {
                self.ranking(b)
                    .total_cmp(&self.ranking(a))
                    .then_with(|| a.tokens.cmp(&b.tokens))
            })
            .expect("search always finishes at least one hypothesis");
        Ok(best)
    }
}

fn strip_terminal(mut h: Hypothesis, terminal: TokenId) -> Hypothesis {
    if h.tokens.last() == Some(&terminal) {
        h.tokens.pop();
    }
    h
}

fn backward_on(model: &Seq2SeqModel, enc: &Encoding, constraint: &[TokenId], settings: DecodeSettings) -> Result<Hypothesis> {
    check_constraint(model, constraint)?;
    let search = Search::new(model, Direction::Backward, enc, settings)?;
    let feed: Vec<TokenId> = constraint.iter().rev().copied().collect();
    let start = search.start(&feed)?;
    let budget = settings.max_decode_len.saturating_sub(constraint.len());
    let h = search.run(start, budget, &[], &[])?;
    Ok(strip_terminal(h, Direction::Backward.terminal()))
}

fn forward_on(
    model: &Seq2SeqModel,
    enc: &Encoding,
    prefix: &[TokenId],
    must: &[Vec<TokenId>],
    settings: DecodeSettings,
) -> Result<Hypothesis> {
    let search = Search::new(model, Direction::Forward, enc, settings)?;
    let mut feed = Vec::with_capacity(prefix.len() + 1);
    feed.push(BOS);
    feed.extend_from_slice(prefix);
    let start = search.start(&feed)?;
    let budget = settings.max_decode_len.saturating_sub(prefix.len());
    let h = search.run(start, budget, prefix, must)?;
    Ok(strip_terminal(h, Direction::Forward.terminal()))
}

/// Tokens before the constraint, nearest first: `y_{s−1}, …, y₁`.
pub fn decode_backward(
    model: &Seq2SeqModel,
    source: &[TokenId],
    constraint: &[TokenId],
    settings: DecodeSettings,
) -> Result<Hypothesis> {
    let enc = model.encode(source)?;
    backward_on(model, &enc, constraint, settings)
}

/// Continuation after a teacher-forced `prefix`.
pub fn decode_forward(
    model: &Seq2SeqModel,
    source: &[TokenId],
    prefix: &[TokenId],
    settings: DecodeSettings,
) -> Result<Hypothesis> {
    if prefix.is_empty() {
        return Err(DecodeError::EmptyPrefix);
    }
    let enc = model.encode(source)?;
    forward_on(model, &enc, prefix, &[], settings)
}

/// Forward decoding from `s₀` with no constraint.
pub fn decode_unconstrained(model: &Seq2SeqModel, source: &[TokenId], settings: DecodeSettings) -> Result<DecodeResult> {
    let enc = model.encode(source)?;
    let h = forward_on(model, &enc, &[], &[], settings)?;
    Ok(DecodeResult {
        tokens: h.tokens,
        score: h.log_prob,
        positions: Vec::new(),
        passes: Vec::new(),
        skipped: Vec::new(),
    })
}

fn constrained_pass(
    model: &Seq2SeqModel,
    source: &[TokenId],
    constraint: &[TokenId],
    must: &[Vec<TokenId>],
    settings: DecodeSettings,
) -> Result<(Vec<TokenId>, usize, f64)> {
    let enc = model.encode(source)?;
    let back = backward_on(model, &enc, constraint, settings)?;
    let mut prefix: Vec<TokenId> = back.tokens.iter().rev().copied().collect();
    let position = prefix.len();
    prefix.extend_from_slice(constraint);
    let fwd = forward_on(model, &enc, &prefix, must, settings)?;
    prefix.extend_from_slice(&fwd.tokens);
    Ok((prefix, position, back.log_prob + fwd.log_prob))
}

/// `reverse(y_b) ++ constraint ++ y_f`.
pub fn decode_constrained(
    model: &Seq2SeqModel,
    source: &[TokenId],
    constraint: &[TokenId],
    settings: DecodeSettings,
) -> Result<DecodeResult> {
    decode_multi(model, source, &[constraint.to_vec()], settings, 1)
}

/// Applies `constraints` in order, one pass each, re-encoding the previous
/// output as the next source. A constraint already present in the current
/// output is skipped; constraints secured by earlier passes must survive
/// later ones.
pub fn decode_multi(
    model: &Seq2SeqModel,
    source: &[TokenId],
    constraints: &[Vec<TokenId>],
    settings: DecodeSettings,
    max_passes: usize,
) -> Result<DecodeResult> {
    for c in constraints {
        check_constraint(model, c)?;
    }
    if constraints.is_empty() {
        return decode_unconstrained(model, source, settings);
    }
    let mut current = source.to_vec();
    let mut score = 0.0;
    let mut passes: Vec<PassRecord> = Vec::new();
    let mut skipped = Vec::new();
    let mut secured: Vec<Vec<TokenId>> = Vec::new();
    for (i, c) in constraints.iter().enumerate() {
        if !passes.is_empty() && find_phrase(&current, c).is_some() {
            skipped.push((i, SkipReason::AlreadyPresent));
            secured.push(c.clone());
            continue;
        }
        if passes.len() >= max_passes {
            skipped.push((i, SkipReason::PassLimit));
            continue;
        }
        let (output, position, s) = constrained_pass(model, &current, c, &secured, settings)?;
        passes.push(PassRecord {
            constraint: i,
            source: current,
            output: output.clone(),
            position,
            score: s,
        });
        secured.push(c.clone());
        current = output;
        score = s;
    }
    let positions = constraints.iter().map(|c| find_phrase(&current, c)).collect::<Vec<_>>();
    for (i, c) in constraints.iter().enumerate() {
        let limited = skipped.contains(&(i, SkipReason::PassLimit));
        assert!(
            limited || positions[i].is_some(),
            "constraint {c:?} missing from decoded output {current:?}"
        );
    }
    Ok(DecodeResult {
        tokens: current,
        score,
        positions,
        passes,
        skipped,
    })
}
