use std::collections::HashMap;
use std::ops::AddAssign;

use super::{MetricError, Result};

pub const MAX_ORDER: usize = 4;
pub const IBLEU_ALPHA: f64 = 0.9;

pub(crate) fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
    }
    out
}

/// Sufficient statistics for corpus BLEU; shards merge by addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }
}

impl BleuStats {
    /// Clipped n-gram matches against the union of `references`; the
    /// reference length is the one closest to the candidate, shorter on ties.
    pub fn sentence<C: AsRef<str>, R: AsRef<str>>(candidate: &[C], references: &[&[R]]) -> Self {
        let mut s = Self {
            candidate_len: candidate.len(),
            reference_len: references
                .iter()
                .map(|r| r.len())
                .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
                .unwrap_or(0),
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            s.totals[n - 1] = cand.values().sum();
            s.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    /// Score in [0, 100]. Orders for which the candidates contain no n-grams
    /// at all are left out of the geometric mean; any order with candidate
    /// n-grams but no matches makes the score 0.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            orders += 1;
        }
        if orders == 0 || self.candidate_len == 0 {
            return 0.0;
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

/// Corpus BLEU with one reference per candidate.
pub fn bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[Vec<C>], references: &[Vec<R>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats += BleuStats::sentence(c, &[r.as_slice()]);
    }
    Ok(stats.score())
}

/// `α·BLEU(O,R) − (1−α)·BLEU(O,I)`
pub fn ibleu_from_scores(bleu_or: f64, bleu_oi: f64, alpha: f64) -> f64 {
    alpha * bleu_or - (1.0 - alpha) * bleu_oi
}

pub fn ibleu<S: AsRef<str>>(outputs: &[Vec<S>], references: &[Vec<S>], inputs: &[Vec<S>], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MetricError::Alpha(alpha));
    }
    Ok(ibleu_from_scores(bleu(outputs, references)?, bleu(outputs, inputs)?, alpha))
}
