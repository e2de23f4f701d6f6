//! SARI over pre-tokenised sentences.
//!
//! Per order n, with input and output n-gram counts multiplied by the number
//! of references `k` and reference counts pooled over all references:
//!
//! - keep: F1 of a per-gram precision `min(keep, ref) / keep` averaged over
//!   kept grams and a recall `Σ min(keep, ref) / Σ min(input, ref)`;
//! - delete: per-gram precision `(del − ref)⁺ / del` averaged over deleted
//!   grams;
//! - add: set-based F1 of output-only grams against reference-only grams.
//!
//! A component whose denominator is empty scores 1.

use std::collections::{HashMap, HashSet};

use super::bleu::{ngram_counts, MAX_ORDER};
use super::{MetricError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SariComponents {
    pub keep: f64,
    pub delete: f64,
    pub add: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p > 0.0 || r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

type Counts<'a> = HashMap<Vec<&'a str>, usize>;

fn get(c: &Counts<'_>, g: &[&str]) -> usize {
    c.get(g).copied().unwrap_or(0)
}

pub fn sari_ngram<S: AsRef<str>>(input: &[S], output: &[S], references: &[&[S]], n: usize) -> SariComponents {
    let k = references.len();
    let s: Counts<'_> = ngram_counts(input, n).into_iter().map(|(g, v)| (g, v * k)).collect();
    let c: Counts<'_> = ngram_counts(output, n).into_iter().map(|(g, v)| (g, v * k)).collect();
    let mut r: Counts<'_> = HashMap::new();
    for refs in references {
        for (g, v) in ngram_counts(refs, n) {
            *r.entry(g).or_default() += v;
        }
    }

    let (mut keep_prec, mut keep_good, mut keep_all, mut kept) = (0.0, 0usize, 0usize, 0usize);
    for (g, &sv) in &s {
        let keep = sv.min(get(&c, g));
        let rv = get(&r, g);
        keep_all += sv.min(rv);
        if keep > 0 {
            let good = keep.min(rv);
            keep_prec += good as f64 / keep as f64;
            keep_good += good;
            kept += 1;
        }
    }
    let keep = f1(ratio(keep_prec, kept as f64), ratio(keep_good as f64, keep_all as f64));

    let (mut del_prec, mut deleted) = (0.0, 0usize);
    for (g, &sv) in &s {
        let del = sv.saturating_sub(get(&c, g));
        if del > 0 {
            del_prec += del.saturating_sub(get(&r, g)) as f64 / del as f64;
            deleted += 1;
        }
    }
    let delete = ratio(del_prec, deleted as f64);

    let added: HashSet<&Vec<&str>> = c.keys().filter(|g| !s.contains_key(*g)).collect();
    let wanted: HashSet<&Vec<&str>> = r.keys().filter(|g| !s.contains_key(*g)).collect();
    let good = added.iter().filter(|g| r.contains_key(**g)).count() as f64;
    let add = f1(ratio(good, added.len() as f64), ratio(good, wanted.len() as f64));

    SariComponents { keep, delete, add }
}

/// Sentence SARI in [0, 100].
pub fn sari_sentence<S: AsRef<str>>(input: &[S], output: &[S], references: &[&[S]]) -> Result<f64> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        let c = sari_ngram(input, output, references, n);
        total += (c.keep + c.delete + c.add) / 3.0;
    }
    Ok(100.0 * total / MAX_ORDER as f64)
}

/// Mean sentence SARI with one reference per sentence.
pub fn sari<S: AsRef<str>>(inputs: &[Vec<S>], outputs: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if inputs.len() != outputs.len() || outputs.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: outputs.len(),
            references: references.len(),
        });
    }
    let mut total = 0.0;
    for ((i, o), r) in inputs.iter().zip(outputs).zip(references) {
        total += sari_sentence(i, o, &[r.as_slice()])?;
    }
    Ok(total / inputs.len() as f64)
}
