//! Corpus-level evaluation: BLEU, iBLEU, SARI and Flesch-Kincaid grade.

mod bleu;
mod fk;
mod sari;

use std::fmt::Write as _;

use thiserror::Error;

pub use bleu::{bleu, ibleu, ibleu_from_scores, BleuStats, IBLEU_ALPHA, MAX_ORDER};
pub use fk::{fk_grade, sentence_count, syllables};
pub use sari::{sari, sari_ngram, sari_sentence, SariComponents};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("at least one reference is required")]
    NoReferences,
    #[error("text contains no words")]
    NoWords,
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// One evaluated sentence: input `I`, system output `O`, reference `R`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTriple {
    pub input: Vec<String>,
    pub output: Vec<String>,
    pub reference: Vec<String>,
}

pub const REPORT_COLUMNS: [&str; 5] = ["FK", "BLEU(O,R)", "BLEU(O,I)", "iBLEU", "SARI"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub system: String,
    pub fk: f64,
    pub bleu_or: f64,
    pub bleu_oi: f64,
    pub ibleu: f64,
    pub sari: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 5] {
        [self.fk, self.bleu_or, self.bleu_oi, self.ibleu, self.sari]
    }

    /// Header plus one row per report, columns padded to a common width.
    pub fn text_table(reports: &[MetricReport]) -> String {
        let name_w = reports.iter().map(|r| r.system.len()).max().unwrap_or(0).max("system".len());
        let mut s = format!("{:<name_w$}", "system");
        for c in REPORT_COLUMNS {
            let _ = write!(s, "  {c:>9}");
        }
        s.push('\n');
        for r in reports {
            let _ = write!(s, "{:<name_w$}", r.system);
            for v in r.values() {
                let _ = write!(s, "  {v:>9.2}");
            }
            s.push('\n');
        }
        s
    }

    /// Full-precision CSV; parses back to identical floats.
    pub fn csv(reports: &[MetricReport]) -> String {
        let mut s = format!("system,{}\n", REPORT_COLUMNS.join(","));
        for r in reports {
            let vals: Vec<String> = r.values().iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{},{}", r.system, vals.join(","));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Vec<MetricReport>> {
        let mut lines = text.lines();
        let header = format!("system,{}", REPORT_COLUMNS.join(","));
        if lines.next() != Some(header.as_str()) {
            return Err(MetricError::Row {
                row: 1,
                reason: "unexpected header".into(),
            });
        }
        let mut out = Vec::new();
        for (i, line) in lines.enumerate() {
            let err = |reason: &str| MetricError::Row {
                row: i + 2,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let v = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err("bad number"))?;
            out.push(MetricReport {
                system: fields[0].to_string(),
                fk: v[0],
                bleu_or: v[1],
                bleu_oi: v[2],
                ibleu: v[3],
                sari: v[4],
            });
        }
        Ok(out)
    }
}

pub fn evaluate_corpus(system: &str, triples: &[EvalTriple]) -> Result<MetricReport> {
    if triples.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    for (row, t) in triples.iter().enumerate() {
        if t.input.is_empty() || t.output.is_empty() || t.reference.is_empty() {
            return Err(MetricError::Row {
                row: row + 1,
                reason: "input, output and reference must be non-empty".into(),
            });
        }
    }
    let inputs: Vec<Vec<String>> = triples.iter().map(|t| t.input.clone()).collect();
    let outputs: Vec<Vec<String>> = triples.iter().map(|t| t.output.clone()).collect();
    let refs: Vec<Vec<String>> = triples.iter().map(|t| t.reference.clone()).collect();
    let bleu_or = bleu(&outputs, &refs)?;
    let bleu_oi = bleu(&outputs, &inputs)?;
    Ok(MetricReport {
        system: system.to_string(),
        fk: fk_grade(&outputs)?,
        bleu_or,
        bleu_oi,
        ibleu: ibleu_from_scores(bleu_or, bleu_oi, IBLEU_ALPHA),
        sari: sari(&inputs, &outputs, &refs)?,
    })
}
