//! Plain-text checkpoint holding everything `simplify` needs: model
//! configuration, vocabulary, token counts and every named parameter tensor.
//!
//! ```text
//! consimp-checkpoint 1
//! config <key>=<value> ...
//! vocab <n>
//! <token>                       n lines, ids 4.. in order
//! freq <n> <threshold>
//! <token>\t<count>              n lines, sorted by token
//! tensors <n>
//! tensor <name> <dim>...
//! <value> <value> ...           one line per tensor
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so save → load is exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::lexsub::FreqTable;
use crate::model::{ModelConfig, ModelError, ParamStore, Seq2SeqModel};
use crate::tensor::Tensor;
use crate::text::{read_file, CorpusError, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "consimp-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Read(#[from] CorpusError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("checkpoint does not fit its configuration: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub vocab: Vocabulary,
    pub freq: FreqTable,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let c = &self.model.config;
        let mut s = format!("{MAGIC} {FORMAT_VERSION}\n");
        let _ = writeln!(
            s,
            "config vocab_size={} embed_dim={} hidden_dim={} beam_size={} max_decode_len={} share_decoders={}",
            c.vocab_size, c.embed_dim, c.hidden_dim, c.beam_size, c.max_decode_len, c.share_decoders
        );
        let _ = writeln!(s, "vocab {}", self.vocab.regular_tokens().len());
        s.push_str(&self.vocab.to_file_string());
        let mut counts: Vec<_> = self.freq.counts().iter().collect();
        counts.sort();
        let _ = writeln!(s, "freq {} {}", counts.len(), self.freq.threshold());
        for (tok, n) in counts {
            let _ = writeln!(s, "{tok}\t{n}");
        }
        let store = &self.model.store;
        let _ = writeln!(s, "tensors {}", store.len());
        for id in store.ids() {
            let t = store.get(id);
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(s, "tensor {} {}", store.name(id), dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut r = Reader {
            lines: text.lines().enumerate(),
            line: 0,
        };
        let header = r.next()?;
        if header != format!("{MAGIC} {FORMAT_VERSION}") {
            return Err(r.err(format!("expected `{MAGIC} {FORMAT_VERSION}` header")));
        }
        let config = parse_config_line(&mut r)?;

        let n: usize = r.counted("vocab")?[0];
        let start = r.line;
        let mut vocab_text = String::new();
        for _ in 0..n {
            vocab_text.push_str(r.next()?);
            vocab_text.push('\n');
        }
        let vocab = Vocabulary::parse_file_string(&vocab_text).map_err(|e| match e {
            CorpusError::VocabFile { line, reason } => CheckpointError::Format {
                line: start + line,
                reason,
            },
            other => other.into(),
        })?;

        let head = r.counted("freq")?;
        let (n, threshold) = (head[0], head.get(1).copied().unwrap_or(0) as u64);
        let mut counts = HashMap::with_capacity(n);
        for _ in 0..n {
            let row = r.next()?;
            let (tok, c) = row.split_once('\t').ok_or_else(|| r.err("expected `token<TAB>count`"))?;
            let c: u64 = c.parse().map_err(|_| r.err("bad count"))?;
            counts.insert(tok.to_string(), c);
        }
        let freq = FreqTable::from_counts(counts, 0.0).with_threshold(threshold);

        let n = r.counted("tensors")?[0];
        let mut store = ParamStore::default();
        for _ in 0..n {
            let head = r.next()?;
            let mut parts = head.split(' ');
            if parts.next() != Some("tensor") {
                return Err(r.err("expected `tensor <name> <dims>`"));
            }
            let name = parts.next().ok_or_else(|| r.err("missing tensor name"))?.to_string();
            let shape = parts
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| r.err("bad dimension"))?;
            let row = r.next()?;
            let data = row
                .split(' ')
                .filter(|v| !v.is_empty())
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| r.err("bad float"))?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
            store.add(name, t);
        }
        if r.next()? != "end" {
            return Err(r.err("expected `end`"));
        }
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            ))
            .into());
        }
        let model = Seq2SeqModel::from_store(config, store)?;
        Ok(Self { model, vocab, freq })
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let werr = |source| CheckpointError::Write {
            path: path.to_path_buf(),
            source,
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(werr)?;
        tmp.write_all(self.to_text().as_bytes()).map_err(werr)?;
        tmp.as_file().sync_all().map_err(werr)?;
        tmp.persist(path).map_err(|e| werr(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_text(&read_file(path)?)
    }
}

struct Reader<'a, I: Iterator<Item = (usize, &'a str)>> {
    lines: I,
    line: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Reader<'a, I> {
    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(CheckpointError::Format {
                line: self.line + 1,
                reason: "unexpected end of file".into(),
            }),
        }
    }

    fn err(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            line: self.line,
            reason: reason.into(),
        }
    }

    /// Parses `<keyword> <n> [<m> ...]`.
    fn counted(&mut self, keyword: &str) -> Result<Vec<usize>, CheckpointError> {
        let l = self.next()?;
        let mut parts = l.split(' ');
        if parts.next() != Some(keyword) {
            return Err(self.err(format!("expected `{keyword} <count>`")));
        }
        let nums = parts
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| self.err(format!("bad `{keyword}` count")))?;
        if nums.is_empty() {
            return Err(self.err(format!("missing `{keyword}` count")));
        }
        Ok(nums)
    }
}

fn parse_config_line<'a, I: Iterator<Item = (usize, &'a str)>>(
    r: &mut Reader<'a, I>,
) -> Result<ModelConfig, CheckpointError> {
    let l = r.next()?;
    let mut parts = l.split(' ');
    if parts.next() != Some("config") {
        return Err(r.err("expected `config` line"));
    }
    let mut c = ModelConfig::default();
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| r.err(format!("bad config entry `{kv}`")))?;
        let num = || v.parse::<usize>().map_err(|_| r.err(format!("bad value for `{k}`")));
        match k {
            "vocab_size" => c.vocab_size = num()?,
            "embed_dim" => c.embed_dim = num()?,
            "hidden_dim" => c.hidden_dim = num()?,
            "beam_size" => c.beam_size = num()?,
            "max_decode_len" => c.max_decode_len = num()?,
            "share_decoders" => {
                c.share_decoders = v.parse().map_err(|_| r.err("bad value for `share_decoders`"))?
            }
            _ => return Err(r.err(format!("unknown config key `{k}`"))),
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{randomize, tiny_config};

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::from_regular(["center", "hub", "the", "."].map(String::from));
        let config = ModelConfig {
            share_decoders: true,
            ..tiny_config(vocab.len(), 2, 3)
        };
        let mut model = Seq2SeqModel::new(config, 3).unwrap();
        randomize(&mut model, 8, 1.0);
        let sentences = [vec!["the", "hub", "the"], vec!["center", "."]];
        let freq = FreqTable::from_corpus(sentences.iter().map(Vec::as_slice), 30.0);
        Checkpoint { model, vocab, freq }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ck = sample();
        let text = ck.to_text();
        assert!(text.starts_with("consimp-checkpoint 1\n"));
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn file_round_trip_overwrites_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn corrupt_inputs_name_the_line() {
        let text = sample().to_text();
        let err = Checkpoint::from_text(&text.replacen("consimp-checkpoint 1", "consimp-checkpoint 9", 1)).unwrap_err();
        assert!(matches!(err, CheckpointError::Format { line: 1, .. }));

        let err = Checkpoint::from_text(&text.replacen("hidden_dim=3", "hidden_dim=x", 1)).unwrap_err();
        assert!(matches!(err, CheckpointError::Format { line: 2, .. }));

        let truncated: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Checkpoint::from_text(&truncated).unwrap_err(),
            CheckpointError::Format { .. }
        ));

        let err = Checkpoint::from_text(&text.replacen("hidden_dim=3", "hidden_dim=4", 1)).unwrap_err();
        assert!(matches!(err, CheckpointError::Model(_)));
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/x")), Err(CheckpointError::Read(_))));
    }
}
