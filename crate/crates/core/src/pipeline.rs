//! Configuration file handling and the end-to-end train / simplify flows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::decode::{decode_multi, DecodeError, DecodeResult, DecodeSettings, SkipReason};
use crate::lexsub::{identify_and_substitute, FreqTable, KbError, KnowledgeBase, DEFAULT_COMPLEXITY_PERCENTILE};
use crate::model::{ModelConfig, ModelError, Seq2SeqModel};
use crate::text::{detokenize, load_parallel_tokens, tokenize, CorpusError, CorpusSplit, TokenPair, Vocabulary};
use crate::train::{prepare_examples, train, TrainConfig, TrainError, TrainLog, TrainOutput};

pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: {reason}")]
    Line { origin: String, line: usize, reason: String },
    #[error("`{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Upper bound on vocabulary entries, reserved tokens included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub share_decoders: bool,
    pub beam: usize,
    pub max_decode_len: usize,
    pub length_penalty: f64,
    pub max_constraints: usize,
    /// 0 means one pass per constraint.
    pub max_passes: usize,
    pub complexity_percentile: f64,
    pub valid_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            train_source: None,
            train_target: None,
            kb: None,
            checkpoint: None,
            output_dir: None,
            vocab_size: 60_000,
            embed_dim: 620,
            hidden_dim: 1000,
            share_decoders: false,
            beam: 5,
            max_decode_len: 100,
            length_penalty: 0.0,
            max_constraints: 3,
            max_passes: 0,
            complexity_percentile: DEFAULT_COMPLEXITY_PERCENTILE,
            valid_size: 0,
            test_size: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            rho: t.rho,
            eps: t.eps,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            checkpoint_every: t.checkpoint_every,
            seed: t.seed,
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn path_value(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// ignored, absent keys keep their defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ConfigError::Line {
                origin: origin.to_string(),
                line: i + 1,
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            c.set(k, v).map_err(|r| err(format!("`{k}`: {r}")))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn set(&mut self, k: &str, v: &str) -> Result<(), String> {
        match k {
            "train_source" => self.train_source = path_value(v),
            "train_target" => self.train_target = path_value(v),
            "kb" => self.kb = path_value(v),
            "checkpoint" => self.checkpoint = path_value(v),
            "output_dir" => self.output_dir = path_value(v),
            "vocab_size" => self.vocab_size = parse_num(v)?,
            "embed_dim" => self.embed_dim = parse_num(v)?,
            "hidden_dim" => self.hidden_dim = parse_num(v)?,
            "share_decoders" => self.share_decoders = parse_num(v)?,
            "beam" => self.beam = parse_num(v)?,
            "max_decode_len" => self.max_decode_len = parse_num(v)?,
            "length_penalty" => self.length_penalty = parse_num(v)?,
            "max_constraints" => self.max_constraints = parse_num(v)?,
            "max_passes" => self.max_passes = parse_num(v)?,
            "complexity_percentile" => self.complexity_percentile = parse_num(v)?,
            "valid_size" => self.valid_size = parse_num(v)?,
            "test_size" => self.test_size = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "rho" => self.rho = parse_num(v)?,
            "eps" => self.eps = parse_num(v)?,
            "clip_norm" => self.clip_norm = parse_num(v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Range checks for every numeric field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.beam == 0 {
            return bad("beam", "must be at least 1");
        }
        if self.vocab_size <= crate::text::NUM_SPECIALS {
            return bad("vocab_size", "must exceed the 4 reserved tokens");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be positive");
        }
        if self.max_decode_len < 2 {
            return bad("max_decode_len", "must be at least 2");
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return bad("length_penalty", "must be a finite non-negative number");
        }
        if !(0.0..=100.0).contains(&self.complexity_percentile) {
            return bad("complexity_percentile", "must lie in [0, 100]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho", "must lie in (0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", "must be positive");
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm", "must be non-negative (0 disables clipping)");
        }
        Ok(())
    }

    /// Every key with its effective value; [`PipelineConfig::parse`] reads it
    /// back to an equal config.
    pub fn echo(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("train_source", p(&self.train_source));
        kv("train_target", p(&self.train_target));
        kv("kb", p(&self.kb));
        kv("checkpoint", p(&self.checkpoint));
        kv("output_dir", p(&self.output_dir));
        kv("vocab_size", self.vocab_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("share_decoders", self.share_decoders.to_string());
        kv("beam", self.beam.to_string());
        kv("max_decode_len", self.max_decode_len.to_string());
        kv("length_penalty", self.length_penalty.to_string());
        kv("max_constraints", self.max_constraints.to_string());
        kv("max_passes", self.max_passes.to_string());
        kv("complexity_percentile", self.complexity_percentile.to_string());
        kv("valid_size", self.valid_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("rho", self.rho.to_string());
        kv("eps", self.eps.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// The path stored under `key`, which must be set and exist.
    pub fn existing_path<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        let p = value.as_deref().ok_or_else(|| ConfigError::Value {
            key: key.into(),
            reason: "not set".into(),
        })?;
        if !p.exists() {
            return Err(ConfigError::Value {
                key: key.into(),
                reason: format!("{} does not exist", p.display()),
            });
        }
        Ok(p)
    }

    pub fn model_config(&self, vocab_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab_len,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            beam_size: self.beam,
            max_decode_len: self.max_decode_len,
            share_decoders: self.share_decoders,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            rho: self.rho,
            eps: self.eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings {
            beam_size: self.beam,
            max_decode_len: self.max_decode_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no usable training pairs")]
    NoTrainingData,
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub vocab_len: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub rejected_lines: usize,
}

/// Splits the corpus, builds vocabulary and frequency table from the training
/// split, trains, and writes checkpoints, the log, the config echo and the
/// held-out test split into `out_dir`.
pub fn run_training(cfg: &PipelineConfig, source: &Path, target: &Path, out_dir: &Path) -> Result<TrainSummary, PipelineError> {
    let report = load_parallel_tokens(source, target)?;
    let split = CorpusSplit::random(report.pairs, cfg.valid_size, cfg.test_size, cfg.seed);
    if split.train.is_empty() {
        return Err(PipelineError::NoTrainingData);
    }
    let sides = || split.train.iter().flat_map(|p: &TokenPair| [p.source.as_slice(), p.target.as_slice()]);
    let vocab = Vocabulary::build(sides(), cfg.vocab_size)?;
    let freq = FreqTable::from_corpus(sides(), cfg.complexity_percentile);
    let kb = match &cfg.kb {
        Some(p) => KnowledgeBase::load(p)?,
        None => KnowledgeBase::default(),
    };
    let train_ex = prepare_examples(&split.train, &vocab, &kb, &freq);
    let valid_ex = prepare_examples(&split.valid, &vocab, &kb, &freq);

    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut echo = cfg.clone();
    echo.train_source = Some(source.to_path_buf());
    echo.train_target = Some(target.to_path_buf());
    echo.output_dir = Some(out_dir.to_path_buf());
    write_file(&out_dir.join(CONFIG_ECHO), &echo.echo())?;
    let join = |side: fn(&TokenPair) -> &Vec<String>| {
        split.test.iter().map(|p| format!("{}\n", side(p).join(" "))).collect::<String>()
    };
    write_file(&out_dir.join("test.src"), &join(|p| &p.source))?;
    write_file(&out_dir.join("test.tgt"), &join(|p| &p.target))?;

    let mut model = Seq2SeqModel::new(cfg.model_config(vocab.len()), cfg.seed)?;
    let out = TrainOutput {
        dir: out_dir,
        vocab: &vocab,
        freq: &freq,
    };
    let log = train(&mut model, &train_ex, &valid_ex, &cfg.train_config(), Some(&out))?;
    Ok(TrainSummary {
        log,
        vocab_len: vocab.len(),
        train_pairs: train_ex.len(),
        valid_pairs: valid_ex.len(),
        test_pairs: split.test.len(),
        rejected_lines: report.rejected.len(),
    })
}

/// Everything needed to simplify sentences; immutable and shareable across
/// threads.
pub struct Simplifier {
    pub checkpoint: Checkpoint,
    pub kb: KnowledgeBase,
    pub settings: DecodeSettings,
    pub max_constraints: usize,
    pub max_passes: usize,
}

impl Simplifier {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let ck = cfg.existing_path("checkpoint", &cfg.checkpoint)?;
        let kb = cfg.existing_path("kb", &cfg.kb)?;
        Ok(Self {
            checkpoint: Checkpoint::load(ck)?,
            kb: KnowledgeBase::load(kb)?,
            settings: cfg.decode_settings(),
            max_constraints: cfg.max_constraints,
            max_passes: cfg.max_passes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceConstraint {
    pub complex: String,
    pub simple: String,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePass {
    pub constraint: usize,
    pub source: String,
    pub output: String,
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub input: String,
    pub substituted: String,
    pub constraints: Vec<TraceConstraint>,
    pub passes: Vec<TracePass>,
    pub skipped: Vec<(usize, &'static str)>,
    pub output: String,
    pub score: f64,
}

impl Trace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace fields are always serialisable")
    }
}

#[derive(Debug, Clone)]
pub struct SimplifyOutput {
    pub text: String,
    pub result: Option<DecodeResult>,
    pub trace: Trace,
}

/// Tokenise, substitute complex phrases, decode with the substituted simple
/// phrases as constraints, detokenise.
pub fn run_simplify_pipeline(sentence: &str, s: &Simplifier) -> Result<SimplifyOutput, PipelineError> {
    let Checkpoint { model, vocab, freq } = &s.checkpoint;
    let tokens = tokenize(sentence);
    let sub = identify_and_substitute(&tokens, &s.kb, freq, s.max_constraints);
    let constraints: Vec<TraceConstraint> = sub
        .constraints
        .iter()
        .map(|c| TraceConstraint {
            complex: c.complex.join(" "),
            simple: c.simple.join(" "),
            frequency: c.frequency,
        })
        .collect();
    let mut trace = Trace {
        input: tokens.join(" "),
        substituted: sub.sentence.join(" "),
        constraints,
        passes: Vec::new(),
        skipped: Vec::new(),
        output: String::new(),
        score: 0.0,
    };
    if tokens.is_empty() {
        return Ok(SimplifyOutput {
            text: String::new(),
            result: None,
            trace,
        });
    }
    let source = vocab.encode(&sub.sentence);
    let ids: Vec<Vec<usize>> = sub.constraints.iter().map(|c| vocab.encode(&c.simple)).collect();
    let max_passes = if s.max_passes == 0 { ids.len() } else { s.max_passes };
    let result = decode_multi(model, &source, &ids, s.settings, max_passes)?;
    let out_tokens = vocab.render(&result.tokens);
    let render = |ids: &[usize]| vocab.render(ids).join(" ");
    trace.passes = result
        .passes
        .iter()
        .map(|p| TracePass {
            constraint: p.constraint,
            source: render(&p.source),
            output: render(&p.output),
            position: p.position,
            score: p.score,
        })
        .collect();
    trace.skipped = result
        .skipped
        .iter()
        .map(|&(i, r)| {
            let why = match r {
                SkipReason::AlreadyPresent => "already_present",
                SkipReason::PassLimit => "pass_limit",
            };
            (i, why)
        })
        .collect();
    trace.output = out_tokens.join(" ");
    trace.score = result.score;
    Ok(SimplifyOutput {
        text: detokenize(&out_tokens),
        result: Some(result),
        trace,
    })
}
