use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use consimp::checkpoint::Checkpoint;
use consimp::decode::DecodeSettings;
use consimp::lexsub::{coverage, FreqTable, KnowledgeBase, DEFAULT_COMPLEXITY_PERCENTILE};
use consimp::metrics::{evaluate_corpus, EvalTriple, MetricReport};
use consimp::pipeline::{run_simplify_pipeline, PipelineConfig, PipelineError, Simplifier};
use consimp::text::tokenize;

#[derive(Parser)]
#[command(name = "consimp", version, about = "Lexically constrained sentence simplification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a parallel corpus.
    Train {
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Complex side, one sentence per line. Overrides `train_source`.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Simple side, aligned with --source. Overrides `train_target`.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Simplify every line of a file.
    Simplify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the beam size stored in the checkpoint.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value_t = 3)]
        max_constraints: usize,
        /// 0 runs one pass per constraint.
        #[arg(long, default_value_t = 0)]
        max_passes: usize,
        #[arg(long, default_value_t = 0.0)]
        length_penalty: f64,
        /// Writes one JSON object per input line.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score system output against inputs and references.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
        /// Row label; defaults to the output file stem.
        #[arg(long)]
        system: Option<String>,
    },
    /// Validate a paraphrase knowledge base and report its coverage.
    KbCheck {
        #[arg(long)]
        kb: PathBuf,
        /// Tokenised sentences used for coverage and word frequencies.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_COMPLEXITY_PERCENTILE)]
        percentile: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Text,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Model(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Model(_) => 3,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Usage(e.into()),
            PipelineError::Corpus(_) | PipelineError::Kb(_) | PipelineError::NoTrainingData | PipelineError::Write { .. } => {
                Failure::Data(e.into())
            }
            PipelineError::Checkpoint(_) | PipelineError::Model(_) | PipelineError::Decode(_) | PipelineError::Train(_) => {
                Failure::Model(e.into())
            }
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Data)?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_out(path: Option<&Path>, text: &str) -> Outcome {
    let r = match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("cannot write to stdout"),
    };
    r.map_err(Failure::Data)
}

fn train(config: Option<PathBuf>, source: Option<PathBuf>, target: Option<PathBuf>, out_dir: Option<PathBuf>) -> Outcome {
    let mut cfg = match &config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Usage(e.into()))?,
        None => PipelineConfig::default(),
    };
    cfg.train_source = source.or(cfg.train_source);
    cfg.train_target = target.or(cfg.train_target);
    cfg.output_dir = out_dir.or(cfg.output_dir);
    let missing = |k: &str| Failure::Usage(anyhow!("`{k}` must be given in the config or on the command line"));
    let src = cfg.existing_path("train_source", &cfg.train_source).map_err(|e| Failure::Data(e.into()))?;
    let tgt = cfg.existing_path("train_target", &cfg.train_target).map_err(|e| Failure::Data(e.into()))?;
    let out = cfg.output_dir.as_deref().ok_or_else(|| missing("output_dir"))?;
    if let Some(kb) = &cfg.kb {
        cfg.existing_path("kb", &Some(kb.clone())).map_err(|e| Failure::Data(e.into()))?;
    }
    let summary = consimp::pipeline::run_training(&cfg, src, tgt, out)?;
    eprintln!(
        "trained on {} pairs ({} validation, {} test held out, {} lines rejected), vocabulary {}",
        summary.train_pairs, summary.valid_pairs, summary.test_pairs, summary.rejected_lines, summary.vocab_len
    );
    if let Some(last) = summary.log.epochs.last() {
        eprintln!("final epoch {}: train loss {:.4}", last.epoch, last.train_loss);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simplify(
    model: PathBuf,
    kb: PathBuf,
    input: PathBuf,
    beam: Option<usize>,
    max_constraints: usize,
    max_passes: usize,
    length_penalty: f64,
    trace: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Outcome {
    if beam == Some(0) {
        return Err(Failure::Usage(anyhow!("--beam must be at least 1")));
    }
    if !(length_penalty >= 0.0 && length_penalty.is_finite()) {
        return Err(Failure::Usage(anyhow!("--length-penalty must be a finite non-negative number")));
    }
    let checkpoint = Checkpoint::load(&model).map_err(|e| Failure::Model(e.into()))?;
    let kb = KnowledgeBase::load(&kb).map_err(|e| Failure::Data(e.into()))?;
    let mut settings = DecodeSettings::from_model(&checkpoint.model);
    if let Some(b) = beam {
        settings.beam_size = b;
    }
    settings.length_penalty = length_penalty;
    let s = Simplifier {
        checkpoint,
        kb,
        settings,
        max_constraints,
        max_passes,
    };
    let lines = read_lines(&input)?;
    let results: Vec<_> = lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| run_simplify_pipeline(line, &s).map_err(|e| (i, e)))
        .collect();
    let mut text = String::new();
    let mut traces = String::new();
    for r in results {
        let out = r.map_err(|(i, e)| {
            let line = i + 1;
            match Failure::from(e) {
                Failure::Usage(e) => Failure::Usage(e.context(format!("line {line}"))),
                Failure::Data(e) => Failure::Data(e.context(format!("line {line}"))),
                Failure::Model(e) => Failure::Model(e.context(format!("line {line}"))),
            }
        })?;
        text.push_str(&out.text);
        text.push('\n');
        traces.push_str(&out.trace.to_json_line());
        traces.push('\n');
    }
    write_out(output.as_deref(), &text)?;
    if let Some(t) = trace {
        write_out(Some(&t), &traces)?;
    }
    Ok(())
}

fn evaluate(input: PathBuf, output: PathBuf, reference: PathBuf, report: ReportFormat, system: Option<String>) -> Outcome {
    let (i, o, r) = (read_lines(&input)?, read_lines(&output)?, read_lines(&reference)?);
    if i.len() != o.len() || o.len() != r.len() {
        return Err(Failure::Data(anyhow!(
            "line counts differ: input {}, output {}, reference {}",
            i.len(),
            o.len(),
            r.len()
        )));
    }
    let triples: Vec<EvalTriple> = i
        .iter()
        .zip(&o)
        .zip(&r)
        .map(|((i, o), r)| EvalTriple {
            input: tokenize(i),
            output: tokenize(o),
            reference: tokenize(r),
        })
        .collect();
    let name = system.unwrap_or_else(|| {
        output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "system".into())
    });
    let rep = evaluate_corpus(&name, &triples).map_err(|e| Failure::Data(e.into()))?;
    let text = match report {
        ReportFormat::Csv => MetricReport::csv(&[rep]),
        ReportFormat::Text => MetricReport::text_table(&[rep]),
    };
    write_out(None, &text)
}

fn kb_check(kb: PathBuf, corpus: Option<PathBuf>, percentile: f64) -> Outcome {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Failure::Usage(anyhow!("--percentile must lie in [0, 100]")));
    }
    let kb = KnowledgeBase::load(&kb).map_err(|e| Failure::Data(e.into()))?;
    let mut report = format!("rules: {}\nrejected: {}\n", kb.len(), kb.rejected().len());
    for r in kb.rejected() {
        report.push_str(&format!("  line {}: {}\n", r.line, r.reason));
    }
    if let Some(c) = corpus {
        let sentences: Vec<Vec<String>> = read_lines(&c)?.iter().map(|l| tokenize(l)).collect();
        let freq = FreqTable::from_corpus(sentences.iter().map(Vec::as_slice), percentile);
        let cov = coverage(&kb, &sentences, &freq);
        let pct = if cov.sentences == 0 {
            0.0
        } else {
            100.0 * cov.sentences_with_match as f64 / cov.sentences as f64
        };
        report.push_str(&format!(
            "sentences: {}\nsentences with a match: {} ({pct:.1}%)\nmatches: {}\ndistinct rules used: {}\ncomplexity threshold: {}\n",
            cov.sentences,
            cov.sentences_with_match,
            cov.matches,
            cov.distinct_rules,
            freq.threshold()
        ));
    }
    write_out(None, &report)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train {
            config,
            source,
            target,
            out_dir,
        } => train(config, source, target, out_dir),
        Command::Simplify {
            model,
            kb,
            input,
            beam,
            max_constraints,
            max_passes,
            length_penalty,
            trace,
            output,
        } => simplify(model, kb, input, beam, max_constraints, max_passes, length_penalty, trace, output),
        Command::Evaluate {
            input,
            output,
            reference,
            report,
            system,
        } => evaluate(input, output, reference, report, system),
        Command::KbCheck { kb, corpus, percentile } => kb_check(kb, corpus, percentile),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Model(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
