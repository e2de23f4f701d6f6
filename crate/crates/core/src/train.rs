//! Joint teacher-forced training of the encoder and both decoders.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::lexsub::{FreqTable, KnowledgeBase};
use crate::model::{ModelError, ModelGraph, ParamStore, Seq2SeqModel};
use crate::tensor::{central_differences, compare_gradients, GradCheckReport, TensorError, Var};
use crate::text::{is_punctuation, TokenId, TokenPair, Vocabulary, BOS, EOS};

/// Examples whose gradients are computed concurrently before being summed in
/// index order; fixed so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("gradient count {got} does not match parameter count {expected}")]
    GradientCount { got: usize, expected: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyCorpus,
    #[error("constraint span {start}+{len} outside target of length {target_len}")]
    Span { start: usize, len: usize, target_len: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            rho: 0.95,
            eps: 1e-6,
            clip_norm: Some(5.0),
            seed: 1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(TrainError::Config("rho must lie in (0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(TrainError::Config("eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(TrainError::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Target span fed as the constraint block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub constraint: Span,
}

impl TrainingExample {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>, constraint: Span) -> Result<Self> {
        if constraint.len == 0 || constraint.end() > target.len() {
            return Err(TrainError::Span {
                start: constraint.start,
                len: constraint.len,
                target_len: target.len(),
            });
        }
        Ok(Self {
            source,
            target,
            constraint,
        })
    }

    pub fn constraint_ids(&self) -> &[TokenId] {
        &self.target[self.constraint.start..self.constraint.end()]
    }

    /// Scored predictions: tokens outside the block plus both boundaries.
    pub fn num_predictions(&self) -> usize {
        self.target.len() - self.constraint.len + 2
    }
}

fn find<S: AsRef<str>>(hay: &[S], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len())
        .position(|w| w.iter().zip(needle).all(|(a, b)| a.as_ref() == b))
}

/// Picks the target span that a rule rewrites into from the source, the rule
/// with the rarest complex side winning; falls back to the rarest
/// non-punctuation target token. Ties go to the earlier position.
pub fn select_training_constraint(
    source: &[String],
    target: &[String],
    kb: &KnowledgeBase,
    freq: &FreqTable,
) -> Option<Span> {
    if target.is_empty() {
        return None;
    }
    let mut best: Option<(u64, usize, Span)> = None;
    for rule in kb.rules() {
        if find(source, &rule.complex).is_none() {
            continue;
        }
        if let Some(pos) = find(target, &rule.simple) {
            let key = (freq.phrase_frequency(&rule.complex), pos);
            if best.is_none_or(|(f, p, _)| key < (f, p)) {
                best = Some((key.0, key.1, Span { start: pos, len: rule.simple.len() }));
            }
        }
    }
    if let Some((_, _, span)) = best {
        return Some(span);
    }
    let start = target
        .iter()
        .enumerate()
        .filter(|(_, t)| !is_punctuation(t))
        .min_by_key(|&(i, t)| (freq.count(t), i))
        .map_or(0, |(i, _)| i);
    Some(Span { start, len: 1 })
}

/// Maps pairs to ids and attaches their training constraint; pairs with an
/// empty side are dropped.
pub fn prepare_examples(pairs: &[TokenPair], vocab: &Vocabulary, kb: &KnowledgeBase, freq: &FreqTable) -> Vec<TrainingExample> {
    pairs
        .iter()
        .filter(|p| !p.source.is_empty())
        .filter_map(|p| {
            let span = select_training_constraint(&p.source, &p.target, kb, freq)?;
            let ids = p.to_ids(vocab);
            Some(TrainingExample {
                source: ids.source,
                target: ids.target,
                constraint: span,
            })
        })
        .collect()
}

/// Negative log-likelihood of both directions under teacher forcing.
pub fn loss_graph(g: &mut ModelGraph<'_>, model: &Seq2SeqModel, ex: &TrainingExample) -> Result<Var> {
    let (h, mean) = g.encode(&ex.source)?;
    let Span { start, len } = ex.constraint;
    let mut terms = Vec::with_capacity(ex.num_predictions());

    let dec = &model.backward;
    let keys = g.attention_keys(dec, h)?;
    let mut s = g.init_state(dec, mean)?;
    let mut feed: Vec<TokenId> = ex.target[..start + len].iter().rev().copied().collect();
    feed.push(BOS);
    for (i, pair) in feed.windows(2).enumerate() {
        let (prev, next) = (pair[0], pair[1]);
        let (s2, e, c) = g.advance(dec, prev, s, h, keys)?;
        s = s2;
        if i + 1 >= len {
            let logits = g.logits(dec, e, s, c)?;
            let lp = g.tape.log_softmax(logits)?;
            terms.push(g.tape.pick(lp, next)?);
        }
    }

    let dec = &model.forward;
    let keys = g.attention_keys(dec, h)?;
    let mut s = g.init_state(dec, mean)?;
    let mut feed = Vec::with_capacity(ex.target.len() + 2);
    feed.push(BOS);
    feed.extend_from_slice(&ex.target);
    feed.push(EOS);
    for (i, pair) in feed.windows(2).enumerate() {
        let (prev, next) = (pair[0], pair[1]);
        let (s2, e, c) = g.advance(dec, prev, s, h, keys)?;
        s = s2;
        if i >= start + len {
            let logits = g.logits(dec, e, s, c)?;
            let lp = g.tape.log_softmax(logits)?;
            terms.push(g.tape.pick(lp, next)?);
        }
    }
    let total = g.tape.sum_all(&terms)?;
    Ok(g.tape.neg(total))
}

pub fn training_loss(model: &Seq2SeqModel, ex: &TrainingExample) -> Result<f64> {
    let mut g = model.graph();
    let loss = loss_graph(&mut g, model, ex)?;
    Ok(g.tape.scalar(loss))
}

/// Loss and one gradient per parameter (zeros where the example does not
/// reach it).
pub fn loss_and_grads(model: &Seq2SeqModel, ex: &TrainingExample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = model.graph();
    let loss = loss_graph(&mut g, model, ex)?;
    g.tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(model.store.len());
    let bound = g.param_grads();
    let mut it = bound.into_iter().peekable();
    for id in model.store.ids() {
        match it.peek() {
            Some((pid, grad)) if *pid == id => {
                grads.push(grad.to_vec());
                it.next();
            }
            _ => grads.push(vec![0.0; model.store.get(id).numel()]),
        }
    }
    Ok((g.tape.scalar(loss), grads))
}

/// Central-difference check of [`loss_and_grads`] over every parameter.
pub fn gradient_check(model: &Seq2SeqModel, ex: &TrainingExample, eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grads(model, ex)?;
    let mut probe = model.clone();
    let mut tensors = model.store.tensors().to_vec();
    let mut failure = None;
    let numeric = central_differences(&mut tensors, eps, |ts| {
        for (dst, src) in probe.store.tensors_mut().iter_mut().zip(ts) {
            dst.data_mut().copy_from_slice(src.data());
        }
        training_loss(&probe, ex).unwrap_or_else(|e| {
            failure.get_or_insert(e.to_string());
            f64::NAN
        })
    });
    if let Some(msg) = failure {
        return Err(TrainError::Config(msg));
    }
    Ok(compare_gradients(&analytic, &numeric))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    /// Running average of squared gradients.
    pub sq_grad: Vec<Vec<f64>>,
    /// Running average of squared updates.
    pub sq_update: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δ = −√(E[Δ²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δ²] ← ρE[Δ²] + (1−ρ)Δ²`, `x ← x + Δ`.
///
/// Gradients are validated before any parameter changes.
pub fn adadelta_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdadeltaState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(TrainError::GradientCount {
            got: grads.len(),
            expected: store.len(),
        });
    }
    for id in store.ids() {
        if grads[id.index()].iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
    }
    for (k, t) in store.tensors_mut().iter_mut().enumerate() {
        let (eg, ed) = (&mut state.sq_grad[k], &mut state.sq_update[k]);
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let g = grads[k][i];
            eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
            let dx = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
            ed[i] = rho * ed[i] + (1.0 - rho) * dx * dx;
            *x += dx;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Summed loss, summed gradients and prediction count over `batch`.
fn batch_gradients(model: &Seq2SeqModel, batch: &[&TrainingExample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut sum: Vec<Vec<f64>> = model.store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for chunk in batch.chunks(GRAD_CHUNK) {
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = chunk.par_iter().map(|ex| loss_and_grads(model, ex)).collect();
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            for (acc, g) in sum.iter_mut().zip(&grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
    Ok((total, sum))
}

/// Mean per-prediction loss over `examples`; parameters are untouched.
pub fn mean_token_loss(model: &Seq2SeqModel, examples: &[TrainingExample]) -> Result<f64> {
    let losses: Vec<Result<f64>> = examples.par_iter().map(|ex| training_loss(model, ex)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let n: usize = examples.iter().map(TrainingExample::num_predictions).sum();
    Ok(total / n.max(1) as f64)
}

/// Length-bucketed batches in a seeded order.
pub fn make_batches(examples: &[TrainingExample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| examples[i].source.len());
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-prediction loss over the epoch's batches.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss,seconds\n");
        for e in &self.epochs {
            let valid = e.valid_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.3}", e.epoch, e.train_loss, valid, e.seconds);
        }
        s
    }
}

/// Where [`train`] writes checkpoints and its CSV log.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub vocab: &'a Vocabulary,
    pub freq: &'a FreqTable,
}

impl TrainOutput<'_> {
    fn checkpoint(&self, model: &Seq2SeqModel, name: &str) -> Result<()> {
        let ck = Checkpoint {
            model: model.clone(),
            vocab: self.vocab.clone(),
            freq: self.freq.clone(),
        };
        ck.save(&self.dir.join(name))?;
        Ok(())
    }

    fn log(&self, log: &TrainLog) -> Result<()> {
        let path = self.dir.join("train_log.csv");
        std::fs::write(&path, log.to_csv()).map_err(|source| TrainError::Io { path, source })
    }
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn train(
    model: &mut Seq2SeqModel,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    cfg: &TrainConfig,
    out: Option<&TrainOutput<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdadeltaState::new(&model.store);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let mut total = 0.0;
        let mut predictions = 0;
        for batch in make_batches(train, cfg.batch_size, &mut rng) {
            let examples: Vec<&TrainingExample> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_gradients(model, &examples)?;
            total += loss;
            predictions += examples.iter().map(|e| e.num_predictions()).sum::<usize>();
            let scale = 1.0 / examples.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adadelta_step(&mut model.store, &grads, &mut state, cfg.rho, cfg.eps)?;
        }
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(mean_token_loss(model, valid)?)
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss: total / predictions as f64,
            valid_loss,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if let Some(out) = out {
            out.log(&log)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                out.checkpoint(model, &format!("epoch-{epoch:04}.ckpt"))?;
            }
        }
    }
    if let Some(out) = out {
        out.checkpoint(model, FINAL_CHECKPOINT)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexsub::ParaphraseRule;
    use crate::model::tests::{randomize, tiny_config, zero_all, Oracle};
    use crate::model::ModelConfig;
    use std::collections::HashMap;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn tiny(seed: u64) -> Seq2SeqModel {
        let mut m = Seq2SeqModel::new(tiny_config(12, 2, 3), seed).unwrap();
        randomize(&mut m, seed, 0.9);
        m
    }

    #[test]
    fn kb_rule_selects_constraint() {
        let kb = KnowledgeBase::from_rules(vec![ParaphraseRule {
            complex: toks("hub"),
            simple: toks("center"),
            score: 0.9,
        }]);
        let freq = FreqTable::default();
        let src = toks("serving as a hub for");
        let tgt = toks("serving as a center of");
        assert_eq!(select_training_constraint(&src, &tgt, &kb, &freq), Some(Span { start: 3, len: 1 }));
    }

    #[test]
    fn fallback_picks_rarest_word() {
        let kb = KnowledgeBase::default();
        let counts: HashMap<String, u64> =
            [("later", 5), ("in", 90), ("his", 40), ("life", 12), (".", 1)].map(|(k, v)| (k.to_string(), v)).into();
        let freq = FreqTable::from_counts(counts, 30.0);
        let tgt = toks("later in his life .");
        assert_eq!(select_training_constraint(&toks("x"), &tgt, &kb, &freq), Some(Span { start: 0, len: 1 }));
        assert_eq!(select_training_constraint(&toks("x"), &[], &kb, &freq), None);
        assert_eq!(select_training_constraint(&toks("x"), &toks(". ,"), &kb, &freq), Some(Span { start: 0, len: 1 }));
    }

    #[test]
    fn rarer_complex_side_wins() {
        let rules = vec![
            ParaphraseRule { complex: toks("hub"), simple: toks("center"), score: 0.9 },
            ParaphraseRule { complex: toks("key"), simple: toks("important"), score: 0.9 },
        ];
        let kb = KnowledgeBase::from_rules(rules);
        let src = toks("a key hub");
        let tgt = toks("an important center");
        for (hub, key, expect) in [(2u64, 7u64, 2usize), (9, 3, 1)] {
            let counts: HashMap<String, u64> = [("hub", hub), ("key", key)].map(|(k, v)| (k.to_string(), v)).into();
            let freq = FreqTable::from_counts(counts, 30.0);
            let span = select_training_constraint(&src, &tgt, &kb, &freq).unwrap();
            assert_eq!(span.start, expect);
        }
    }

    #[test]
    fn uniform_model_loss() {
        let mut m = Seq2SeqModel::new(tiny_config(12, 2, 3), 0).unwrap();
        zero_all(&mut m);
        for (target, span) in [
            (vec![4, 5, 6], Span { start: 1, len: 1 }),
            (vec![4, 5, 6, 7, 8], Span { start: 0, len: 1 }),
            (vec![9], Span { start: 0, len: 1 }),
        ] {
            let m_len = target.len();
            let ex = TrainingExample::new(vec![4, 7], target, span).unwrap();
            let loss = training_loss(&m, &ex).unwrap();
            assert!((loss - (m_len as f64 + 1.0) * 12f64.ln()).abs() < 1e-12);
        }
        let ex = TrainingExample::new(vec![4], vec![4, 5, 6, 7], Span { start: 1, len: 2 }).unwrap();
        assert_eq!(ex.num_predictions(), 4);
        assert!((training_loss(&m, &ex).unwrap() - 4.0 * 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let m = tiny(3);
        let o = Oracle { m: &m };
        let ex = TrainingExample::new(vec![4, 9, 5, 6], vec![7, 8, 10, 11], Span { start: 2, len: 1 }).unwrap();
        let (ann, mean) = o.encode(&ex.source);
        let mut expected = 0.0;

        let mut s = o.init(&m.backward, &mean);
        let seq = [10, 8, 7, BOS];
        for w in seq.windows(2) {
            let (s2, dist) = o.step(&m.backward, w[0], &s, &ann);
            expected -= dist[w[1]].ln();
            s = s2;
        }
        let mut s = o.init(&m.forward, &mean);
        let seq = [BOS, 7, 8, 10, 11, EOS];
        for (i, w) in seq.windows(2).enumerate() {
            let (s2, dist) = o.step(&m.forward, w[0], &s, &ann);
            if i >= 3 {
                expected -= dist[w[1]].ln();
            }
            s = s2;
        }
        let got = training_loss(&m, &ex).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = tiny(5);
        let ex = TrainingExample::new(vec![4, 5, 6], vec![7, 8, 9], Span { start: 1, len: 1 }).unwrap();
        let report = gradient_check(&m, &ex, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.checked, m.store.num_values());
    }

    #[test]
    fn adadelta_first_step_closed_form() {
        let mut store = ParamStore::default();
        let id = store.add("w", crate::tensor::Tensor::vector(vec![1.0, -2.0, 0.5]));
        let g = vec![vec![0.3, -4.0, 0.0]];
        let mut st = AdadeltaState::new(&store);
        let (rho, eps) = (0.95, 1e-6);
        adadelta_step(&mut store, &g, &mut st, rho, eps).unwrap();
        for (i, &x0) in [1.0, -2.0, 0.5].iter().enumerate() {
            let gi = g[0][i];
            let dx = -(eps.sqrt() / ((1.0 - rho) * gi * gi + eps).sqrt()) * gi;
            assert!((store.get(id).data()[i] - (x0 + dx)).abs() < 1e-15);
        }
        assert_eq!(store.get(id).data()[2], 0.5);
    }

    #[test]
    fn adadelta_zero_gradient_decays_accumulator() {
        let mut store = ParamStore::default();
        store.add("w", crate::tensor::Tensor::vector(vec![1.0]));
        let mut st = AdadeltaState::new(&store);
        adadelta_step(&mut store, &[vec![2.0]], &mut st, 0.9, 1e-6).unwrap();
        let before = (store.tensors()[0].data()[0], st.sq_grad[0][0]);
        adadelta_step(&mut store, &[vec![0.0]], &mut st, 0.9, 1e-6).unwrap();
        assert_eq!(store.tensors()[0].data()[0], before.0);
        assert!((st.sq_grad[0][0] - 0.9 * before.1).abs() < 1e-15);
    }

    #[test]
    fn adadelta_accumulator_converges_to_g_squared() {
        let mut store = ParamStore::default();
        store.add("w", crate::tensor::Tensor::vector(vec![0.0]));
        let mut st = AdadeltaState::new(&store);
        let (rho, g) = (0.9, 1.5);
        let mut prev = 0.0;
        for k in 1..=300 {
            adadelta_step(&mut store, &[vec![g]], &mut st, rho, 1e-6).unwrap();
            let acc = st.sq_grad[0][0];
            let closed = g * g * (1.0 - rho.powi(k));
            assert!((acc - closed).abs() < 1e-12);
            assert!(acc > prev);
            prev = acc;
        }
        assert!((prev - g * g).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::default();
        store.add("a", crate::tensor::Tensor::vector(vec![1.0]));
        store.add("enc.w", crate::tensor::Tensor::vector(vec![1.0]));
        let mut st = AdadeltaState::new(&store);
        let err = adadelta_step(&mut store, &[vec![0.1], vec![f64::NAN]], &mut st, 0.95, 1e-6).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient for parameter `enc.w`");
        assert_eq!(store.tensors()[0].data()[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0][0], 0.3);
    }

    #[test]
    fn one_small_step_decreases_loss() {
        for seed in 0..5 {
            let mut m = tiny(seed);
            let ex = TrainingExample::new(vec![4, 5], vec![6, 7, 8], Span { start: 2, len: 1 }).unwrap();
            let before = training_loss(&m, &ex).unwrap();
            let (_, grads) = loss_and_grads(&m, &ex).unwrap();
            let mut st = AdadeltaState::new(&m.store);
            adadelta_step(&mut m.store, &grads, &mut st, 0.95, 1e-6).unwrap();
            assert!(training_loss(&m, &ex).unwrap() < before);
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            max_decode_len: 10,
            ..tiny_config(12, 4, 6)
        }
    }

    fn corpus() -> Vec<TrainingExample> {
        vec![
            TrainingExample::new(vec![4, 5, 6], vec![4, 7, 6], Span { start: 1, len: 1 }).unwrap(),
            TrainingExample::new(vec![8, 9], vec![8, 10], Span { start: 0, len: 1 }).unwrap(),
            TrainingExample::new(vec![11, 5], vec![11, 7, 9], Span { start: 2, len: 1 }).unwrap(),
        ]
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 2,
            eps: 1e-4,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Seq2SeqModel::new(small_config(), 7).unwrap();
            let log = train(&mut m, &corpus(), &corpus()[..1], &cfg, None).unwrap();
            (m, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        let losses = |l: &TrainLog| l.epochs.iter().map(|e| (e.train_loss, e.valid_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&l1), losses(&l2));
        assert!(l1.epochs.last().unwrap().train_loss < l1.epochs[0].train_loss);
    }

    #[test]
    fn validation_does_not_touch_parameters() {
        let m = Seq2SeqModel::new(small_config(), 7).unwrap();
        let before = m.clone();
        mean_token_loss(&m, &corpus()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn checkpoints_and_log_written() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_regular((0..8).map(|i| format!("w{i}")));
        let freq = FreqTable::default();
        let out = TrainOutput { dir: dir.path(), vocab: &vocab, freq: &freq };
        let cfg = TrainConfig {
            epochs: 2,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let mut m = Seq2SeqModel::new(small_config(), 7).unwrap();
        let log = train(&mut m, &corpus(), &corpus(), &cfg, Some(&out)).unwrap();
        for name in ["epoch-0001.ckpt", "epoch-0002.ckpt", FINAL_CHECKPOINT, "train_log.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,train_loss,valid_loss,seconds\n"));

        let back = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        let a = mean_token_loss(&back.model, &corpus()).unwrap();
        let b = mean_token_loss(&m, &corpus()).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(Some(b), log.epochs[1].valid_loss);
    }

    #[test]
    fn bad_configs_and_spans() {
        let bad = TrainConfig { rho: 1.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig { eps: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(matches!(
            TrainingExample::new(vec![4], vec![4], Span { start: 1, len: 1 }),
            Err(TrainError::Span { .. })
        ));
        let mut m = Seq2SeqModel::new(small_config(), 7).unwrap();
        assert!(matches!(
            train(&mut m, &[], &[], &TrainConfig::default(), None),
            Err(TrainError::EmptyCorpus)
        ));
    }
}
