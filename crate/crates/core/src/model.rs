//! Bidirectional GRU encoder with an attentional GRU decoder per generation
//! direction.
//!
//! Encoder, per direction:
//!
//! ```text
//! z  = σ(W_z e + U_z h + b_z)
//! r  = σ(W_r e + U_r h + b_r)
//! h̃  = tanh(W_h e + U_h (r ∘ h) + b_h)
//! h' = (1 − z) ∘ h + z ∘ h̃
//! ```
//!
//! The annotation at position `t` is `[h→_t; h←_t]`. Each decoder starts from
//! `s₀ = tanh(W_sh · mean_t(h_t) + b_sh)` and at every step attends with
//! `e_j = v_aᵀ tanh(W_a s + U_a h_j + b_a)`, runs the same gated update with an
//! extra `C c` term, and predicts the next token from
//! `softmax(W_o [e'; s; c] + b_o)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{log_softmax_values, softmax_values, Tape, Tensor, TensorError, Var};
use crate::text::{TokenId, BOS, EOS, PAD};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub beam_size: usize,
    pub max_decode_len: usize,
    /// One parameter set for both generation directions.
    pub share_decoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            embed_dim: 32,
            hidden_dim: 64,
            beam_size: 5,
            max_decode_len: 100,
            share_decoders: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("beam_size", self.beam_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= EOS {
            return Err(ModelError::Config("vocab_size must cover the reserved ids".into()));
        }
        if self.max_decode_len < 2 {
            return Err(ModelError::Config("max_decode_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Generation direction. The backward decoder emits the tokens before the
/// constraint right to left and stops at `BOS`; the forward decoder stops at
/// `EOS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Backward,
    Forward,
}

impl Direction {
    pub fn terminal(self) -> TokenId {
        match self {
            Direction::Backward => BOS,
            Direction::Forward => EOS,
        }
    }

    /// Whether a decoder in this direction may emit `token`.
    pub fn can_emit(self, token: TokenId) -> bool {
        token != PAD
            && match self {
                Direction::Backward => token != EOS,
                Direction::Forward => token != BOS,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Gate weights for one encoder direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub forward: GruParams,
    pub backward: GruParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderParams {
    pub embedding: ParamId,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_s: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_s: ParamId,
    pub c_z: ParamId,
    pub c_r: ParamId,
    pub c_s: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_s: ParamId,
    pub attn_w: ParamId,
    pub attn_u: ParamId,
    pub attn_b: ParamId,
    pub attn_v: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data).expect("positive dims"))
    }

    fn bias(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    fn vector(&mut self, name: String, n: usize) -> ParamId {
        let data = (0..n).map(|_| self.rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        self.store.add(name, Tensor::vector(data))
    }

    fn gru(&mut self, p: &str, c: &ModelConfig) -> GruParams {
        let (d, e) = (c.hidden_dim, c.embed_dim);
        GruParams {
            w_z: self.weight(format!("{p}.w_z"), d, e),
            w_r: self.weight(format!("{p}.w_r"), d, e),
            w_h: self.weight(format!("{p}.w_h"), d, e),
            u_z: self.weight(format!("{p}.u_z"), d, d),
            u_r: self.weight(format!("{p}.u_r"), d, d),
            u_h: self.weight(format!("{p}.u_h"), d, d),
            b_z: self.bias(format!("{p}.b_z"), d),
            b_r: self.bias(format!("{p}.b_r"), d),
            b_h: self.bias(format!("{p}.b_h"), d),
        }
    }

    fn decoder(&mut self, p: &str, c: &ModelConfig) -> DecoderParams {
        let (v, d, e) = (c.vocab_size, c.hidden_dim, c.embed_dim);
        DecoderParams {
            embedding: self.weight(format!("{p}.embedding"), v, e),
            w_z: self.weight(format!("{p}.w_z"), d, e),
            w_r: self.weight(format!("{p}.w_r"), d, e),
            w_s: self.weight(format!("{p}.w_s"), d, e),
            u_z: self.weight(format!("{p}.u_z"), d, d),
            u_r: self.weight(format!("{p}.u_r"), d, d),
            u_s: self.weight(format!("{p}.u_s"), d, d),
            c_z: self.weight(format!("{p}.c_z"), d, 2 * d),
            c_r: self.weight(format!("{p}.c_r"), d, 2 * d),
            c_s: self.weight(format!("{p}.c_s"), d, 2 * d),
            b_z: self.bias(format!("{p}.b_z"), d),
            b_r: self.bias(format!("{p}.b_r"), d),
            b_s: self.bias(format!("{p}.b_s"), d),
            attn_w: self.weight(format!("{p}.attn.w_a"), d, d),
            attn_u: self.weight(format!("{p}.attn.u_a"), d, 2 * d),
            attn_b: self.bias(format!("{p}.attn.b_a"), d),
            attn_v: self.vector(format!("{p}.attn.v_a"), d),
            init_w: self.weight(format!("{p}.init.w_sh"), d, 2 * d),
            init_b: self.bias(format!("{p}.init.b_sh"), d),
            out_w: self.weight(format!("{p}.out.w"), v, e + 3 * d),
            out_b: self.bias(format!("{p}.out.b"), v),
        }
    }
}

/// Shared encoder plus one decoder per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub backward: DecoderParams,
    pub forward: DecoderParams,
}

/// Encoder output for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// `n × 2·dim`
    pub annotations: Tensor,
    /// `2·dim`
    pub mean: Tensor,
}

/// Decoder-specific cache over an [`Encoding`]: `U_a h_j + b_a` for every `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionKeys {
    pub keys: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Seq2SeqModel {
    /// Weights uniform in ±0.08 from `seed`; biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embedding = init.weight("encoder.embedding".into(), config.vocab_size, config.embed_dim);
        let encoder = EncoderParams {
            embedding,
            forward: init.gru("encoder.fwd", &config),
            backward: init.gru("encoder.bwd", &config),
        };
        let (backward, forward) = if config.share_decoders {
            let d = init.decoder("decoder", &config);
            (d, d)
        } else {
            (init.decoder("bwd_decoder", &config), init.decoder("fwd_decoder", &config))
        };
        Ok(Self {
            config,
            store,
            encoder,
            backward,
            forward,
        })
    }

    /// Rebuilds a model around an existing store (checkpoint load); every
    /// expected tensor must be present with the expected shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.store.names() != store.names() {
            return Err(ModelError::Config("parameter names do not match the configuration".into()));
        }
        for (a, b) in template.store.tensors().iter().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Tensor(TensorError::Shape {
                    op: "from_store",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                }));
            }
        }
        Ok(Self { store, ..template })
    }

    pub fn decoder(&self, dir: Direction) -> &DecoderParams {
        match dir {
            Direction::Backward => &self.backward,
            Direction::Forward => &self.forward,
        }
    }

    pub fn graph(&self) -> ModelGraph<'_> {
        ModelGraph::new(self)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn encode(&self, source: &[TokenId]) -> Result<Encoding> {
        let mut g = self.graph();
        let (h, mean) = g.encode(source)?;
        Ok(Encoding {
            annotations: g.tape.to_tensor(h),
            mean: g.tape.to_tensor(mean),
        })
    }

    pub fn attention_keys(&self, dir: Direction, enc: &Encoding) -> Result<AttentionKeys> {
        let mut g = self.graph();
        let h = g.tape.leaf(enc.annotations.clone());
        let keys = g.attention_keys(self.decoder(dir), h)?;
        Ok(AttentionKeys {
            keys: g.tape.to_tensor(keys),
        })
    }

    /// Context vector and alignment weights for decoder state `s_prev`.
    pub fn attend(&self, dir: Direction, s_prev: &[f64], enc: &Encoding) -> Result<(Vec<f64>, Vec<f64>)> {
        let keys = self.attention_keys(dir, enc)?;
        let mut g = self.graph();
        let h = g.tape.leaf(enc.annotations.clone());
        let k = g.tape.leaf(keys.keys);
        let s = g.tape.vector(s_prev.to_vec());
        let (c, alpha) = g.attend(self.decoder(dir), s, h, k)?;
        Ok((g.tape.value(c).to_vec(), g.tape.value(alpha).to_vec()))
    }

    pub fn init_decoder_state(&self, dir: Direction, mean: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.graph();
        let m = g.tape.vector(mean.to_vec());
        let s0 = g.init_state(self.decoder(dir), m)?;
        Ok(g.tape.value(s0).to_vec())
    }

    /// One decoder step: attend with `s_prev`, update the state with
    /// `prev_token`, and return the next-token distribution.
    pub fn decode_step(
        &self,
        dir: Direction,
        prev_token: TokenId,
        s_prev: &[f64],
        enc: &Encoding,
        keys: &AttentionKeys,
    ) -> Result<StepOutput> {
        let mut g = self.graph();
        let h = g.tape.param(&enc.annotations);
        let k = g.tape.param(&keys.keys);
        let s = g.tape.vector(s_prev.to_vec());
        let (state, logits) = g.step(self.decoder(dir), prev_token, s, h, k)?;
        let log_probs = log_softmax_values(g.tape.value(logits))?;
        let probs = softmax_values(g.tape.value(logits))?;
        Ok(StepOutput {
            state: g.tape.value(state).to_vec(),
            probs,
            log_probs,
        })
    }
}

/// A tape bound to a model's parameters. Parameters are attached lazily so a
/// graph only references the weights it touches.
pub struct ModelGraph<'p> {
    pub tape: Tape<'p>,
    model: &'p Seq2SeqModel,
    bound: Vec<Option<Var>>,
}

impl<'p> ModelGraph<'p> {
    pub fn new(model: &'p Seq2SeqModel) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: vec![None; model.store.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.model.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.tape.grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }

    fn affine3(&mut self, w: ParamId, x: Var, u: ParamId, h: Var, b: ParamId) -> Result<Var> {
        let (w, u, b) = (self.param(w), self.param(u), self.param(b));
        let wx = self.tape.matvec(w, x)?;
        let uh = self.tape.matvec(u, h)?;
        let s = self.tape.add(wx, uh)?;
        Ok(self.tape.add(s, b)?)
    }

    fn gru_cell(&mut self, p: &GruParams, x: Var, h: Var) -> Result<Var> {
        let za = self.affine3(p.w_z, x, p.u_z, h, p.b_z)?;
        let z = self.tape.sigmoid(za);
        let ra = self.affine3(p.w_r, x, p.u_r, h, p.b_r)?;
        let r = self.tape.sigmoid(ra);
        let rh = self.tape.mul(r, h)?;
        let ca = self.affine3(p.w_h, x, p.u_h, rh, p.b_h)?;
        let cand = self.tape.tanh(ca);
        self.interpolate(z, h, cand)
    }

    /// `(1 − z) ∘ old + z ∘ new`
    fn interpolate(&mut self, z: Var, old: Var, new: Var) -> Result<Var> {
        let keep = self.tape.one_minus(z);
        let a = self.tape.mul(keep, old)?;
        let b = self.tape.mul(z, new)?;
        Ok(self.tape.add(a, b)?)
    }

    /// Returns annotations `n × 2·dim` and their mean over positions.
    pub fn encode(&mut self, source: &[TokenId]) -> Result<(Var, Var)> {
        if source.is_empty() {
            return Err(ModelError::EmptySource);
        }
        self.model.check_ids(source)?;
        let enc = self.model.encoder;
        let dim = self.model.config.hidden_dim;
        let table = self.param(enc.embedding);
        let embeds = source
            .iter()
            .map(|&id| self.tape.gather(table, id))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let mut fwd = Vec::with_capacity(source.len());
        let mut h = self.tape.vector(vec![0.0; dim]);
        for &e in &embeds {
            h = self.gru_cell(&enc.forward, e, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![h; source.len()];
        let mut h = self.tape.vector(vec![0.0; dim]);
        for (t, &e) in embeds.iter().enumerate().rev() {
            h = self.gru_cell(&enc.backward, e, h)?;
            bwd[t] = h;
        }
        let rows = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| self.tape.concat(&[f, b]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let annotations = self.tape.stack(&rows)?;
        let mean = self.tape.mean_rows(annotations)?;
        Ok((annotations, mean))
    }

    /// `s₀ = tanh(W_sh · mean + b_sh)`
    pub fn init_state(&mut self, dec: &DecoderParams, mean: Var) -> Result<Var> {
        let (w, b) = (self.param(dec.init_w), self.param(dec.init_b));
        let a = self.tape.matvec(w, mean)?;
        let a = self.tape.add(a, b)?;
        Ok(self.tape.tanh(a))
    }

    /// `H · U_aᵀ + b_a`, shape `n × dim`.
    pub fn attention_keys(&mut self, dec: &DecoderParams, annotations: Var) -> Result<Var> {
        let (u, b) = (self.param(dec.attn_u), self.param(dec.attn_b));
        let ut = self.tape.transpose(u)?;
        let k = self.tape.matmul(annotations, ut)?;
        Ok(self.tape.add_row(k, b)?)
    }

    /// Returns `(c, α)`.
    pub fn attend(&mut self, dec: &DecoderParams, s_prev: Var, annotations: Var, keys: Var) -> Result<(Var, Var)> {
        let (w, v) = (self.param(dec.attn_w), self.param(dec.attn_v));
        let ws = self.tape.matvec(w, s_prev)?;
        let pre = self.tape.add_row(keys, ws)?;
        let act = self.tape.tanh(pre);
        let energies = self.tape.matvec(act, v)?;
        let alpha = self.tape.softmax(energies)?;
        let ht = self.tape.transpose(annotations)?;
        let c = self.tape.matvec(ht, alpha)?;
        Ok((c, alpha))
    }

    #[allow(clippy::too_many_arguments)]
    fn gate(&mut self, w: ParamId, e: Var, u: ParamId, s: Var, c_w: ParamId, c: Var, b: ParamId) -> Result<Var> {
        let base = self.affine3(w, e, u, s, b)?;
        let cw = self.param(c_w);
        let cc = self.tape.matvec(cw, c)?;
        Ok(self.tape.add(base, cc)?)
    }

    /// Attends with `s_prev` and updates the state with `prev_token`.
    /// Returns `(s, e', c)`.
    pub fn advance(
        &mut self,
        dec: &DecoderParams,
        prev_token: TokenId,
        s_prev: Var,
        annotations: Var,
        keys: Var,
    ) -> Result<(Var, Var, Var)> {
        self.model.check_ids(&[prev_token])?;
        let (c, _) = self.attend(dec, s_prev, annotations, keys)?;
        let table = self.param(dec.embedding);
        let e = self.tape.gather(table, prev_token)?;
        let za = self.gate(dec.w_z, e, dec.u_z, s_prev, dec.c_z, c, dec.b_z)?;
        let z = self.tape.sigmoid(za);
        let ra = self.gate(dec.w_r, e, dec.u_r, s_prev, dec.c_r, c, dec.b_r)?;
        let r = self.tape.sigmoid(ra);
        let rs = self.tape.mul(r, s_prev)?;
        let ca = self.gate(dec.w_s, e, dec.u_s, rs, dec.c_s, c, dec.b_s)?;
        let cand = self.tape.tanh(ca);
        let s = self.interpolate(z, s_prev, cand)?;
        Ok((s, e, c))
    }

    /// `W_o [e'; s; c] + b_o`
    pub fn logits(&mut self, dec: &DecoderParams, e: Var, s: Var, c: Var) -> Result<Var> {
        let feat = self.tape.concat(&[e, s, c])?;
        let (w, b) = (self.param(dec.out_w), self.param(dec.out_b));
        let logits = self.tape.matvec(w, feat)?;
        Ok(self.tape.add(logits, b)?)
    }

    /// Returns the new state and unnormalised next-token scores.
    pub fn step(
        &mut self,
        dec: &DecoderParams,
        prev_token: TokenId,
        s_prev: Var,
        annotations: Var,
        keys: Var,
    ) -> Result<(Var, Var)> {
        let (s, e, c) = self.advance(dec, prev_token, s_prev, annotations, keys)?;
        let logits = self.logits(dec, e, s, c)?;
        Ok((s, logits))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tiny_config(vocab: usize, embed: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: embed,
            hidden_dim: hidden,
            beam_size: 3,
            max_decode_len: 6,
            share_decoders: false,
        }
    }

    /// Scales every parameter (including biases) to uniform(−a, a) so that the
    /// scalar oracles exercise non-trivial values.
    pub fn randomize(model: &mut Seq2SeqModel, seed: u64, a: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.store.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.gen_range(-a..a);
            }
        }
    }

    pub fn zero_all(model: &mut Seq2SeqModel) {
        for t in model.store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    // ---- scalar-loop oracle -------------------------------------------------

    pub struct Oracle<'a> {
        pub m: &'a Seq2SeqModel,
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    impl Oracle<'_> {
        fn w(&self, id: ParamId) -> (&[f64], usize) {
            let t = self.m.store.get(id);
            (t.data(), *t.shape().last().unwrap())
        }

        fn mv(&self, id: ParamId, x: &[f64]) -> Vec<f64> {
            let (d, cols) = self.w(id);
            assert_eq!(cols, x.len());
            (0..d.len() / cols)
                .map(|i| {
                    let mut s = 0.0;
                    for j in 0..cols {
                        s += d[i * cols + j] * x[j];
                    }
                    s
                })
                .collect()
        }

        fn b(&self, id: ParamId) -> Vec<f64> {
            self.m.store.get(id).data().to_vec()
        }

        fn row(&self, id: ParamId, r: usize) -> Vec<f64> {
            let (d, cols) = self.w(id);
            d[r * cols..(r + 1) * cols].to_vec()
        }

        fn gru(&self, p: &GruParams, e: &[f64], h: &[f64]) -> Vec<f64> {
            let (wz, uz, bz) = (self.mv(p.w_z, e), self.mv(p.u_z, h), self.b(p.b_z));
            let (wr, ur, br) = (self.mv(p.w_r, e), self.mv(p.u_r, h), self.b(p.b_r));
            let n = h.len();
            let z: Vec<f64> = (0..n).map(|i| sig(wz[i] + uz[i] + bz[i])).collect();
            let r: Vec<f64> = (0..n).map(|i| sig(wr[i] + ur[i] + br[i])).collect();
            let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
            let (wh, uh, bh) = (self.mv(p.w_h, e), self.mv(p.u_h, &rh), self.b(p.b_h));
            (0..n)
                .map(|i| {
                    let cand = (wh[i] + uh[i] + bh[i]).tanh();
                    (1.0 - z[i]) * h[i] + z[i] * cand
                })
                .collect()
        }

        pub fn encode(&self, src: &[TokenId]) -> (Vec<Vec<f64>>, Vec<f64>) {
            let enc = self.m.encoder;
            let dim = self.m.config.hidden_dim;
            let n = src.len();
            let mut fwd = Vec::new();
            let mut h = vec![0.0; dim];
            for &id in src {
                h = self.gru(&enc.forward, &self.row(enc.embedding, id), &h);
                fwd.push(h.clone());
            }
            let mut bwd = vec![Vec::new(); n];
            let mut h = vec![0.0; dim];
            for t in (0..n).rev() {
                h = self.gru(&enc.backward, &self.row(enc.embedding, src[t]), &h);
                bwd[t] = h.clone();
            }
            let ann: Vec<Vec<f64>> = (0..n).map(|t| [fwd[t].clone(), bwd[t].clone()].concat()).collect();
            let mut mean = vec![0.0; 2 * dim];
            for a in &ann {
                for (m, x) in mean.iter_mut().zip(a) {
                    *m += x / n as f64;
                }
            }
            (ann, mean)
        }

        pub fn init(&self, dec: &DecoderParams, mean: &[f64]) -> Vec<f64> {
            let a = self.mv(dec.init_w, mean);
            let b = self.b(dec.init_b);
            a.iter().zip(&b).map(|(x, y)| (x + y).tanh()).collect()
        }

        pub fn attend(&self, dec: &DecoderParams, s: &[f64], ann: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
            let ws = self.mv(dec.attn_w, s);
            let b = self.b(dec.attn_b);
            let v = self.b(dec.attn_v);
            let energies: Vec<f64> = ann
                .iter()
                .map(|h| {
                    let uh = self.mv(dec.attn_u, h);
                    (0..v.len()).map(|i| v[i] * (ws[i] + uh[i] + b[i]).tanh()).sum()
                })
                .collect();
            let z: f64 = energies.iter().map(|e| e.exp()).sum();
            let alpha: Vec<f64> = energies.iter().map(|e| e.exp() / z).collect();
            let mut c = vec![0.0; ann[0].len()];
            for (a, h) in alpha.iter().zip(ann) {
                for (ci, hi) in c.iter_mut().zip(h) {
                    *ci += a * hi;
                }
            }
            (c, alpha)
        }

        /// Returns `(s_t, dist)`.
        pub fn step(&self, dec: &DecoderParams, prev: TokenId, s: &[f64], ann: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
            let (c, _) = self.attend(dec, s, ann);
            let e = self.row(dec.embedding, prev);
            let n = s.len();
            let g = |w, u, cw, b, sv: &[f64]| -> Vec<f64> {
                let (a1, a2, a3, a4) = (self.mv(w, &e), self.mv(u, sv), self.mv(cw, &c), self.b(b));
                (0..n).map(|i| a1[i] + a2[i] + a3[i] + a4[i]).collect()
            };
            let z: Vec<f64> = g(dec.w_z, dec.u_z, dec.c_z, dec.b_z, s).into_iter().map(sig).collect();
            let r: Vec<f64> = g(dec.w_r, dec.u_r, dec.c_r, dec.b_r, s).into_iter().map(sig).collect();
            let rs: Vec<f64> = (0..n).map(|i| r[i] * s[i]).collect();
            let cand: Vec<f64> = g(dec.w_s, dec.u_s, dec.c_s, dec.b_s, &rs).into_iter().map(f64::tanh).collect();
            let st: Vec<f64> = (0..n).map(|i| (1.0 - z[i]) * s[i] + z[i] * cand[i]).collect();
            let feat = [e.clone(), st.clone(), c].concat();
            let logits: Vec<f64> = self
                .mv(dec.out_w, &feat)
                .iter()
                .zip(self.b(dec.out_b))
                .map(|(a, b)| a + b)
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            (st, logits.iter().map(|l| (l - mx).exp() / z).collect())
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn parameter_shapes() {
        let c = tiny_config(12, 2, 3);
        let m = Seq2SeqModel::new(c, 1).unwrap();
        let s = |id| m.store.get(id).shape().to_vec();
        assert_eq!(s(m.encoder.embedding), vec![12, 2]);
        assert_eq!(s(m.encoder.forward.w_z), vec![3, 2]);
        assert_eq!(s(m.encoder.backward.u_h), vec![3, 3]);
        assert_eq!(s(m.forward.c_s), vec![3, 6]);
        assert_eq!(s(m.forward.attn_u), vec![3, 6]);
        assert_eq!(s(m.forward.init_w), vec![3, 6]);
        assert_eq!(s(m.backward.out_w), vec![12, 2 + 9]);
        assert_ne!(m.forward.out_w, m.backward.out_w);
        assert!(m.store.get(m.forward.b_z).data().iter().all(|&x| x == 0.0));
        assert!(m.store.get(m.forward.w_z).data().iter().all(|x| x.abs() < INIT_RANGE));

        let shared = Seq2SeqModel::new(ModelConfig { share_decoders: true, ..c }, 1).unwrap();
        assert_eq!(shared.forward, shared.backward);
        assert!(shared.store.len() < m.store.len());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { max_decode_len: 1, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let bad = ModelConfig { hidden_dim: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_fixed_points() {
        let mut m = Seq2SeqModel::new(tiny_config(7, 2, 3), 4).unwrap();
        zero_all(&mut m);
        let enc = m.encode(&[4, 5, 6]).unwrap();
        assert!(enc.annotations.data().iter().all(|&x| x == 0.0));
        assert!(enc.mean.data().iter().all(|&x| x == 0.0));
        let s0 = m.init_decoder_state(Direction::Forward, enc.mean.data()).unwrap();
        assert_eq!(s0, vec![0.0; 3]);
        let keys = m.attention_keys(Direction::Forward, &enc).unwrap();
        let out = m.decode_step(Direction::Forward, BOS, &s0, &enc, &keys).unwrap();
        for p in &out.probs {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_source_and_bad_ids() {
        let m = Seq2SeqModel::new(tiny_config(7, 2, 3), 4).unwrap();
        assert_eq!(m.encode(&[]).unwrap_err(), ModelError::EmptySource);
        assert_eq!(
            m.encode(&[9]).unwrap_err(),
            ModelError::TokenOutOfRange { id: 9, vocab: 7 }
        );
    }

    #[test]
    fn single_token_mean_is_its_annotation() {
        let mut m = Seq2SeqModel::new(tiny_config(7, 2, 3), 4).unwrap();
        randomize(&mut m, 9, 0.8);
        let enc = m.encode(&[5]).unwrap();
        assert!(close(enc.annotations.data(), enc.mean.data(), 1e-15));
        let (c, alpha) = m.attend(Direction::Backward, &[0.3, -0.2, 0.1], &enc).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert!(close(&c, enc.mean.data(), 1e-15));
    }

    #[test]
    fn init_state_zero_cases() {
        let mut m = Seq2SeqModel::new(tiny_config(7, 2, 3), 4).unwrap();
        randomize(&mut m, 2, 0.8);
        assert_eq!(m.init_decoder_state(Direction::Forward, &[0.0; 6]).unwrap(), [0.0; 3].iter().zip(m.store.get(m.forward.init_b).data()).map(|(_, b)| b.tanh()).collect::<Vec<_>>());
        let mut z = m.clone();
        let b = z.forward.init_b;
        z.store.get_mut(b).data_mut().iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(z.init_decoder_state(Direction::Forward, &[0.0; 6]).unwrap(), vec![0.0; 3]);
        let w = z.forward.init_w;
        z.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(z.init_decoder_state(Direction::Forward, &[0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identical_annotations_give_uniform_attention() {
        let mut m = Seq2SeqModel::new(tiny_config(7, 2, 3), 4).unwrap();
        randomize(&mut m, 5, 0.8);
        let h = [0.1, -0.4, 0.3, 0.2, 0.0, -0.7];
        let ann = Tensor::matrix(4, 6, h.repeat(4)).unwrap();
        let enc = Encoding { annotations: ann, mean: Tensor::vector(h.to_vec()) };
        let (c, alpha) = m.attend(Direction::Forward, &[0.2, 0.5, -0.1], &enc).unwrap();
        assert!(alpha.iter().all(|a| (a - 0.25).abs() < 1e-15));
        assert!(close(&c, &h, 1e-15));
    }

    #[test]
    fn tape_model_matches_scalar_oracle() {
        let mut m = Seq2SeqModel::new(tiny_config(9, 2, 3), 4).unwrap();
        randomize(&mut m, 17, 0.9);
        let oracle = Oracle { m: &m };
        let src = [4, 7, 5, 8];
        let enc = m.encode(&src).unwrap();
        let (ann, mean) = oracle.encode(&src);
        assert!(close(enc.annotations.data(), &ann.concat(), 1e-13));
        assert!(close(enc.mean.data(), &mean, 1e-13));

        for dir in [Direction::Backward, Direction::Forward] {
            let dec = m.decoder(dir);
            let s0 = m.init_decoder_state(dir, enc.mean.data()).unwrap();
            assert!(close(&s0, &oracle.init(dec, &mean), 1e-13));
            let (c, alpha) = m.attend(dir, &s0, &enc).unwrap();
            let (oc, oa) = oracle.attend(dec, &s0, &ann);
            assert!(close(&c, &oc, 1e-13) && close(&alpha, &oa, 1e-13));

            let keys = m.attention_keys(dir, &enc).unwrap();
            let mut s = s0.clone();
            let mut os = s0;
            for prev in [BOS, 6, 4] {
                let out = m.decode_step(dir, prev, &s, &enc, &keys).unwrap();
                let (ost, odist) = oracle.step(dec, prev, &os, &ann);
                assert!(close(&out.state, &ost, 1e-13));
                assert!(close(&out.probs, &odist, 1e-13));
                assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (lp, p) in out.log_probs.iter().zip(&out.probs) {
                    assert!((lp.exp() - p).abs() < 1e-13);
                }
                s = out.state;
                os = ost;
            }
        }
    }

    #[test]
    fn attention_is_permutation_covariant() {
        let mut m = Seq2SeqModel::new(tiny_config(9, 2, 3), 4).unwrap();
        randomize(&mut m, 23, 0.9);
        let enc = m.encode(&[4, 5, 6, 7, 8]).unwrap();
        let s = [0.3, -0.6, 0.2];
        let (c, alpha) = m.attend(Direction::Forward, &s, &enc).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<f64> = perm
            .iter()
            .flat_map(|&p| enc.annotations.data()[p * 6..(p + 1) * 6].to_vec())
            .collect();
        let permuted = Encoding { annotations: Tensor::matrix(5, 6, rows).unwrap(), mean: enc.mean.clone() };
        let (c2, alpha2) = m.attend(Direction::Forward, &s, &permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((alpha2[i] - alpha[p]).abs() < 1e-15);
        }
        assert!(close(&c, &c2, 1e-14));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn states_stay_in_open_unit_interval(seed in 0u64..10_000, len in 1usize..8) {
                let mut m = Seq2SeqModel::new(tiny_config(10, 3, 4), 1).unwrap();
                randomize(&mut m, seed, 2.0);
                let src: Vec<TokenId> = (0..len).map(|i| 4 + (seed as usize + i * 3) % 6).collect();
                let enc = m.encode(&src).unwrap();
                prop_assert!(enc.annotations.data().iter().all(|x| x.abs() < 1.0));
                let s0 = m.init_decoder_state(Direction::Forward, enc.mean.data()).unwrap();
                prop_assert!(s0.iter().all(|x| x.abs() < 1.0));
                let keys = m.attention_keys(Direction::Forward, &enc).unwrap();
                let out = m.decode_step(Direction::Forward, src[0], &s0, &enc, &keys).unwrap();
                prop_assert!(out.state.iter().all(|x| x.abs() < 1.0));
                prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
