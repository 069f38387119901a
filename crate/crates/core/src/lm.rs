//! A small pre-norm decoder-only transformer with a residual-stream hook.
//!
//! The hook sits at the *input* of layer `hook_layer`: [`forward_to_hook`]
//! returns the residual stream there and [`forward_from_hook`] continues from
//! any (possibly differentiable) replacement of it. Composing the two with
//! the unmodified activations reproduces the clean forward bit for bit.
//!
//! Logits are `(batch·seq, vocab)` matrices; row `b·seq + t` holds the
//! prediction made at position `t` of sequence `b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kl_row, log_softmax_into, Graph, GraphError, KlDirection, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::optim::{Adam, Binder};
use crate::params::ParamSet;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid LM config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {seq} exceeds the model maximum {max}")]
    SequenceTooLong { seq: usize, max: usize },
    #[error("empty token batch")]
    EmptyBatch,
    #[error("splice payload has shape {found:?}, expected {expected:?}")]
    SpliceShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite LM loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len_max: usize,
    pub hook_layer: usize,
    /// Reuse the token embedding as the unembedding.
    pub tie_embeddings: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            seq_len_max: 128,
            hook_layer: 2,
            tie_embeddings: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.seq_len_max == 0 {
            return bad("d_model, n_heads, d_ff and seq_len_max must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.hook_layer >= self.n_layers {
            return bad(format!(
                "hook_layer {} must be below n_layers {}",
                self.hook_layer, self.n_layers
            ));
        }
        Ok(())
    }
}

/// Integer token sequences of shape `(batch, seq)`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), batch * seq, "token count != batch*seq");
        Self { batch, seq, ids }
    }

    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let seq = seqs.first().map_or(0, Vec::len);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            assert_eq!(s.len(), seq, "ragged token batch");
            ids.extend_from_slice(s);
        }
        Self::new(seqs.len(), seq, ids)
    }

    pub fn tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Next-token targets: position `t` predicts token `t + 1`; the last
    /// position of each sequence has no target.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.ids.len());
        for b in 0..self.batch {
            let s = self.sequence(b);
            for t in 0..self.seq {
                out.push(s.get(t + 1).copied());
            }
        }
        out
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.seq).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    /// `(3·d, d)`: query, key and value projections stacked.
    pub w_qkv: Matrix,
    pub b_qkv: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w_fc: Matrix,
    pub b_fc: Matrix,
    pub w_proj: Matrix,
    pub b_proj: Matrix,
}

/// The projection matrices inside one layer that adapters may wrap.
pub const ATTN_WEIGHTS: [&str; 2] = ["attn.w_qkv", "attn.w_o"];
pub const MLP_WEIGHTS: [&str; 2] = ["mlp.w_fc", "mlp.w_proj"];

impl LayerParams {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{p}.ln1.gamma"), &self.ln1_gamma);
        f(&format!("{p}.ln1.beta"), &self.ln1_beta);
        f(&format!("{p}.attn.w_qkv"), &self.w_qkv);
        f(&format!("{p}.attn.b_qkv"), &self.b_qkv);
        f(&format!("{p}.attn.w_o"), &self.w_o);
        f(&format!("{p}.attn.b_o"), &self.b_o);
        f(&format!("{p}.ln2.gamma"), &self.ln2_gamma);
        f(&format!("{p}.ln2.beta"), &self.ln2_beta);
        f(&format!("{p}.mlp.w_fc"), &self.w_fc);
        f(&format!("{p}.mlp.b_fc"), &self.b_fc);
        f(&format!("{p}.mlp.w_proj"), &self.w_proj);
        f(&format!("{p}.mlp.b_proj"), &self.b_proj);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{p}.ln1.gamma"), &mut self.ln1_gamma);
        f(&format!("{p}.ln1.beta"), &mut self.ln1_beta);
        f(&format!("{p}.attn.w_qkv"), &mut self.w_qkv);
        f(&format!("{p}.attn.b_qkv"), &mut self.b_qkv);
        f(&format!("{p}.attn.w_o"), &mut self.w_o);
        f(&format!("{p}.attn.b_o"), &mut self.b_o);
        f(&format!("{p}.ln2.gamma"), &mut self.ln2_gamma);
        f(&format!("{p}.ln2.beta"), &mut self.ln2_beta);
        f(&format!("{p}.mlp.w_fc"), &mut self.w_fc);
        f(&format!("{p}.mlp.b_fc"), &mut self.b_fc);
        f(&format!("{p}.mlp.w_proj"), &mut self.w_proj);
        f(&format!("{p}.mlp.b_proj"), &mut self.b_proj);
    }

    /// Looks up one of [`ATTN_WEIGHTS`] / [`MLP_WEIGHTS`].
    pub fn weight(&self, local: &str) -> Option<&Matrix> {
        match local {
            "attn.w_qkv" => Some(&self.w_qkv),
            "attn.w_o" => Some(&self.w_o),
            "mlp.w_fc" => Some(&self.w_fc),
            "mlp.w_proj" => Some(&self.w_proj),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Matrix,
    pub lnf_beta: Matrix,
    /// `None` when the unembedding is tied to `tok_emb`.
    pub unembed: Option<Matrix>,
}

impl ParamSet for LmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        f("ln_f.gamma", &self.lnf_gamma);
        f("ln_f.beta", &self.lnf_beta);
        if let Some(u) = &self.unembed {
            f("unembed", u);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        f("ln_f.gamma", &mut self.lnf_gamma);
        f("ln_f.beta", &mut self.lnf_beta);
        if let Some(u) = &mut self.unembed {
            f("unembed", u);
        }
    }
}

impl LmParams {
    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/√(2·n_layers)`, unit norm gains, zero biases.
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = Matrix::randn(config.vocab_size, d, std, &mut rng);
        let pos_emb = Matrix::randn(config.seq_len_max, d, std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: Matrix::filled(1, d, 1.0),
                ln1_beta: Matrix::zeros(1, d),
                w_qkv: Matrix::randn(3 * d, d, std, &mut rng),
                b_qkv: Matrix::zeros(1, 3 * d),
                w_o: Matrix::randn(d, d, proj_std, &mut rng),
                b_o: Matrix::zeros(1, d),
                ln2_gamma: Matrix::filled(1, d, 1.0),
                ln2_beta: Matrix::zeros(1, d),
                w_fc: Matrix::randn(config.d_ff, d, std, &mut rng),
                b_fc: Matrix::zeros(1, config.d_ff),
                w_proj: Matrix::randn(d, config.d_ff, proj_std, &mut rng),
                b_proj: Matrix::zeros(1, d),
            })
            .collect();
        let unembed = (!config.tie_embeddings).then(|| Matrix::randn(config.vocab_size, d, std, &mut rng));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gamma: Matrix::filled(1, d, 1.0),
            lnf_beta: Matrix::zeros(1, d),
            unembed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.push_scalar("config.vocab_size", c.vocab_size as f64);
        ck.push_scalar("config.d_model", c.d_model as f64);
        ck.push_scalar("config.n_layers", c.n_layers as f64);
        ck.push_scalar("config.n_heads", c.n_heads as f64);
        ck.push_scalar("config.d_ff", c.d_ff as f64);
        ck.push_scalar("config.seq_len_max", c.seq_len_max as f64);
        ck.push_scalar("config.hook_layer", c.hook_layer as f64);
        ck.push_scalar("config.tie_embeddings", if c.tie_embeddings { 1.0 } else { 0.0 });
        self.write_tensors(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, LmError> {
        let u = |n: &str| ck.scalar(n).map(|v| v as usize);
        let config = LmConfig {
            vocab_size: u("config.vocab_size")?,
            d_model: u("config.d_model")?,
            n_layers: u("config.n_layers")?,
            n_heads: u("config.n_heads")?,
            d_ff: u("config.d_ff")?,
            seq_len_max: u("config.seq_len_max")?,
            hook_layer: u("config.hook_layer")?,
            tie_embeddings: ck.scalar("config.tie_embeddings")? != 0.0,
        };
        let mut params = Self::init(&config, 0)?;
        let mut err = None;
        params.visit_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            match ck.matrix_shaped(name, m.rows(), m.cols()) {
                Ok(v) => *m = v,
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(params),
        }
    }

    /// Overrides the hook layer, e.g. to harvest a different depth from the
    /// same weights.
    pub fn with_hook_layer(mut self, hook_layer: usize) -> Result<Self, LmError> {
        self.config.hook_layer = hook_layer;
        self.config.validate()?;
        Ok(self)
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<(), LmError> {
        if tokens.tokens() == 0 {
            return Err(LmError::EmptyBatch);
        }
        if tokens.seq > self.config.seq_len_max {
            return Err(LmError::SequenceTooLong {
                seq: tokens.seq,
                max: self.config.seq_len_max,
            });
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Adds every tensor to `g`; with `trainable` they are tracked under
    /// their parameter names.
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, trainable: bool) -> LmVars {
        let mut b = |name: &str, m: &Matrix| binder.bind(g, name, m, trainable);
        let tok_emb = b("tok_emb", &self.tok_emb);
        let pos_emb = b("pos_emb", &self.pos_emb);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("layers.{i}");
                LayerVars {
                    ln1_gamma: b(&format!("{p}.ln1.gamma"), &l.ln1_gamma),
                    ln1_beta: b(&format!("{p}.ln1.beta"), &l.ln1_beta),
                    w_qkv: b(&format!("{p}.attn.w_qkv"), &l.w_qkv),
                    b_qkv: b(&format!("{p}.attn.b_qkv"), &l.b_qkv),
                    w_o: b(&format!("{p}.attn.w_o"), &l.w_o),
                    b_o: b(&format!("{p}.attn.b_o"), &l.b_o),
                    ln2_gamma: b(&format!("{p}.ln2.gamma"), &l.ln2_gamma),
                    ln2_beta: b(&format!("{p}.ln2.beta"), &l.ln2_beta),
                    w_fc: b(&format!("{p}.mlp.w_fc"), &l.w_fc),
                    b_fc: b(&format!("{p}.mlp.b_fc"), &l.b_fc),
                    w_proj: b(&format!("{p}.mlp.w_proj"), &l.w_proj),
                    b_proj: b(&format!("{p}.mlp.b_proj"), &l.b_proj),
                }
            })
            .collect();
        let lnf_gamma = b("ln_f.gamma", &self.lnf_gamma);
        let lnf_beta = b("ln_f.beta", &self.lnf_beta);
        let unembed = match &self.unembed {
            Some(u) => b("unembed", u),
            None => tok_emb,
        };
        LmVars {
            config: self.config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gamma,
            lnf_beta,
            unembed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_proj: Var,
    pub b_proj: Var,
}

impl LayerVars {
    pub fn weight(&self, local: &str) -> Option<Var> {
        match local {
            "attn.w_qkv" => Some(self.w_qkv),
            "attn.w_o" => Some(self.w_o),
            "mlp.w_fc" => Some(self.w_fc),
            "mlp.w_proj" => Some(self.w_proj),
            _ => None,
        }
    }

    /// Mutable access to one of [`ATTN_WEIGHTS`] / [`MLP_WEIGHTS`].
    pub fn weight_mut(&mut self, local: &str) -> Option<&mut Var> {
        match local {
            "attn.w_qkv" => Some(&mut self.w_qkv),
            "attn.w_o" => Some(&mut self.w_o),
            "mlp.w_fc" => Some(&mut self.w_fc),
            "mlp.w_proj" => Some(&mut self.w_proj),
            _ => None,
        }
    }
}

/// An LM bound into a graph.
#[derive(Clone, Debug)]
pub struct LmVars {
    pub config: LmConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_gamma: Var,
    pub lnf_beta: Var,
    pub unembed: Var,
}

fn layer_forward(g: &mut Graph, l: &LayerVars, x: Var, batch: usize, seq: usize, heads: usize) -> Var {
    let a = g.layer_norm(x, l.ln1_gamma, l.ln1_beta);
    let qkv = g.matmul(a, l.w_qkv, true);
    let qkv = g.add_row(qkv, l.b_qkv);
    let att = g.causal_attention(qkv, batch, seq, heads);
    let att = g.matmul(att, l.w_o, true);
    let att = g.add_row(att, l.b_o);
    let x = g.add(x, att);
    let m = g.layer_norm(x, l.ln2_gamma, l.ln2_beta);
    let m = g.matmul(m, l.w_fc, true);
    let m = g.add_row(m, l.b_fc);
    let m = g.gelu(m);
    let m = g.matmul(m, l.w_proj, true);
    let m = g.add_row(m, l.b_proj);
    g.add(x, m)
}

/// Token plus positional embedding: the residual stream entering layer 0.
pub fn embed(g: &mut Graph, vars: &LmVars, tokens: &TokenBatch) -> Var {
    let tok = g.embedding(vars.tok_emb, &tokens.ids);
    let pos = g.embedding(vars.pos_emb, &tokens.positions());
    g.add(tok, pos)
}

/// Runs layers `start..end` on a residual stream of `batch` sequences.
pub fn run_layers(g: &mut Graph, vars: &LmVars, mut x: Var, start: usize, end: usize, batch: usize, seq: usize) -> Var {
    for l in &vars.layers[start..end] {
        x = layer_forward(g, l, x, batch, seq, vars.config.n_heads);
    }
    x
}

pub fn unembed(g: &mut Graph, vars: &LmVars, x: Var) -> Var {
    let h = g.layer_norm(x, vars.lnf_gamma, vars.lnf_beta);
    g.matmul(h, vars.unembed, true)
}

/// Residual stream entering the hook layer.
pub fn forward_to_hook(g: &mut Graph, vars: &LmVars, tokens: &TokenBatch) -> Var {
    let x = embed(g, vars, tokens);
    run_layers(g, vars, x, 0, vars.config.hook_layer, tokens.batch, tokens.seq)
}

/// Logits from a residual stream placed at the hook layer.
pub fn forward_from_hook(g: &mut Graph, vars: &LmVars, resid: Var, batch: usize, seq: usize) -> Var {
    let n = vars.config.n_layers;
    let x = run_layers(g, vars, resid, vars.config.hook_layer, n, batch, seq);
    unembed(g, vars, x)
}

/// Clean forward through the whole model: `(logits, hook_acts)`.
pub fn forward_clean(g: &mut Graph, vars: &LmVars, tokens: &TokenBatch) -> (Var, Var) {
    let hook = forward_to_hook(g, vars, tokens);
    let logits = forward_from_hook(g, vars, hook, tokens.batch, tokens.seq);
    (logits, hook)
}

/// Which residual stream the layers at and after the hook consume.
#[derive(Clone, Copy, Debug)]
pub enum SpliceMode<'a> {
    Clean,
    /// Replace the hook-layer input with this `(batch·seq, d_model)` matrix.
    Replace(&'a Matrix),
}

/// Pure forward: `(logits, hook_acts)` where `hook_acts` are always the
/// clean activations entering the hook layer.
pub fn lm_forward(tokens: &TokenBatch, params: &LmParams, mode: SpliceMode<'_>) -> Result<(Matrix, Matrix), LmError> {
    params.check_tokens(tokens)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &mut Binder::new(), false);
    let hook = forward_to_hook(&mut g, &vars, tokens);
    let resid = match mode {
        SpliceMode::Clean => hook,
        SpliceMode::Replace(payload) => {
            let expected = (tokens.tokens(), params.config.d_model);
            if payload.shape() != expected {
                return Err(LmError::SpliceShape {
                    expected,
                    found: payload.shape(),
                });
            }
            g.constant(payload.clone())
        }
    };
    let logits = forward_from_hook(&mut g, &vars, resid, tokens.batch, tokens.seq);
    Ok((g.value(logits).clone(), g.value(hook).clone()))
}

/// Hook activations only; skips the layers after the hook.
pub fn hook_activations(tokens: &TokenBatch, params: &LmParams) -> Result<Matrix, LmError> {
    params.check_tokens(tokens)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &mut Binder::new(), false);
    let hook = forward_to_hook(&mut g, &vars, tokens);
    Ok(g.value(hook).clone())
}

/// Checks a splice payload against the batch before it enters a graph.
pub fn check_splice(params: &LmParams, tokens: &TokenBatch, payload: &Matrix) -> Result<(), LmError> {
    params.check_tokens(tokens)?;
    let expected = (tokens.tokens(), params.config.d_model);
    if payload.shape() != expected {
        return Err(LmError::SpliceShape {
            expected,
            found: payload.shape(),
        });
    }
    Ok(())
}

pub fn validate_tokens(params: &LmParams, tokens: &TokenBatch) -> Result<(), LmError> {
    params.check_tokens(tokens)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        log_softmax_into(logits.row(r), out.row_mut(r));
    }
    out
}

/// Mean of `−log softmax(logits)[target]` over rows that have a target.
/// Returns `None` when no row has one.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> Option<f64> {
    assert_eq!(logits.rows(), targets.len(), "one target slot per row");
    let mut logp = vec![0.0; logits.cols()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            log_softmax_into(logits.row(r), &mut logp);
            total -= logp[t];
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Per-row KL divergence between the reference and spliced distributions.
pub fn kl_per_row(logits_ref: &Matrix, logits_spliced: &Matrix, direction: KlDirection) -> Vec<f64> {
    assert_eq!(logits_ref.shape(), logits_spliced.shape(), "KL operands differ in shape");
    let mut p = vec![0.0; logits_ref.cols()];
    let mut q = vec![0.0; logits_ref.cols()];
    (0..logits_ref.rows())
        .map(|r| {
            log_softmax_into(logits_ref.row(r), &mut p);
            log_softmax_into(logits_spliced.row(r), &mut q);
            kl_row(&p, &q, direction)
        })
        .collect()
}

/// Mean over positions of `D_KL(P_ref ‖ P_spliced)`, computed in log space.
pub fn kl_divergence(logits_ref: &Matrix, logits_spliced: &Matrix) -> f64 {
    let rows = kl_per_row(logits_ref, logits_spliced, KlDirection::RefToModel);
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

/// Adam-driven next-token training of the LM.
pub struct LmTrainer {
    pub optimizer: Adam,
    pub step: u64,
}

impl LmTrainer {
    pub fn new(optimizer: Adam) -> Self {
        Self { optimizer, step: 0 }
    }

    /// One gradient step on next-token cross-entropy. Returns the loss
    /// before the update.
    pub fn train_step(&mut self, tokens: &TokenBatch, params: &mut LmParams, lr: f64) -> Result<f64, LmError> {
        params.check_tokens(tokens)?;
        if tokens.seq < 2 {
            return Err(LmError::InvalidConfig(
                "training needs sequences of at least two tokens".into(),
            ));
        }
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let vars = params.bind(&mut g, &mut binder, true);
        let (logits, _) = forward_clean(&mut g, &vars, tokens);
        let loss = g.cross_entropy(logits, &tokens.next_token_targets());
        let value = g.value(loss).as_scalar();
        if !value.is_finite() {
            return Err(LmError::NonFiniteLoss {
                step: self.step,
                loss: value,
            });
        }
        let mut grads = g.backward(loss)?;
        let grads = binder.collect(&g, &mut grads);
        self.optimizer.step(params, &grads, lr);
        self.step += 1;
        Ok(value)
    }
}
