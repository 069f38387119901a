//! ReLU and TopK sparse autoencoders over residual-stream activations.
//!
//! Shapes follow the usual convention: `W_E` is `(dict, d)`, `W_D` is
//! `(d, dict)`, so a batch `x` of shape `(n, d)` encodes to `h = x·W_Eᵀ + b_E`
//! and decodes to `x̂ = h·W_Dᵀ + b_D`. Feature `i` owns encoder row `i` and
//! decoder column `i`.
//!
//! Every pure function here runs through the same graph code the trainers
//! use, with all tensors bound as constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::optim::Binder;
use crate::params::ParamSet;
use crate::tensor::Matrix;

pub const DEFAULT_DEAD_THRESHOLD: u64 = 10_000;
pub const DEFAULT_AUX_COEF: f64 = 1.0 / 32.0;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("invalid SAE config: {0}")]
    InvalidConfig(String),
    #[error("activation width {found} does not match SAE width {expected}")]
    Width { expected: usize, found: usize },
    #[error("empty activation sample")]
    EmptySample,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SaeArch {
    /// ReLU latents with an L1 penalty `lambda`. `weighted` scales each
    /// feature's activation by the L1 norm of its decoder column.
    Relu { lambda: f64, weighted: bool },
    /// Keep the `k` largest pre-activations; `k_aux` dead features
    /// reconstruct the residual with weight `aux_coef`.
    TopK { k: usize, k_aux: usize, aux_coef: f64 },
}

impl SaeArch {
    pub fn relu(lambda: f64) -> Self {
        SaeArch::Relu {
            lambda,
            weighted: true,
        }
    }

    /// TopK with `k_aux = 2k` and `aux_coef = 1/32`.
    pub fn topk(k: usize) -> Self {
        SaeArch::TopK {
            k,
            k_aux: 2 * k,
            aux_coef: DEFAULT_AUX_COEF,
        }
    }

    pub fn is_relu(&self) -> bool {
        matches!(self, SaeArch::Relu { .. })
    }

    pub fn lambda(&self) -> f64 {
        match self {
            SaeArch::Relu { lambda, .. } => *lambda,
            SaeArch::TopK { .. } => 0.0,
        }
    }

    pub fn aux_coef(&self) -> f64 {
        match self {
            SaeArch::Relu { .. } => 0.0,
            SaeArch::TopK { aux_coef, .. } => *aux_coef,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub d_model: usize,
    pub dict_size: usize,
    pub arch: SaeArch,
    /// Multiply inputs by a fixed scalar (chosen at init so the mean row norm
    /// becomes `√d`) and divide reconstructions by it.
    pub normalize_input: bool,
}

impl SaeConfig {
    pub fn validate(&self) -> Result<(), SaeError> {
        if self.d_model == 0 || self.dict_size == 0 {
            return Err(SaeError::InvalidConfig("d_model and dict_size must be positive".into()));
        }
        match self.arch {
            SaeArch::Relu { lambda, .. } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(SaeError::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")));
                }
            }
            SaeArch::TopK { k, aux_coef, .. } => {
                if k == 0 || k > self.dict_size {
                    return Err(SaeError::InvalidConfig(format!(
                        "K must lie in [1, {}], got {k}",
                        self.dict_size
                    )));
                }
                if !(aux_coef >= 0.0 && aux_coef.is_finite()) {
                    return Err(SaeError::InvalidConfig(format!("aux_coef must be finite and >= 0, got {aux_coef}")));
                }
            }
        }
        if self.dict_size < self.d_model {
            log::warn!(
                "dictionary of {} features is not overcomplete for width {}",
                self.dict_size,
                self.d_model
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    pub arch: SaeArch,
    pub w_enc: Matrix,
    pub b_enc: Matrix,
    pub w_dec: Matrix,
    pub b_dec: Matrix,
    /// Fixed input multiplier; 1 when inputs are used raw.
    pub input_scale: f64,
}

impl ParamSet for SaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("w_enc", &self.w_enc);
        f("b_enc", &self.b_enc);
        f("w_dec", &self.w_dec);
        f("b_dec", &self.b_dec);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("w_enc", &mut self.w_enc);
        f("b_enc", &mut self.b_enc);
        f("w_dec", &mut self.w_dec);
        f("b_dec", &mut self.b_dec);
    }
}

/// Unit-L2 random decoder columns, tied encoder, zero encoder bias and the
/// sample mean as decoder bias.
pub fn init_sae(config: &SaeConfig, sample: &Matrix, seed: u64) -> Result<SaeParams, SaeError> {
    config.validate()?;
    if sample.rows() == 0 {
        return Err(SaeError::EmptySample);
    }
    if sample.cols() != config.d_model {
        return Err(SaeError::Width {
            expected: config.d_model,
            found: sample.cols(),
        });
    }
    let (d, n) = (config.d_model, config.dict_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_dec = Matrix::randn(d, n, 1.0, &mut rng);
    for c in 0..n {
        let norm = (0..d).map(|r| w_dec.get(r, c).powi(2)).sum::<f64>().sqrt();
        for r in 0..d {
            w_dec.set(r, c, w_dec.get(r, c) / norm);
        }
    }
    let input_scale = if config.normalize_input {
        let mean_norm = (0..sample.rows())
            .map(|r| sample.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / sample.rows() as f64;
        if mean_norm > 0.0 {
            (d as f64).sqrt() / mean_norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    let b_dec = sample.mean_rows().scale(input_scale);
    Ok(SaeParams {
        arch: config.arch,
        w_enc: w_dec.transpose(),
        b_enc: Matrix::zeros(1, n),
        w_dec,
        b_dec,
        input_scale,
    })
}

impl SaeParams {
    pub fn d_model(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn dict_size(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn config(&self) -> SaeConfig {
        SaeConfig {
            d_model: self.d_model(),
            dict_size: self.dict_size(),
            arch: self.arch,
            normalize_input: self.input_scale != 1.0,
        }
    }

    pub fn check_width(&self, x: &Matrix) -> Result<(), SaeError> {
        if x.cols() != self.d_model() {
            return Err(SaeError::Width {
                expected: self.d_model(),
                found: x.cols(),
            });
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, trainable: bool) -> SaeVars {
        SaeVars {
            w_enc: binder.bind(g, "w_enc", &self.w_enc, trainable),
            b_enc: binder.bind(g, "b_enc", &self.b_enc, trainable),
            w_dec: binder.bind(g, "w_dec", &self.w_dec, trainable),
            b_dec: binder.bind(g, "b_dec", &self.b_dec, trainable),
        }
    }

    pub fn to_checkpoint(&self, activity: Option<&FeatureActivity>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.write_tensors(&mut ck);
        let (code, k, k_aux, aux_coef, lambda, weighted) = match self.arch {
            SaeArch::Relu { lambda, weighted } => (0.0, 0.0, 0.0, 0.0, lambda, weighted),
            SaeArch::TopK { k, k_aux, aux_coef } => (1.0, k as f64, k_aux as f64, aux_coef, 0.0, false),
        };
        ck.push_scalar("arch_code", code);
        ck.push_scalar("K", k);
        ck.push_scalar("k_aux", k_aux);
        ck.push_scalar("aux_coef", aux_coef);
        ck.push_scalar("lambda", lambda);
        ck.push_scalar("weighted_l1", if weighted { 1.0 } else { 0.0 });
        ck.push_scalar("input_scale", self.input_scale);
        if let Some(a) = activity {
            let counts: Vec<f64> = a.tokens_since_fired.iter().map(|&c| c as f64).collect();
            ck.push_vector("activity.tokens_since_fired", &Matrix::row_vector(&counts));
            ck.push_scalar("activity.dead_threshold", a.dead_threshold as f64);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SaeError> {
        let w_enc = ck.matrix("w_enc")?;
        let (n, d) = w_enc.shape();
        let arch = match ck.scalar("arch_code")? as i64 {
            0 => SaeArch::Relu {
                lambda: ck.scalar("lambda")?,
                weighted: ck.scalar_or("weighted_l1", 1.0)? != 0.0,
            },
            1 => SaeArch::TopK {
                k: ck.scalar("K")? as usize,
                k_aux: ck.scalar("k_aux")? as usize,
                aux_coef: ck.scalar("aux_coef")?,
            },
            other => {
                return Err(CheckpointError::Malformed(format!("unknown SAE arch_code {other}")).into());
            }
        };
        let params = SaeParams {
            arch,
            b_enc: ck.matrix_shaped("b_enc", 1, n)?,
            w_dec: ck.matrix_shaped("w_dec", d, n)?,
            b_dec: ck.matrix_shaped("b_dec", 1, d)?,
            input_scale: ck.scalar_or("input_scale", 1.0)?,
            w_enc,
        };
        params.config().validate()?;
        Ok(params)
    }

    /// Feature statistics stored alongside the weights, if any.
    pub fn activity_from_checkpoint(ck: &Checkpoint) -> Result<Option<FeatureActivity>, SaeError> {
        if ck.get("activity.tokens_since_fired").is_none() {
            return Ok(None);
        }
        let counts = ck.matrix("activity.tokens_since_fired")?;
        Ok(Some(FeatureActivity {
            tokens_since_fired: counts.data().iter().map(|&c| c as u64).collect(),
            dead_threshold: ck.scalar_or("activity.dead_threshold", DEFAULT_DEAD_THRESHOLD as f64)? as u64,
        }))
    }
}

/// Per-feature count of tokens since the feature last fired.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureActivity {
    pub tokens_since_fired: Vec<u64>,
    pub dead_threshold: u64,
}

impl FeatureActivity {
    pub fn new(dict_size: usize, dead_threshold: u64) -> Self {
        Self {
            tokens_since_fired: vec![0; dict_size],
            dead_threshold,
        }
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        self.tokens_since_fired
            .iter()
            .map(|&c| c >= self.dead_threshold)
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        self.dead_mask().iter().filter(|&&d| d).count()
    }
}

/// Features with any nonzero activation in `h` reset to 0; the rest age by
/// the number of rows (tokens) in the batch.
pub fn update_activity(h: &Matrix, activity: &mut FeatureActivity) {
    assert_eq!(h.cols(), activity.tokens_since_fired.len(), "latent width");
    let mut fired = vec![false; h.cols()];
    for r in 0..h.rows() {
        for (f, &v) in fired.iter_mut().zip(h.row(r)) {
            *f |= v != 0.0;
        }
    }
    let tokens = h.rows() as u64;
    for (c, f) in activity.tokens_since_fired.iter_mut().zip(fired) {
        *c = if f { 0 } else { c.saturating_add(tokens) };
    }
}

/// One training-step record. Terms that do not apply are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub alpha_kl: f64,
    pub sparsity: f64,
    pub auxk: f64,
    pub l1_penalty: f64,
    pub total: f64,
}

/// An SAE bound into a graph. Weight handles may be swapped for adapted
/// (e.g. LoRA) versions before the forward is recorded.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars {
    pub w_enc: Var,
    pub b_enc: Var,
    pub w_dec: Var,
    pub b_dec: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SaeForward {
    /// Encoder pre-activations, in the SAE's (scaled) input space.
    pub pre: Var,
    pub h: Var,
    /// Reconstruction in the caller's (unscaled) space.
    pub x_hat: Var,
    /// Reconstruction before undoing the input scale.
    pub x_hat_scaled: Var,
    pub x_scaled: Var,
}

pub fn forward_graph(g: &mut Graph, sae: &SaeParams, vars: &SaeVars, x: Var) -> SaeForward {
    let s = sae.input_scale;
    let x_scaled = if s == 1.0 { x } else { g.scale(x, s) };
    let pre = g.matmul(x_scaled, vars.w_enc, true);
    let pre = g.add_row(pre, vars.b_enc);
    let h = match sae.arch {
        SaeArch::Relu { .. } => g.relu(pre),
        SaeArch::TopK { k, .. } => g.topk(pre, k, None),
    };
    let x_hat_scaled = g.matmul(h, vars.w_dec, true);
    let x_hat_scaled = g.add_row(x_hat_scaled, vars.b_dec);
    let x_hat = if s == 1.0 {
        x_hat_scaled
    } else {
        g.scale(x_hat_scaled, 1.0 / s)
    };
    SaeForward {
        pre,
        h,
        x_hat,
        x_hat_scaled,
        x_scaled,
    }
}

/// Loss terms of one SAE forward. `sparsity` is present for ReLU, `auxk`
/// for TopK when at least one feature is dead.
#[derive(Clone, Copy, Debug)]
pub struct SaeLossVars {
    pub mse: Var,
    pub sparsity: Option<Var>,
    pub auxk: Option<Var>,
}

pub fn loss_terms_graph(
    g: &mut Graph,
    sae: &SaeParams,
    vars: &SaeVars,
    x: Var,
    fwd: &SaeForward,
    activity: Option<&FeatureActivity>,
) -> SaeLossVars {
    let mse = g.mean_sq_diff(x, fwd.x_hat);
    let mut sparsity = None;
    let mut auxk = None;
    match sae.arch {
        SaeArch::Relu { weighted, .. } => {
            sparsity = Some(if weighted {
                g.weighted_l1(fwd.h, vars.w_dec)
            } else {
                g.l1(fwd.h)
            });
        }
        SaeArch::TopK { k_aux, .. } => {
            if let Some(act) = activity {
                let dead = act.dead_mask();
                if k_aux > 0 && dead.iter().any(|&d| d) {
                    let resid = g.sub(fwd.x_scaled, fwd.x_hat_scaled);
                    let resid = g.detach(resid);
                    auxk = Some(auxk_graph(g, vars, fwd.pre, resid, k_aux, &dead));
                }
            }
        }
    }
    SaeLossVars { mse, sparsity, auxk }
}

/// Squared error between `target` and the decoder (without bias) applied to
/// the `k_aux` largest pre-activations among `dead` features.
pub fn auxk_graph(g: &mut Graph, vars: &SaeVars, pre: Var, target: Var, k_aux: usize, dead: &[bool]) -> Var {
    let h_aux = g.topk(pre, k_aux, Some(dead));
    let rec = g.matmul(h_aux, vars.w_dec, true);
    g.mean_sq_diff(rec, target)
}

/// `λ·sparsity + aux_coef·auxk`, the terms that sit outside any
/// reconstruction bracket.
pub fn penalty_graph(g: &mut Graph, terms: &SaeLossVars, lambda: f64, aux_coef: f64) -> Option<Var> {
    let s = terms.sparsity.map(|s| g.scale(s, lambda));
    let a = terms.auxk.map(|a| g.scale(a, aux_coef));
    match (s, a) {
        (Some(s), Some(a)) => Some(g.add(s, a)),
        (s, a) => s.or(a),
    }
}

/// Pure forward: `(pre_acts, h, x_hat)`.
pub fn sae_forward(x: &Matrix, sae: &SaeParams) -> Result<(Matrix, Matrix, Matrix), SaeError> {
    sae.check_width(x)?;
    let mut g = Graph::new();
    let vars = sae.bind(&mut g, &mut Binder::new(), false);
    let xv = g.constant(x.clone());
    let f = forward_graph(&mut g, sae, &vars, xv);
    Ok((g.value(f.pre).clone(), g.value(f.h).clone(), g.value(f.x_hat).clone()))
}

fn with_arch(sae: &SaeParams, arch: SaeArch) -> SaeParams {
    SaeParams { arch, ..sae.clone() }
}

/// `max(0, x·W_Eᵀ + b_E)` regardless of the stored architecture.
pub fn encode_relu(x: &Matrix, sae: &SaeParams) -> Result<Matrix, SaeError> {
    let relu = with_arch(sae, SaeArch::relu(sae.arch.lambda()));
    Ok(sae_forward(x, &relu)?.1)
}

/// `(h, pre_acts)` keeping the `k` largest pre-activations per row, lowest
/// index first on ties.
pub fn encode_topk(x: &Matrix, sae: &SaeParams, k: usize) -> Result<(Matrix, Matrix), SaeError> {
    let topk = with_arch(sae, SaeArch::topk(k));
    let (pre, h, _) = sae_forward(x, &topk)?;
    Ok((h, pre))
}

/// `h·W_Dᵀ + b_D`, in the caller's space.
pub fn decode(h: &Matrix, sae: &SaeParams) -> Result<Matrix, SaeError> {
    if h.cols() != sae.dict_size() {
        return Err(SaeError::Width {
            expected: sae.dict_size(),
            found: h.cols(),
        });
    }
    let out = h.matmul(&sae.w_dec, true).add_row(&sae.b_dec);
    Ok(if sae.input_scale == 1.0 {
        out
    } else {
        out.scale(1.0 / sae.input_scale)
    })
}

fn pure_loss(x: &Matrix, sae: &SaeParams, activity: Option<&FeatureActivity>) -> Result<LossBreakdown, SaeError> {
    sae.check_width(x)?;
    let mut g = Graph::new();
    let vars = sae.bind(&mut g, &mut Binder::new(), false);
    let xv = g.constant(x.clone());
    let f = forward_graph(&mut g, sae, &vars, xv);
    let t = loss_terms_graph(&mut g, sae, &vars, xv, &f, activity);
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).as_scalar());
    let mse = g.value(t.mse).as_scalar();
    let sparsity = val(t.sparsity);
    let auxk = val(t.auxk);
    let lambda = sae.arch.lambda();
    let total = mse + lambda * sparsity + sae.arch.aux_coef() * auxk;
    Ok(LossBreakdown {
        mse,
        sparsity,
        auxk,
        l1_penalty: lambda,
        total,
        ..Default::default()
    })
}

/// Reconstruction plus decoder-norm-weighted L1.
pub fn loss_relu_weighted(x: &Matrix, sae: &SaeParams) -> Result<LossBreakdown, SaeError> {
    let lambda = sae.arch.lambda();
    pure_loss(x, &with_arch(sae, SaeArch::Relu { lambda, weighted: true }), None)
}

/// Reconstruction plus plain L1 of the latents.
pub fn loss_relu_plain(x: &Matrix, sae: &SaeParams) -> Result<LossBreakdown, SaeError> {
    let lambda = sae.arch.lambda();
    pure_loss(x, &with_arch(sae, SaeArch::Relu { lambda, weighted: false }), None)
}

/// TopK reconstruction plus the dead-feature auxiliary loss.
pub fn loss_topk(x: &Matrix, sae: &SaeParams, activity: &FeatureActivity) -> Result<LossBreakdown, SaeError> {
    if !matches!(sae.arch, SaeArch::TopK { .. }) {
        return Err(SaeError::InvalidConfig("loss_topk needs a TopK SAE".into()));
    }
    pure_loss(x, sae, Some(activity))
}

/// Number of nonzero latents per row, averaged.
pub fn mean_l0(h: &Matrix) -> f64 {
    if h.rows() == 0 {
        return 0.0;
    }
    h.data().iter().filter(|&&v| v != 0.0).count() as f64 / h.rows() as f64
}
