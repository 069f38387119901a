//! Lightweight adapters: residual skip adapters placed after the SAE, and
//! LoRA factors wrapping SAE or LM weight matrices.
//!
//! Every adapter is an exact identity when freshly initialized: the skip
//! adapters zero their output path and LoRA zeroes `B`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::lm::{LmParams, LmVars, ATTN_WEIGHTS, MLP_WEIGHTS};
use crate::optim::Binder;
use crate::params::ParamSet;
use crate::sae::{SaeParams, SaeVars};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("rank {rank} exceeds min(m, n) = {max} for {target}")]
    RankTooLarge { target: String, rank: usize, max: usize },
    #[error("invalid adapter: {0}")]
    Invalid(String),
    #[error("unknown LoRA target {0}")]
    UnknownTarget(String),
    #[error("{name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

const KIND_LOWRANK: f64 = 0.0;
const KIND_MLP: f64 = 1.0;
const KIND_LORA_SAE: f64 = 2.0;
const KIND_LORA_LM: f64 = 3.0;

/// `y = x + U·V·x`, applied row-wise as `x + (x·Vᵀ)·Uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankSkip {
    /// `(d, r)`.
    pub u: Matrix,
    /// `(r, d)`, zero at init.
    pub v: Matrix,
}

impl LowRankSkip {
    pub fn new(d: usize, rank: usize, seed: u64) -> Result<Self, AdapterError> {
        if rank == 0 || rank >= d {
            return Err(AdapterError::Invalid(format!("low-rank skip needs 1 <= rank < d ({d}), got {rank}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            u: Matrix::randn(d, rank, 1.0 / (d as f64).sqrt(), &mut rng),
            v: Matrix::zeros(rank, d),
        })
    }

    pub fn rank(&self) -> usize {
        self.v.rows()
    }
}

/// `y = x + W2·ReLU(W1·x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSkip {
    /// `(h, d)`.
    pub w1: Matrix,
    pub b1: Matrix,
    /// `(d, h)`, zero at init.
    pub w2: Matrix,
    /// zero at init.
    pub b2: Matrix,
}

impl MlpSkip {
    pub fn new(d: usize, hidden: usize, seed: u64) -> Result<Self, AdapterError> {
        if hidden == 0 || hidden >= d {
            return Err(AdapterError::Invalid(format!("MLP skip needs 1 <= hidden < d ({d}), got {hidden}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w1: Matrix::randn(hidden, d, 1.0 / (d as f64).sqrt(), &mut rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(d, hidden),
            b2: Matrix::zeros(1, d),
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }
}

/// An adapter applied to the SAE output before it is spliced in.
#[derive(Clone, Debug, PartialEq)]
pub enum SkipAdapter {
    LowRank(LowRankSkip),
    Mlp(MlpSkip),
}

impl ParamSet for SkipAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        match self {
            SkipAdapter::LowRank(a) => {
                f("u", &a.u);
                f("v", &a.v);
            }
            SkipAdapter::Mlp(a) => {
                f("w1", &a.w1);
                f("b1", &a.b1);
                f("w2", &a.w2);
                f("b2", &a.b2);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            SkipAdapter::LowRank(a) => {
                f("u", &mut a.u);
                f("v", &mut a.v);
            }
            SkipAdapter::Mlp(a) => {
                f("w1", &mut a.w1);
                f("b1", &mut a.b1);
                f("w2", &mut a.w2);
                f("b2", &mut a.b2);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SkipVars {
    LowRank { u: Var, v: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl SkipAdapter {
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, trainable: bool) -> SkipVars {
        match self {
            SkipAdapter::LowRank(a) => SkipVars::LowRank {
                u: binder.bind(g, "u", &a.u, trainable),
                v: binder.bind(g, "v", &a.v, trainable),
            },
            SkipAdapter::Mlp(a) => SkipVars::Mlp {
                w1: binder.bind(g, "w1", &a.w1, trainable),
                b1: binder.bind(g, "b1", &a.b1, trainable),
                w2: binder.bind(g, "w2", &a.w2, trainable),
                b2: binder.bind(g, "b2", &a.b2, trainable),
            },
        }
    }

    pub fn width(&self) -> usize {
        match self {
            SkipAdapter::LowRank(a) => a.u.rows(),
            SkipAdapter::Mlp(a) => a.w1.cols(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.write_tensors(&mut ck);
        match self {
            SkipAdapter::LowRank(a) => {
                ck.push_scalar("adapter_kind", KIND_LOWRANK);
                ck.push_scalar("rank", a.rank() as f64);
            }
            SkipAdapter::Mlp(a) => {
                ck.push_scalar("adapter_kind", KIND_MLP);
                ck.push_scalar("hidden", a.hidden() as f64);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AdapterError> {
        let kind = ck.scalar("adapter_kind")?;
        if kind == KIND_LOWRANK {
            let u = ck.matrix("u")?;
            let (d, r) = u.shape();
            Ok(SkipAdapter::LowRank(LowRankSkip {
                u,
                v: ck.matrix_shaped("v", r, d)?,
            }))
        } else if kind == KIND_MLP {
            let w1 = ck.matrix("w1")?;
            let (h, d) = w1.shape();
            Ok(SkipAdapter::Mlp(MlpSkip {
                w1,
                b1: ck.matrix_shaped("b1", 1, h)?,
                w2: ck.matrix_shaped("w2", d, h)?,
                b2: ck.matrix_shaped("b2", 1, d)?,
            }))
        } else {
            Err(AdapterError::Invalid(format!("checkpoint holds adapter kind {kind}, not a skip adapter")))
        }
    }
}

pub fn skip_graph(g: &mut Graph, vars: &SkipVars, x: Var) -> Var {
    match *vars {
        SkipVars::LowRank { u, v } => {
            let t = g.matmul(x, v, true);
            let t = g.matmul(t, u, true);
            g.add(x, t)
        }
        SkipVars::Mlp { w1, b1, w2, b2 } => {
            let t = g.matmul(x, w1, true);
            let t = g.add_row(t, b1);
            let t = g.relu(t);
            let t = g.matmul(t, w2, true);
            let t = g.add_row(t, b2);
            g.add(x, t)
        }
    }
}

fn skip_pure(x: &Matrix, adapter: &SkipAdapter) -> Result<Matrix, AdapterError> {
    if x.cols() != adapter.width() {
        return Err(AdapterError::Shape {
            name: "adapter input".into(),
            expected: (x.rows(), adapter.width()),
            found: x.shape(),
        });
    }
    let mut g = Graph::new();
    let vars = adapter.bind(&mut g, &mut Binder::new(), false);
    let xv = g.constant(x.clone());
    let y = skip_graph(&mut g, &vars, xv);
    Ok(g.value(y).clone())
}

pub fn lowrank_forward(x: &Matrix, adapter: &LowRankSkip) -> Result<Matrix, AdapterError> {
    skip_pure(x, &SkipAdapter::LowRank(adapter.clone()))
}

pub fn mlp_skip_forward(x: &Matrix, adapter: &MlpSkip) -> Result<Matrix, AdapterError> {
    skip_pure(x, &SkipAdapter::Mlp(adapter.clone()))
}

/// Low-rank factors for one wrapped `(m, n)` weight: `W = base + B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraWrap {
    /// Parameter name of the wrapped matrix in its owner.
    pub target: String,
    /// `(r, n)`.
    pub a: Matrix,
    /// `(m, r)`, zero at init.
    pub b: Matrix,
}

impl LoraWrap {
    pub fn new(target: &str, m: usize, n: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self, AdapterError> {
        let max = m.min(n);
        if rank == 0 || rank > max {
            return Err(AdapterError::RankTooLarge {
                target: target.into(),
                rank,
                max,
            });
        }
        Ok(Self {
            target: target.into(),
            a: Matrix::randn(rank, n, 1.0 / (n as f64).sqrt(), rng),
            b: Matrix::zeros(m, rank),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    fn check(&self, base: &Matrix) -> Result<(), AdapterError> {
        let (m, n) = base.shape();
        let r = self.rank();
        if r == 0 || r > m.min(n) {
            return Err(AdapterError::RankTooLarge {
                target: self.target.clone(),
                rank: r,
                max: m.min(n),
            });
        }
        for (name, want, got) in [("a", (r, n), self.a.shape()), ("b", (m, r), self.b.shape())] {
            if want != got {
                return Err(AdapterError::Shape {
                    name: format!("lora.{}.{name}", self.target),
                    expected: want,
                    found: got,
                });
            }
        }
        Ok(())
    }
}

/// `base + B·A`, computed exactly as the wrapped forward computes it.
pub fn lora_effective_weight(base: &Matrix, wrap: &LoraWrap) -> Result<Matrix, AdapterError> {
    wrap.check(base)?;
    Ok(base.add(&wrap.b.matmul(&wrap.a, false)))
}

/// `base + B·A` inside a graph.
pub fn lora_graph(g: &mut Graph, base: Var, a: Var, b: Var) -> Var {
    let delta = g.matmul(b, a, false);
    g.add(base, delta)
}

/// A set of LoRA wraps over named weights of one model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LoraAdapter {
    pub wraps: Vec<LoraWrap>,
}

impl ParamSet for LoraAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for w in &self.wraps {
            f(&format!("lora.{}.a", w.target), &w.a);
            f(&format!("lora.{}.b", w.target), &w.b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for w in &mut self.wraps {
            f(&format!("lora.{}.a", w.target), &mut w.a);
            f(&format!("lora.{}.b", w.target), &mut w.b);
        }
    }
}

impl LoraAdapter {
    /// Binds the factors and returns `(target, base + B·A)` for every wrap,
    /// given the already-bound base weight of each target.
    fn bind_wraps(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        base_of: impl Fn(&str) -> Option<Var>,
    ) -> Result<Vec<(String, Var)>, AdapterError> {
        let mut out = Vec::with_capacity(self.wraps.len());
        for w in &self.wraps {
            let base = base_of(&w.target).ok_or_else(|| AdapterError::UnknownTarget(w.target.clone()))?;
            let a = binder.bind(g, &format!("lora.{}.a", w.target), &w.a, true);
            let b = binder.bind(g, &format!("lora.{}.b", w.target), &w.b, true);
            out.push((w.target.clone(), lora_graph(g, base, a, b)));
        }
        Ok(out)
    }

    fn write_wraps(&self, ck: &mut Checkpoint) {
        self.write_tensors(ck);
        for w in &self.wraps {
            ck.push_scalar(format!("wraps.{}", w.target), w.rank() as f64);
        }
    }

    fn read_wraps(ck: &Checkpoint) -> Result<Self, AdapterError> {
        let mut wraps = Vec::new();
        for e in ck.entries() {
            if let Some(target) = e.name.strip_prefix("wraps.") {
                let a = ck.matrix(&format!("lora.{target}.a"))?;
                let b = ck.matrix(&format!("lora.{target}.b"))?;
                if a.rows() != ck.scalar(&e.name)? as usize {
                    return Err(AdapterError::Invalid(format!("rank of {target} disagrees with its factors")));
                }
                wraps.push(LoraWrap {
                    target: target.to_string(),
                    a,
                    b,
                });
            }
        }
        Ok(Self { wraps })
    }
}

/// An SAE with LoRA on both weight matrices. Base weights are frozen; the
/// biases stay directly trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSae {
    pub base: SaeParams,
    pub lora: LoraAdapter,
}

impl ParamSet for LoraSae {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.lora.visit(f);
        f("b_enc", &self.base.b_enc);
        f("b_dec", &self.base.b_dec);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.lora.visit_mut(f);
        f("b_enc", &mut self.base.b_enc);
        f("b_dec", &mut self.base.b_dec);
    }
}

pub fn attach_lora_to_sae(sae: &SaeParams, rank: usize, seed: u64) -> Result<LoraSae, AdapterError> {
    if rank == 0 {
        return Err(AdapterError::Invalid("LoRA rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = sae.w_enc.shape();
    let wraps = vec![
        LoraWrap::new("w_enc", n, d, rank, &mut rng)?,
        LoraWrap::new("w_dec", d, n, rank, &mut rng)?,
    ];
    Ok(LoraSae {
        base: sae.clone(),
        lora: LoraAdapter { wraps },
    })
}

impl LoraSae {
    /// Trainable factors and biases tracked; base weights constant.
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> Result<SaeVars, AdapterError> {
        let mut vars = SaeVars {
            w_enc: g.constant(self.base.w_enc.clone()),
            b_enc: binder.bind(g, "b_enc", &self.base.b_enc, true),
            w_dec: g.constant(self.base.w_dec.clone()),
            b_dec: binder.bind(g, "b_dec", &self.base.b_dec, true),
        };
        let (enc, dec) = (vars.w_enc, vars.w_dec);
        let bound = self.lora.bind_wraps(g, binder, |t| match t {
            "w_enc" => Some(enc),
            "w_dec" => Some(dec),
            _ => None,
        })?;
        for (t, v) in bound {
            if t == "w_enc" {
                vars.w_enc = v;
            } else {
                vars.w_dec = v;
            }
        }
        Ok(vars)
    }

    /// Plain SAE with the effective weights.
    pub fn merged(&self) -> Result<SaeParams, AdapterError> {
        let mut out = self.base.clone();
        for w in &self.lora.wraps {
            match w.target.as_str() {
                "w_enc" => out.w_enc = lora_effective_weight(&self.base.w_enc, w)?,
                "w_dec" => out.w_dec = lora_effective_weight(&self.base.w_dec, w)?,
                other => return Err(AdapterError::UnknownTarget(other.into())),
            }
        }
        Ok(out)
    }

    pub fn trainable_count(&self) -> usize {
        self.param_count()
    }

    /// Factors, biases and the wraps table. The frozen base weights live in
    /// the SAE checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_scalar("adapter_kind", KIND_LORA_SAE);
        self.lora.write_wraps(&mut ck);
        ck.push_vector("b_enc", &self.base.b_enc);
        ck.push_vector("b_dec", &self.base.b_dec);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, base: &SaeParams) -> Result<Self, AdapterError> {
        if ck.scalar("adapter_kind")? != KIND_LORA_SAE {
            return Err(AdapterError::Invalid("checkpoint does not hold an SAE LoRA adapter".into()));
        }
        let mut base = base.clone();
        base.b_enc = ck.matrix_shaped("b_enc", 1, base.dict_size())?;
        base.b_dec = ck.matrix_shaped("b_dec", 1, base.d_model())?;
        let out = Self {
            lora: LoraAdapter::read_wraps(ck)?,
            base,
        };
        out.merged()?;
        Ok(out)
    }
}

/// Which LM layers receive LoRA wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraScope {
    AllLayers,
    /// Only the layers downstream of the splice (index ≥ hook_layer), so the
    /// SAE input is unaffected.
    AfterHook,
}

impl LoraScope {
    pub fn layers(&self, lm: &LmParams) -> std::ops::Range<usize> {
        match self {
            LoraScope::AllLayers => 0..lm.config.n_layers,
            LoraScope::AfterHook => lm.config.hook_layer..lm.config.n_layers,
        }
    }
}

/// A frozen LM with LoRA on attention (and optionally MLP) projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLm {
    pub base: LmParams,
    pub lora: LoraAdapter,
    pub scope: LoraScope,
    pub attn_only: bool,
}

impl ParamSet for LoraLm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.lora.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.lora.visit_mut(f);
    }
}

pub fn attach_lora_to_lm(
    lm: &LmParams,
    rank: usize,
    scope: LoraScope,
    attn_only: bool,
    seed: u64,
) -> Result<LoraLm, AdapterError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wraps = Vec::new();
    for i in scope.layers(lm) {
        let layer = &lm.layers[i];
        let locals = ATTN_WEIGHTS
            .iter()
            .chain(if attn_only { [].iter() } else { MLP_WEIGHTS.iter() });
        for local in locals {
            let w = layer.weight(local).expect("known weight name");
            let (m, n) = w.shape();
            wraps.push(LoraWrap::new(&format!("layers.{i}.{local}"), m, n, rank, &mut rng)?);
        }
    }
    Ok(LoraLm {
        base: lm.clone(),
        lora: LoraAdapter { wraps },
        scope,
        attn_only,
    })
}

fn split_lm_target(target: &str) -> Option<(usize, &str)> {
    let rest = target.strip_prefix("layers.")?;
    let (idx, local) = rest.split_once('.')?;
    Some((idx.parse().ok()?, local))
}

impl LoraLm {
    /// Base weights constant, LoRA factors tracked.
    pub fn bind(&self, g: &mut Graph, binder: &mut Binder) -> Result<LmVars, AdapterError> {
        let mut vars = self.base.bind(g, &mut Binder::new(), false);
        let bound = self.lora.bind_wraps(g, binder, |t| {
            let (i, local) = split_lm_target(t)?;
            vars.layers.get(i)?.weight(local)
        })?;
        for (t, v) in bound {
            let (i, local) = split_lm_target(&t).expect("validated above");
            *vars.layers[i].weight_mut(local).expect("validated above") = v;
        }
        Ok(vars)
    }

    /// The LM with every wrapped weight replaced by its effective weight.
    pub fn merged(&self) -> Result<LmParams, AdapterError> {
        let mut out = self.base.clone();
        for w in &self.lora.wraps {
            let (i, local) = split_lm_target(&w.target).ok_or_else(|| AdapterError::UnknownTarget(w.target.clone()))?;
            let base = self
                .base
                .layers
                .get(i)
                .and_then(|l| l.weight(local))
                .ok_or_else(|| AdapterError::UnknownTarget(w.target.clone()))?;
            let eff = lora_effective_weight(base, w)?;
            let layer = &mut out.layers[i];
            match local {
                "attn.w_qkv" => layer.w_qkv = eff,
                "attn.w_o" => layer.w_o = eff,
                "mlp.w_fc" => layer.w_fc = eff,
                "mlp.w_proj" => layer.w_proj = eff,
                _ => return Err(AdapterError::UnknownTarget(w.target.clone())),
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_scalar("adapter_kind", KIND_LORA_LM);
        ck.push_scalar(
            "lora.scope",
            match self.scope {
                LoraScope::AllLayers => 0.0,
                LoraScope::AfterHook => 1.0,
            },
        );
        ck.push_scalar("lora.attn_only", if self.attn_only { 1.0 } else { 0.0 });
        self.lora.write_wraps(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, base: &LmParams) -> Result<Self, AdapterError> {
        if ck.scalar("adapter_kind")? != KIND_LORA_LM {
            return Err(AdapterError::Invalid("checkpoint does not hold an LM LoRA adapter".into()));
        }
        let out = Self {
            base: base.clone(),
            lora: LoraAdapter::read_wraps(ck)?,
            scope: if ck.scalar("lora.scope")? == 0.0 {
                LoraScope::AllLayers
            } else {
                LoraScope::AfterHook
            },
            attn_only: ck.scalar("lora.attn_only")? != 0.0,
        };
        out.merged()?;
        Ok(out)
    }
}

/// Reads the `adapter_kind` tag of an adapter checkpoint.
pub fn adapter_kind(ck: &Checkpoint) -> Result<&'static str, AdapterError> {
    let k = ck.scalar("adapter_kind")?;
    Ok(if k == KIND_LOWRANK {
        "lowrank_skip"
    } else if k == KIND_MLP {
        "mlp_skip"
    } else if k == KIND_LORA_SAE {
        "lora_sae"
    } else if k == KIND_LORA_LM {
        "lora_lm"
    } else {
        return Err(AdapterError::Invalid(format!("unknown adapter kind {k}")));
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_set;
    use crate::lm::{forward_clean, lm_forward, LmConfig, SpliceMode, TokenBatch};
    use crate::sae::{forward_graph, sae_forward, SaeArch};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn lowrank_identity_double_and_oracle() {
        let x = Matrix::randn(5, 8, 1.0, &mut rng(1));
        let fresh = LowRankSkip::new(8, 2, 3).unwrap();
        assert_eq!(lowrank_forward(&x, &fresh).unwrap(), x);

        let id = LowRankSkip {
            u: Matrix::identity(8),
            v: Matrix::identity(8),
        };
        assert_eq!(lowrank_forward(&x, &id).unwrap(), x.scale(2.0));

        let mut r = rng(2);
        let a = LowRankSkip {
            u: Matrix::randn(8, 2, 1.0, &mut r),
            v: Matrix::randn(2, 8, 1.0, &mut r),
        };
        let dense = Matrix::identity(8).add(&a.u.matmul(&a.v, false));
        let y = lowrank_forward(&x, &a).unwrap();
        for row in 0..5 {
            for i in 0..8 {
                let oracle: f64 = (0..8).map(|j| dense.get(i, j) * x.get(row, j)).sum();
                assert!((y.get(row, i) - oracle).abs() < 1e-12);
            }
        }
        assert!(LowRankSkip::new(8, 8, 0).is_err());
    }

    #[test]
    fn mlp_skip_identity_bias_and_oracle() {
        let x = Matrix::randn(4, 6, 1.0, &mut rng(4));
        let fresh = MlpSkip::new(6, 3, 5).unwrap();
        assert_eq!(mlp_skip_forward(&x, &fresh).unwrap(), x);

        let mut r = rng(6);
        let b2 = Matrix::randn(1, 6, 1.0, &mut r);
        let dead = MlpSkip {
            w1: Matrix::zeros(3, 6),
            b1: Matrix::filled(1, 3, -1.0),
            w2: Matrix::randn(6, 3, 1.0, &mut r),
            b2: b2.clone(),
        };
        assert_eq!(mlp_skip_forward(&x, &dead).unwrap(), x.add_row(&b2));

        let a = MlpSkip {
            w1: Matrix::randn(3, 6, 1.0, &mut r),
            b1: Matrix::randn(1, 3, 1.0, &mut r),
            w2: Matrix::randn(6, 3, 1.0, &mut r),
            b2,
        };
        let y = mlp_skip_forward(&x, &a).unwrap();
        for row in 0..4 {
            let hid: Vec<f64> = (0..3)
                .map(|k| {
                    let s: f64 = (0..6).map(|j| a.w1.get(k, j) * x.get(row, j)).sum::<f64>() + a.b1.get(0, k);
                    s.max(0.0)
                })
                .collect();
            for i in 0..6 {
                let o = x.get(row, i) + (0..3).map(|k| a.w2.get(i, k) * hid[k]).sum::<f64>() + a.b2.get(0, i);
                assert!((y.get(row, i) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lora_effective_weight_cases() {
        let mut r = rng(7);
        let base = Matrix::randn(5, 4, 1.0, &mut r);
        let w = LoraWrap::new("w", 5, 4, 2, &mut r).unwrap();
        assert_eq!(lora_effective_weight(&base, &w).unwrap(), base);

        // Full rank with B·A = −base: B = −base, A = I.
        let neg = LoraWrap {
            target: "w".into(),
            a: Matrix::identity(4),
            b: base.scale(-1.0),
        };
        assert_eq!(lora_effective_weight(&base, &neg).unwrap().max_abs(), 0.0);

        let w = LoraWrap {
            target: "w".into(),
            a: Matrix::randn(2, 4, 1.0, &mut r),
            b: Matrix::randn(5, 2, 1.0, &mut r),
        };
        let eff = lora_effective_weight(&base, &w).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let o = base.get(i, j) + (0..2).map(|k| w.b.get(i, k) * w.a.get(k, j)).sum::<f64>();
                assert!((eff.get(i, j) - o).abs() < 1e-12);
            }
        }
        assert!(matches!(
            LoraWrap::new("w", 5, 4, 5, &mut r),
            Err(AdapterError::RankTooLarge { rank: 5, max: 4, .. })
        ));
        let too_big = LoraWrap {
            target: "w".into(),
            a: Matrix::zeros(5, 4),
            b: Matrix::zeros(5, 5),
        };
        assert!(lora_effective_weight(&base, &too_big).is_err());
    }

    fn small_sae(seed: u64) -> SaeParams {
        let mut r = rng(seed);
        SaeParams {
            arch: SaeArch::topk(3),
            w_enc: Matrix::randn(12, 6, 0.5, &mut r),
            b_enc: Matrix::randn(1, 12, 0.1, &mut r),
            w_dec: Matrix::randn(6, 12, 0.5, &mut r),
            b_dec: Matrix::randn(1, 6, 0.1, &mut r),
            input_scale: 1.0,
        }
    }

    fn lora_sae_forward(ad: &LoraSae, x: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let vars = ad.bind(&mut g, &mut Binder::new()).unwrap();
        let xv = g.constant(x.clone());
        let f = forward_graph(&mut g, &ad.base, &vars, xv);
        g.value(f.x_hat).clone()
    }

    #[test]
    fn lora_sae_is_identity_at_attach_and_counts_params() {
        let sae = small_sae(8);
        let x = Matrix::randn(7, 6, 1.0, &mut rng(9));
        let ad = attach_lora_to_sae(&sae, 2, 1).unwrap();
        assert_eq!(lora_sae_forward(&ad, &x), sae_forward(&x, &sae).unwrap().2);
        assert_eq!(ad.trainable_count(), 2 * (6 + 12) * 2 + 12 + 6);
        assert_eq!(ad.merged().unwrap(), sae);
    }

    #[test]
    fn lora_forward_matches_effective_weight() {
        let sae = small_sae(10);
        let mut ad = attach_lora_to_sae(&sae, 3, 2).unwrap();
        let mut r = rng(11);
        for w in &mut ad.lora.wraps {
            w.b = Matrix::randn(w.b.rows(), w.b.cols(), 0.3, &mut r);
        }
        let x = Matrix::randn(9, 6, 1.0, &mut r);
        let through_wrap = lora_sae_forward(&ad, &x);
        let through_merged = sae_forward(&x, &ad.merged().unwrap()).unwrap().2;
        assert!(through_wrap.max_abs_diff(&through_merged) < 1e-12);
    }

    fn tiny_lm() -> LmParams {
        let cfg = LmConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            d_ff: 16,
            seq_len_max: 8,
            hook_layer: 1,
            tie_embeddings: false,
        };
        LmParams::init(&cfg, 3).unwrap()
    }

    fn tokens() -> TokenBatch {
        TokenBatch::from_sequences(&[vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9, 12]])
    }

    fn lora_lm_logits(ad: &LoraLm) -> Matrix {
        let mut g = Graph::new();
        let vars = ad.bind(&mut g, &mut Binder::new()).unwrap();
        let (logits, _) = forward_clean(&mut g, &vars, &tokens());
        g.value(logits).clone()
    }

    #[test]
    fn lora_lm_identity_and_scopes() {
        let lm = tiny_lm();
        let clean = lm_forward(&tokens(), &lm, SpliceMode::Clean).unwrap().0;
        for scope in [LoraScope::AllLayers, LoraScope::AfterHook] {
            let ad = attach_lora_to_lm(&lm, 2, scope, false, 4).unwrap();
            assert_eq!(lora_lm_logits(&ad), clean);
        }
        let all = attach_lora_to_lm(&lm, 2, LoraScope::AllLayers, false, 4).unwrap();
        assert_eq!(all.lora.wraps.len(), 3 * 4);
        let after = attach_lora_to_lm(&lm, 2, LoraScope::AfterHook, false, 4).unwrap();
        assert!(after.lora.wraps.iter().all(|w| !w.target.starts_with("layers.0.")));
        assert_eq!(after.lora.wraps.len(), 2 * 4);
        let attn = attach_lora_to_lm(&lm, 2, LoraScope::AllLayers, true, 4).unwrap();
        assert!(attn.lora.wraps.iter().all(|w| w.target.contains(".attn.")));
        assert!(attach_lora_to_lm(&lm, 9, LoraScope::AllLayers, false, 4).is_err());
    }

    #[test]
    fn lora_lm_forward_matches_merged() {
        let lm = tiny_lm();
        let mut ad = attach_lora_to_lm(&lm, 2, LoraScope::AllLayers, false, 5).unwrap();
        let mut r = rng(12);
        for w in &mut ad.lora.wraps {
            w.b = Matrix::randn(w.b.rows(), w.b.cols(), 0.1, &mut r);
        }
        let merged = lm_forward(&tokens(), &ad.merged().unwrap(), SpliceMode::Clean).unwrap().0;
        assert!(lora_lm_logits(&ad).max_abs_diff(&merged) < 1e-12);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut r = rng(13);
        let x = Matrix::randn(5, 8, 1.0, &mut r);
        let target = Matrix::randn(5, 8, 1.0, &mut r);
        let skips = [
            SkipAdapter::LowRank(LowRankSkip {
                u: Matrix::randn(8, 2, 0.5, &mut r),
                v: Matrix::randn(2, 8, 0.5, &mut r),
            }),
            SkipAdapter::Mlp(MlpSkip {
                w1: Matrix::randn(3, 8, 0.5, &mut r),
                b1: Matrix::randn(1, 3, 0.5, &mut r),
                w2: Matrix::randn(8, 3, 0.5, &mut r),
                b2: Matrix::randn(1, 8, 0.5, &mut r),
            }),
        ];
        for s in &skips {
            let errs = check_param_set(s, 1e-5, &|g, b, p| {
                let vars = p.bind(g, b, true);
                let xv = g.constant(x.clone());
                let y = skip_graph(g, &vars, xv);
                let t = g.constant(target.clone());
                g.mean_sq_diff(y, t)
            });
            assert!(errs.values().all(|&e| e < 1e-6), "{errs:?}");
        }

        let sae = small_sae(14);
        let mut ad = attach_lora_to_sae(&sae, 2, 3).unwrap();
        for w in &mut ad.lora.wraps {
            w.b = Matrix::randn(w.b.rows(), w.b.cols(), 0.3, &mut r);
        }
        let xs = Matrix::randn(5, 6, 1.0, &mut r);
        let errs = check_param_set(&ad, 1e-5, &|g, b, p| {
            let vars = p.bind(g, b).unwrap();
            let xv = g.constant(xs.clone());
            let f = forward_graph(g, &p.base, &vars, xv);
            g.mean_sq_diff(f.x_hat, xv)
        });
        assert_eq!(errs.len(), 6);
        assert!(errs.values().all(|&e| e < 1e-6), "{errs:?}");
    }

    #[test]
    fn adapter_checkpoints_round_trip() {
        let skip = SkipAdapter::Mlp(MlpSkip::new(8, 3, 1).unwrap());
        let back = Checkpoint::from_bytes(&skip.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(SkipAdapter::from_checkpoint(&back).unwrap(), skip);
        assert_eq!(adapter_kind(&back).unwrap(), "mlp_skip");

        let low = SkipAdapter::LowRank(LowRankSkip::new(8, 2, 1).unwrap());
        assert_eq!(SkipAdapter::from_checkpoint(&low.to_checkpoint()).unwrap(), low);

        let sae = small_sae(15);
        let ad = attach_lora_to_sae(&sae, 2, 2).unwrap();
        let ck = Checkpoint::from_bytes(&ad.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(ck.scalar("wraps.w_enc").unwrap(), 2.0);
        assert_eq!(LoraSae::from_checkpoint(&ck, &sae).unwrap(), ad);

        let lm = tiny_lm();
        let ad = attach_lora_to_lm(&lm, 2, LoraScope::AfterHook, true, 2).unwrap();
        let ck = Checkpoint::from_bytes(&ad.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(LoraLm::from_checkpoint(&ck, &lm).unwrap(), ad);
    }
}
