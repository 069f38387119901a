//! Experiment configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use saewb_core::autodiff::KlDirection;
use saewb_core::lm::LmConfig;
use saewb_core::optim::AdamConfig;
use saewb_core::sae::{SaeArch, SaeConfig, DEFAULT_AUX_COEF, DEFAULT_DEAD_THRESHOLD};
use saewb_core::training::{LrMode, TrainSchedule};
use saewb_core::adapters::LoraScope;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Field { key: String, msg: String },
}

fn field(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// One step after the MSE phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage {
    Finetune,
    KlOnly,
    LoraSae { rank: usize },
    LinearSkip { rank: usize },
    MlpSkip { hidden: usize },
    LoraLm { rank: usize, scope: LoraScope, attn_only: bool },
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::KlOnly => "kl_only",
            Stage::LoraSae { .. } => "lora_sae",
            Stage::LinearSkip { .. } => "linear_skip",
            Stage::MlpSkip { .. } => "mlp_skip",
            Stage::LoraLm { .. } => "lora_lm",
        }
    }

    /// Stages after which the SAE is frozen and nothing may follow.
    pub fn is_terminal(&self) -> bool {
        matches!(self, Stage::LinearSkip { .. } | Stage::MlpSkip { .. } | Stage::LoraLm { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    MseOnly,
    MseThenFinetune,
    E2E,
    KlOnlyFinetune,
    LoraLm { rank: usize, scope: LoraScope, attn_only: bool },
    LoraSae { rank: usize },
    LinearSkip { rank: usize },
    MlpSkip { hidden: usize },
    TwoStage { first: Stage, second: Stage },
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::MseOnly => "mse_only",
            Regime::MseThenFinetune => "mse_then_finetune",
            Regime::E2E => "e2e",
            Regime::KlOnlyFinetune => "kl_only_finetune",
            Regime::LoraLm { .. } => "lora_lm",
            Regime::LoraSae { .. } => "lora_sae",
            Regime::LinearSkip { .. } => "linear_skip",
            Regime::MlpSkip { .. } => "mlp_skip",
            Regime::TwoStage { .. } => "two_stage",
        }
    }

    /// Stages run on the fine-tune windows after the MSE phase.
    pub fn stages(&self) -> Vec<Stage> {
        match *self {
            Regime::MseOnly | Regime::E2E => vec![],
            Regime::MseThenFinetune => vec![Stage::Finetune],
            Regime::KlOnlyFinetune => vec![Stage::KlOnly],
            Regime::LoraLm { rank, scope, attn_only } => vec![Stage::LoraLm { rank, scope, attn_only }],
            Regime::LoraSae { rank } => vec![Stage::LoraSae { rank }],
            Regime::LinearSkip { rank } => vec![Stage::LinearSkip { rank }],
            Regime::MlpSkip { hidden } => vec![Stage::MlpSkip { hidden }],
            Regime::TwoStage { first, second } => vec![first, second],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerPhase {
    Mse,
    Finetune,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub target_l0: f64,
    pub phase: ControllerPhase,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub lm_checkpoint: PathBuf,
    pub lm: LmConfig,
    pub lm_steps: u64,
    pub lm_batch_seqs: usize,
    pub lm_lr: f64,
    /// Window length for harvest, fine-tuning and evaluation.
    pub seq: usize,
    pub sae: SaeConfig,
    pub dead_threshold: u64,
    /// Optional starting SAE instead of a fresh init.
    pub sae_checkpoint: Option<PathBuf>,
    /// Result of an earlier MSE phase with the same seed and budget; the
    /// run skips its own MSE phase and continues from it.
    pub mse_checkpoint: Option<PathBuf>,
    pub schedule: TrainSchedule,
    /// Sequences per spliced step.
    pub batch_seqs: usize,
    pub shuffle_capacity: usize,
    pub shard_rows: usize,
    /// Existing store to reuse; otherwise the run harvests into its own dir.
    pub harvest_dir: Option<PathBuf>,
    pub controller: Option<ControllerConfig>,
    pub kl_direction: KlDirection,
    pub regime: Regime,
    pub eval_tokens: u64,
    pub eval_every: u64,
    pub eval_batch_seqs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lm = LmConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            seq_len_max: 128,
            hook_layer: 2,
            tie_embeddings: false,
        };
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            corpus: PathBuf::from("corpus.txt"),
            lm_checkpoint: PathBuf::from("lm.saew"),
            lm,
            lm_steps: 3000,
            lm_batch_seqs: 16,
            lm_lr: 1e-3,
            seq: 128,
            sae: SaeConfig {
                d_model: 128,
                dict_size: 1024,
                arch: SaeArch::topk(16),
                normalize_input: false,
            },
            dead_threshold: DEFAULT_DEAD_THRESHOLD,
            sae_checkpoint: None,
            mse_checkpoint: None,
            schedule: TrainSchedule::default(),
            batch_seqs: 8,
            shuffle_capacity: 1 << 16,
            shard_rows: 65_536,
            harvest_dir: None,
            controller: None,
            kl_direction: KlDirection::RefToModel,
            regime: Regime::MseThenFinetune,
            eval_tokens: 32_768,
            eval_every: 500_000,
            eval_batch_seqs: 16,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| field(key, format!("cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(field(key, format!("expected true or false, got {v:?}"))),
    }
}

fn lr_mode_name(m: LrMode) -> &'static str {
    match m {
        LrMode::Constant => "constant",
        LrMode::LinearToZero => "linear_to_zero",
    }
}

fn parse_lr_mode(key: &str, v: &str) -> Result<LrMode, ConfigError> {
    match v {
        "constant" => Ok(LrMode::Constant),
        "linear_to_zero" => Ok(LrMode::LinearToZero),
        _ => Err(field(key, format!("expected constant or linear_to_zero, got {v:?}"))),
    }
}

fn scope_name(s: LoraScope) -> &'static str {
    match s {
        LoraScope::AllLayers => "all",
        LoraScope::AfterHook => "after_hook",
    }
}

/// Splits text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.bytes().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == b'_' || c == b'.') {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("bad key {k:?}"),
            });
        }
        if v.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("{k} has no value"),
            });
        }
        if out.insert(k.to_string(), (line, v.to_string())).is_some() {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("duplicate key {k}"),
            });
        }
    }
    Ok(out)
}

struct Pairs(BTreeMap<String, (usize, String)>);

impl Pairs {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key).map(|(_, v)| v)
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key) {
            *slot = parse(key, &v)?;
        }
        Ok(())
    }

    fn set_bool(&mut self, key: &str, slot: &mut bool) -> Result<(), ConfigError> {
        if let Some(v) = self.take(key) {
            *slot = parse_bool(key, &v)?;
        }
        Ok(())
    }
}

fn parse_stage(key: &str, name: &str, rank: usize, hidden: usize, scope: LoraScope, attn_only: bool) -> Result<Stage, ConfigError> {
    Ok(match name {
        "finetune" => Stage::Finetune,
        "kl_only" => Stage::KlOnly,
        "lora_sae" => Stage::LoraSae { rank },
        "linear_skip" => Stage::LinearSkip { rank },
        "mlp_skip" => Stage::MlpSkip { hidden },
        "lora_lm" => Stage::LoraLm { rank, scope, attn_only },
        _ => return Err(field(key, format!("unknown stage {name:?}"))),
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut p = Pairs(parse_pairs(text)?);
        let mut c = ExperimentConfig::default();
        p.set("seed", &mut c.seed)?;
        if let Some(v) = p.take("out") {
            c.out = PathBuf::from(v);
        }
        if let Some(v) = p.take("corpus.path") {
            c.corpus = PathBuf::from(v);
        }
        if let Some(v) = p.take("lm.checkpoint") {
            c.lm_checkpoint = PathBuf::from(v);
        }
        p.set("lm.vocab_size", &mut c.lm.vocab_size)?;
        p.set("lm.d_model", &mut c.lm.d_model)?;
        p.set("lm.n_layers", &mut c.lm.n_layers)?;
        p.set("lm.n_heads", &mut c.lm.n_heads)?;
        p.set("lm.d_ff", &mut c.lm.d_ff)?;
        p.set("lm.seq_len_max", &mut c.lm.seq_len_max)?;
        p.set("lm.hook_layer", &mut c.lm.hook_layer)?;
        p.set_bool("lm.tie_embeddings", &mut c.lm.tie_embeddings)?;
        p.set("lm.train_steps", &mut c.lm_steps)?;
        p.set("lm.batch_seqs", &mut c.lm_batch_seqs)?;
        p.set("lm.lr", &mut c.lm_lr)?;
        p.set("seq", &mut c.seq)?;

        let arch = p.take("sae.arch").unwrap_or_else(|| "topk".into());
        let mut k = 16usize;
        let mut k_aux: Option<usize> = None;
        let mut aux_coef = DEFAULT_AUX_COEF;
        let mut lambda = 5.0;
        let mut weighted = true;
        p.set("sae.k", &mut k)?;
        if let Some(v) = p.take("sae.k_aux") {
            k_aux = Some(parse("sae.k_aux", &v)?);
        }
        p.set("sae.aux_coef", &mut aux_coef)?;
        p.set("sae.lambda", &mut lambda)?;
        p.set_bool("sae.weighted_l1", &mut weighted)?;
        c.sae.arch = match arch.as_str() {
            "topk" => SaeArch::TopK {
                k,
                k_aux: k_aux.unwrap_or(2 * k),
                aux_coef,
            },
            "relu" => SaeArch::Relu { lambda, weighted },
            other => return Err(field("sae.arch", format!("expected topk or relu, got {other:?}"))),
        };
        p.set("sae.dict_size", &mut c.sae.dict_size)?;
        p.set_bool("sae.normalize_input", &mut c.sae.normalize_input)?;
        p.set("sae.dead_threshold", &mut c.dead_threshold)?;
        c.sae_checkpoint = p.take("sae.checkpoint").map(PathBuf::from);
        c.mse_checkpoint = p.take("sae.mse_checkpoint").map(PathBuf::from);
        c.sae.d_model = c.lm.d_model;

        let s = &mut c.schedule;
        p.set("schedule.total_tokens", &mut s.total_tokens)?;
        p.set("schedule.finetune_tokens", &mut s.finetune_tokens)?;
        p.set("schedule.batch_tokens", &mut s.batch_tokens)?;
        p.set("schedule.lr", &mut s.lr_initial)?;
        if let Some(v) = p.take("schedule.lr_mode") {
            s.lr_mode = parse_lr_mode("schedule.lr_mode", &v)?;
        }
        p.set("schedule.finetune_lr", &mut s.finetune_lr)?;
        p.set("schedule.adam_beta1", &mut s.adam.beta1)?;
        p.set("schedule.adam_beta2", &mut s.adam.beta2)?;
        p.set("schedule.adam_eps", &mut s.adam.eps)?;
        p.set("schedule.log_every", &mut s.log_every)?;
        s.seed = c.seed;
        p.set("schedule.batch_seqs", &mut c.batch_seqs)?;
        p.set("schedule.shuffle_capacity", &mut c.shuffle_capacity)?;
        p.set("harvest.shard_rows", &mut c.shard_rows)?;
        c.harvest_dir = p.take("harvest.dir").map(PathBuf::from);

        if let Some(v) = p.take("controller.target_l0") {
            let mut cc = ControllerConfig {
                target_l0: parse("controller.target_l0", &v)?,
                phase: ControllerPhase::Finetune,
                rate: saewb_core::training::DEFAULT_ADJUSTMENT_RATE,
            };
            if let Some(ph) = p.take("controller.phase") {
                cc.phase = match ph.as_str() {
                    "mse" => ControllerPhase::Mse,
                    "finetune" => ControllerPhase::Finetune,
                    "both" => ControllerPhase::Both,
                    _ => return Err(field("controller.phase", format!("expected mse, finetune or both, got {ph:?}"))),
                };
            }
            p.set("controller.rate", &mut cc.rate)?;
            c.controller = Some(cc);
        }
        if let Some(v) = p.take("kl.direction") {
            c.kl_direction = match v.as_str() {
                "ref_to_model" => KlDirection::RefToModel,
                "model_to_ref" => KlDirection::ModelToRef,
                _ => return Err(field("kl.direction", format!("expected ref_to_model or model_to_ref, got {v:?}"))),
            };
        }

        let mut rank = 2usize;
        let mut hidden = 8usize;
        let mut attn_only = false;
        let mut scope = LoraScope::AllLayers;
        p.set("regime.rank", &mut rank)?;
        p.set("regime.hidden", &mut hidden)?;
        p.set_bool("regime.attn_only", &mut attn_only)?;
        if let Some(v) = p.take("regime.scope") {
            scope = match v.as_str() {
                "all" => LoraScope::AllLayers,
                "after_hook" => LoraScope::AfterHook,
                _ => return Err(field("regime.scope", format!("expected all or after_hook, got {v:?}"))),
            };
        }
        let regime = p.take("regime").unwrap_or_else(|| "mse_then_finetune".into());
        c.regime = match regime.as_str() {
            "mse_only" => Regime::MseOnly,
            "mse_then_finetune" => Regime::MseThenFinetune,
            "e2e" => Regime::E2E,
            "kl_only_finetune" => Regime::KlOnlyFinetune,
            "lora_lm" => Regime::LoraLm { rank, scope, attn_only },
            "lora_sae" => Regime::LoraSae { rank },
            "linear_skip" => Regime::LinearSkip { rank },
            "mlp_skip" => Regime::MlpSkip { hidden },
            "two_stage" => {
                let first = p.take("regime.first").ok_or_else(|| field("regime.first", "two_stage needs a first stage"))?;
                let second = p.take("regime.second").ok_or_else(|| field("regime.second", "two_stage needs a second stage"))?;
                Regime::TwoStage {
                    first: parse_stage("regime.first", &first, rank, hidden, scope, attn_only)?,
                    second: parse_stage("regime.second", &second, rank, hidden, scope, attn_only)?,
                }
            }
            other => return Err(field("regime", format!("unknown regime {other:?}"))),
        };
        p.set("eval.tokens", &mut c.eval_tokens)?;
        p.set("eval.every_tokens", &mut c.eval_every)?;
        p.set("eval.batch_seqs", &mut c.eval_batch_seqs)?;

        if let Some((key, (line, _))) = p.0.into_iter().next() {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("unknown key {key}"),
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.lm.validate().map_err(|e| field("lm", e.to_string()))?;
        self.sae.validate().map_err(|e| field("sae", e.to_string()))?;
        self.schedule.validate().map_err(|e| field("schedule", e))?;
        if self.seq == 0 || self.seq > self.lm.seq_len_max {
            return Err(field("seq", format!("must be in 1..={}, got {}", self.lm.seq_len_max, self.seq)));
        }
        if self.batch_seqs == 0 || self.lm_batch_seqs == 0 || self.eval_batch_seqs == 0 {
            return Err(field("schedule.batch_seqs", "batch sizes must be positive"));
        }
        if self.shard_rows == 0 || self.shuffle_capacity == 0 {
            return Err(field("harvest.shard_rows", "shard size and shuffle capacity must be positive"));
        }
        if let Some(cc) = &self.controller {
            if !self.sae.arch.is_relu() {
                return Err(field("controller.target_l0", "the controller needs sae.arch = relu"));
            }
            if !(cc.target_l0 > 0.0 && cc.rate > 0.0 && cc.rate < 1.0) {
                return Err(field("controller", "target_l0 must be positive and rate in (0, 1)"));
            }
            if !(self.sae.arch.lambda() > 0.0) {
                return Err(field("sae.lambda", "the controller needs a positive starting penalty"));
            }
        }
        if self.mse_checkpoint.is_some() && matches!(self.regime, Regime::E2E | Regime::MseOnly) {
            return Err(field("sae.mse_checkpoint", format!("{} has no stage after the MSE phase", self.regime.name())));
        }
        if let Regime::TwoStage { first, .. } = self.regime {
            if first.is_terminal() {
                return Err(field(
                    "regime.first",
                    format!("{} freezes the SAE and must come last", first.name()),
                ));
            }
        }
        for st in self.regime.stages() {
            match st {
                Stage::LinearSkip { rank } if rank == 0 || rank >= self.lm.d_model => {
                    return Err(field("regime.rank", format!("skip rank must be in 1..{}", self.lm.d_model)))
                }
                Stage::MlpSkip { hidden } if hidden == 0 || hidden >= self.lm.d_model => {
                    return Err(field("regime.hidden", format!("MLP skip hidden size must be in 1..{}", self.lm.d_model)))
                }
                Stage::LoraSae { rank } | Stage::LoraLm { rank, .. } if rank == 0 => {
                    return Err(field("regime.rank", "must be positive"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("corpus.path", self.corpus.display().to_string());
        kv("lm.checkpoint", self.lm_checkpoint.display().to_string());
        kv("lm.vocab_size", self.lm.vocab_size.to_string());
        kv("lm.d_model", self.lm.d_model.to_string());
        kv("lm.n_layers", self.lm.n_layers.to_string());
        kv("lm.n_heads", self.lm.n_heads.to_string());
        kv("lm.d_ff", self.lm.d_ff.to_string());
        kv("lm.seq_len_max", self.lm.seq_len_max.to_string());
        kv("lm.hook_layer", self.lm.hook_layer.to_string());
        kv("lm.tie_embeddings", self.lm.tie_embeddings.to_string());
        kv("lm.train_steps", self.lm_steps.to_string());
        kv("lm.batch_seqs", self.lm_batch_seqs.to_string());
        kv("lm.lr", format!("{:?}", self.lm_lr));
        kv("seq", self.seq.to_string());
        match self.sae.arch {
            SaeArch::TopK { k, k_aux, aux_coef } => {
                kv("sae.arch", "topk".into());
                kv("sae.k", k.to_string());
                kv("sae.k_aux", k_aux.to_string());
                kv("sae.aux_coef", format!("{aux_coef:?}"));
            }
            SaeArch::Relu { lambda, weighted } => {
                kv("sae.arch", "relu".into());
                kv("sae.lambda", format!("{lambda:?}"));
                kv("sae.weighted_l1", weighted.to_string());
            }
        }
        kv("sae.dict_size", self.sae.dict_size.to_string());
        kv("sae.normalize_input", self.sae.normalize_input.to_string());
        kv("sae.dead_threshold", self.dead_threshold.to_string());
        if let Some(p) = &self.sae_checkpoint {
            kv("sae.checkpoint", p.display().to_string());
        }
        if let Some(p) = &self.mse_checkpoint {
            kv("sae.mse_checkpoint", p.display().to_string());
        }
        let sc = &self.schedule;
        kv("schedule.total_tokens", sc.total_tokens.to_string());
        kv("schedule.finetune_tokens", sc.finetune_tokens.to_string());
        kv("schedule.batch_tokens", sc.batch_tokens.to_string());
        kv("schedule.lr", format!("{:?}", sc.lr_initial));
        kv("schedule.lr_mode", lr_mode_name(sc.lr_mode).into());
        kv("schedule.finetune_lr", format!("{:?}", sc.finetune_lr));
        kv("schedule.adam_beta1", format!("{:?}", sc.adam.beta1));
        kv("schedule.adam_beta2", format!("{:?}", sc.adam.beta2));
        kv("schedule.adam_eps", format!("{:?}", sc.adam.eps));
        kv("schedule.log_every", sc.log_every.to_string());
        kv("schedule.batch_seqs", self.batch_seqs.to_string());
        kv("schedule.shuffle_capacity", self.shuffle_capacity.to_string());
        kv("harvest.shard_rows", self.shard_rows.to_string());
        if let Some(p) = &self.harvest_dir {
            kv("harvest.dir", p.display().to_string());
        }
        if let Some(cc) = &self.controller {
            kv("controller.target_l0", format!("{:?}", cc.target_l0));
            let ph = match cc.phase {
                ControllerPhase::Mse => "mse",
                ControllerPhase::Finetune => "finetune",
                ControllerPhase::Both => "both",
            };
            kv("controller.phase", ph.into());
            kv("controller.rate", format!("{:?}", cc.rate));
        }
        let dir = match self.kl_direction {
            KlDirection::RefToModel => "ref_to_model",
            KlDirection::ModelToRef => "model_to_ref",
        };
        kv("kl.direction", dir.into());
        kv("regime", self.regime.name().into());
        let stage_fields = |st: &Stage, kv: &mut dyn FnMut(&str, String)| match *st {
            Stage::LoraSae { rank } | Stage::LinearSkip { rank } => kv("regime.rank", rank.to_string()),
            Stage::MlpSkip { hidden } => kv("regime.hidden", hidden.to_string()),
            Stage::LoraLm { rank, scope, attn_only } => {
                kv("regime.rank", rank.to_string());
                kv("regime.scope", scope_name(scope).into());
                kv("regime.attn_only", attn_only.to_string());
            }
            Stage::Finetune | Stage::KlOnly => {}
        };
        let mut emitted: BTreeMap<String, String> = BTreeMap::new();
        let mut collect = |k: &str, v: String| {
            emitted.insert(k.to_string(), v);
        };
        match self.regime {
            Regime::TwoStage { first, second } => {
                collect("regime.first", first.name().into());
                collect("regime.second", second.name().into());
                stage_fields(&first, &mut collect);
                stage_fields(&second, &mut collect);
            }
            r => {
                if let Some(st) = r.stages().first() {
                    stage_fields(st, &mut collect);
                }
            }
        }
        for (k, v) in emitted {
            kv(&k, v);
        }
        kv("eval.tokens", self.eval_tokens.to_string());
        kv("eval.every_tokens", self.eval_every.to_string());
        kv("eval.batch_seqs", self.eval_batch_seqs.to_string());
        s
    }

    pub fn adam(&self) -> AdamConfig {
        self.schedule.adam
    }

    /// Applies `--seed` and `--out` overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.schedule.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self
    }
}
