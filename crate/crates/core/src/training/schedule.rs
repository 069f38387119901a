//! Learning-rate schedules, the KL balancing factor and the L1 controller.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::optim::AdamConfig;

/// Floor added to the KL term when forming the balancing ratio.
pub const ALPHA_EPS: f64 = 1e-8;
pub const DEFAULT_ADJUSTMENT_RATE: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrMode {
    Constant,
    LinearToZero,
}

/// Learning rate over a fixed number of optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub mode: LrMode,
    pub total_steps: u64,
}

/// `initial` for [`LrMode::Constant`]; `initial·(1 − step/total)` for
/// [`LrMode::LinearToZero`].
pub fn lr_at(step: u64, schedule: &LrSchedule) -> f64 {
    match schedule.mode {
        LrMode::Constant => schedule.initial,
        LrMode::LinearToZero => {
            if schedule.total_steps == 0 {
                return 0.0;
            }
            let frac = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
            schedule.initial * (1.0 - frac)
        }
    }
}

/// Token budget and optimizer settings shared by every regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_tokens: u64,
    pub finetune_tokens: u64,
    /// Activation rows per optimizer step in the MSE phase.
    pub batch_tokens: u64,
    pub lr_initial: f64,
    /// Mode of the MSE (or E2E) phase.
    pub lr_mode: LrMode,
    /// Starting rate of the fine-tune phase, which always decays to zero.
    pub finetune_lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub log_every: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_tokens: 5_000_000,
            finetune_tokens: 250_000,
            batch_tokens: 4096,
            lr_initial: 5e-4,
            lr_mode: LrMode::Constant,
            finetune_lr: 5e-4,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 10,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.finetune_tokens > self.total_tokens {
            return Err(format!(
                "finetune_tokens ({}) exceeds total_tokens ({})",
                self.finetune_tokens, self.total_tokens
            ));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            return Err(format!("finetune_lr must be positive, got {}", self.finetune_lr));
        }
        if self.batch_tokens == 0 {
            return Err("batch_tokens must be positive".into());
        }
        if self.log_every == 0 {
            return Err("log_every must be positive".into());
        }
        Ok(())
    }

    pub fn mse_tokens(&self) -> u64 {
        self.total_tokens - self.finetune_tokens
    }
}

/// `mse / (kl + 1e-8)`, a plain number: it never carries a gradient.
pub fn compute_alpha_kl(mse: f64, kl: f64) -> f64 {
    mse / (kl + ALPHA_EPS)
}

/// `(mse + α·kl)·0.5`.
pub fn combined_loss(mse: f64, kl: f64, alpha: f64) -> f64 {
    (mse + alpha * kl) * 0.5
}

/// Records the balanced reconstruction bracket on a graph. Returns the loss
/// and the α used, which enters the graph only as a constant factor.
pub fn combined_graph(g: &mut Graph, mse: Var, kl: Var) -> (Var, f64) {
    let alpha = compute_alpha_kl(g.value(mse).as_scalar(), g.value(kl).as_scalar());
    let scaled = g.scale(kl, alpha);
    let sum = g.add(mse, scaled);
    (g.scale(sum, 0.5), alpha)
}

/// One controller step: shrink the penalty when L0 is below target,
/// otherwise (including equality) grow it.
pub fn adjust_l1_penalty(current_l0: f64, target_l0: f64, l1_penalty: f64) -> f64 {
    adjust_with_rate(current_l0, target_l0, l1_penalty, DEFAULT_ADJUSTMENT_RATE)
}

fn adjust_with_rate(current_l0: f64, target_l0: f64, l1_penalty: f64, rate: f64) -> f64 {
    if current_l0 < target_l0 {
        l1_penalty * (1.0 - rate)
    } else {
        l1_penalty * (1.0 + rate)
    }
}

/// Multiplicative L1-penalty controller steering mean L0 toward a target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityController {
    pub target_l0: f64,
    pub l1_penalty: f64,
    pub adjustment_rate: f64,
}

impl SparsityController {
    pub fn new(target_l0: f64, l1_penalty: f64) -> Self {
        assert!(l1_penalty > 0.0, "controller needs a positive starting penalty");
        Self {
            target_l0,
            l1_penalty,
            adjustment_rate: DEFAULT_ADJUSTMENT_RATE,
        }
    }

    pub fn update(&mut self, current_l0: f64) -> f64 {
        self.l1_penalty = adjust_with_rate(current_l0, self.target_l0, self.l1_penalty, self.adjustment_rate);
        self.l1_penalty
    }
}
