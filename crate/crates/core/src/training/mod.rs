//! Training regimes: MSE on shuffled harvested activations, the spliced
//! KL+MSE loop shared by fine-tuning and end-to-end training, and the LM
//! trainer.

pub mod loops;
pub mod schedule;
pub mod store;

use std::path::PathBuf;

use thiserror::Error;

use crate::adapters::AdapterError;
use crate::autodiff::GraphError;
use crate::checkpoint::CheckpointError;
use crate::corpus::CorpusError;
use crate::evaluation::EvalError;
use crate::lm::LmError;
use crate::sae::SaeError;

pub use loops::{
    finetune_kl_mse, finetune_kl_only, plan_windows, run_spliced, train_e2e, train_lm, train_sae_mse, LmTrainOptions,
    LogRecord, ModelView, Monitor, MseOptions, Objective, SpliceOptions, SpliceTarget, WindowPlan,
};
pub use schedule::{
    adjust_l1_penalty, combined_graph, combined_loss, compute_alpha_kl, lr_at, LrMode, LrSchedule, SparsityController,
    TrainSchedule, ALPHA_EPS, DEFAULT_ADJUSTMENT_RATE,
};
pub use store::{harvest, ActivationStore, HarvestConfig, ShuffledStream, StoreMeta};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite {what} at step {step}; parameters hold the last good values")]
    NonFinite { step: u64, what: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
