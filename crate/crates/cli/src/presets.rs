//! Named experiment sets. Each preset expands a base config into the runs
//! needed for one comparison; all runs share the LM, data and seed.

use std::path::{Path, PathBuf};

use saewb_core::sae::SaeArch;

use crate::commands::guard_outputs;
use crate::config::{ExperimentConfig, Regime, Stage};
use crate::error::CliError;
use crate::manifest::write_atomic;

pub const PRESETS: [&str; 5] = ["fig1", "fig2-sweep", "appB", "appC", "appD"];

/// K values of the sparsity sweep at desk width.
pub const SWEEP_K: [usize; 4] = [8, 16, 32, 64];

fn variant(base: &ExperimentConfig, name: &str, regime: Regime) -> (String, ExperimentConfig) {
    let mut c = base.clone();
    c.regime = regime;
    c.out = base.out.join(name);
    (name.to_string(), c)
}

/// Expands `name` against `base`. Run directories land under `base.out`.
pub fn preset(name: &str, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let v = |n: &str, r: Regime| variant(base, n, r);
    // Adapter sizes for the default d_model of 128, shrunk to stay below smaller widths.
    let d = base.lm.d_model;
    let rank = 16.min(d / 4).max(1);
    let hidden = 64.min(d / 2).max(1);
    let set = match name {
        "fig1" => vec![
            v("mse_only", Regime::MseOnly),
            v("mse_then_finetune", Regime::MseThenFinetune),
            v("e2e", Regime::E2E),
        ],
        "fig2-sweep" => SWEEP_K
            .iter()
            .flat_map(|&k| {
                [("finetune", Regime::MseThenFinetune), ("e2e", Regime::E2E)].map(|(tag, r)| {
                    let (n, mut c) = v(&format!("k{k}_{tag}"), r);
                    c.sae.arch = SaeArch::topk(k);
                    (n, c)
                })
            })
            .collect(),
        "appB" => vec![
            v("kl_mse", Regime::MseThenFinetune),
            v("kl_only", Regime::KlOnlyFinetune),
        ],
        "appC" => vec![
            v("finetune", Regime::MseThenFinetune),
            v("linear_skip", Regime::LinearSkip { rank }),
            v("mlp_skip", Regime::MlpSkip { hidden }),
            v(
                "finetune_then_linear_skip",
                Regime::TwoStage {
                    first: Stage::Finetune,
                    second: Stage::LinearSkip { rank },
                },
            ),
            v(
                "finetune_then_mlp_skip",
                Regime::TwoStage {
                    first: Stage::Finetune,
                    second: Stage::MlpSkip { hidden },
                },
            ),
        ],
        "appD" => vec![
            v("lora_rank2", Regime::LoraSae { rank: 2 }),
            v("lora_rank64", Regime::LoraSae { rank: 64 }),
            v("full_finetune", Regime::MseThenFinetune),
        ],
        _ => {
            return Err(CliError::Validation(format!(
                "unknown preset {name:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    for (n, c) in &set {
        c.validate().map_err(|e| CliError::Validation(format!("preset {name}/{n}: {e}")))?;
    }
    Ok(set)
}

/// Writes one `<run>.cfg` per run into `dir`.
pub fn write_preset(
    name: &str,
    base: &ExperimentConfig,
    dir: &Path,
    overwrite: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let set = preset(name, base)?;
    let paths: Vec<PathBuf> = set.iter().map(|(n, _)| dir.join(format!("{n}.cfg"))).collect();
    guard_outputs(&paths, overwrite)?;
    std::fs::create_dir_all(dir).map_err(|e| crate::error::io_error(dir, e))?;
    for ((_, c), p) in set.iter().zip(&paths) {
        write_atomic(p, c.to_text().as_bytes()).map_err(|e| crate::error::io_error(p, e))?;
    }
    Ok(paths)
}
