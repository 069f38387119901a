//! Subcommand implementations. Each returns its artifacts so tests can use
//! them without going through the binary.

use std::cell::RefCell;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use saewb_core::adapters::{
    adapter_kind, attach_lora_to_lm, attach_lora_to_sae, LoraLm, LowRankSkip, MlpSkip, SkipAdapter,
};
use saewb_core::checkpoint::Checkpoint;
use saewb_core::corpus::{synthetic_text, Corpus, StreamHash, WindowStream};
use saewb_core::evaluation::{
    compare_runs, evaluate, weight_stability, CurvePoint, EvalConfig, EvalModel, EvalReport, RunCurve,
    StabilityReport,
};
use saewb_core::lm::{hook_activations, LmParams};
use saewb_core::sae::{init_sae, FeatureActivity, SaeParams};
use saewb_core::tensor::Matrix;
use saewb_core::training::{
    harvest, plan_windows, run_spliced, train_lm, train_sae_mse, ActivationStore, HarvestConfig, LmTrainOptions,
    LrMode, ModelView, Monitor, MseOptions, Objective, SparsityController, SpliceOptions, SpliceTarget, TrainError,
    WindowPlan,
};

use crate::config::{ControllerPhase, ExperimentConfig, Regime, Stage};
use crate::error::{io_error, CliError};
use crate::manifest::{write_atomic, RunManifest};
use crate::svg;

pub const LOSS_LOG: &str = "loss.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.cfg";

/// Refuses to touch existing outputs unless `overwrite` is set.
pub fn guard_outputs(paths: &[PathBuf], overwrite: bool) -> Result<(), CliError> {
    if overwrite {
        return Ok(());
    }
    let existing: Vec<String> = paths.iter().filter(|p| p.exists()).map(|p| p.display().to_string()).collect();
    if existing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "refusing to overwrite existing outputs (pass --overwrite): {}",
            existing.join(", ")
        )))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("saew.tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| io_error(path, e))
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus, CliError> {
    Ok(Corpus::load(&cfg.corpus)?)
}

/// The LM checkpoint with the configured hook layer.
pub fn load_lm(path: &Path, hook_layer: usize) -> Result<LmParams, CliError> {
    let ck = Checkpoint::load(path)?;
    Ok(LmParams::from_checkpoint(&ck)?.with_hook_layer(hook_layer)?)
}

pub fn write_synthetic_corpus(path: &Path, seed: u64, bytes: usize, overwrite: bool) -> Result<(), CliError> {
    guard_outputs(&[path.to_path_buf()], overwrite)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(path, &synthetic_text(seed, bytes))
}

#[derive(Clone, Debug)]
pub struct LmOutcome {
    pub lm: LmParams,
    pub losses: Vec<(u64, f64)>,
    pub validation_ce: f64,
}

pub fn cmd_train_lm(cfg: &ExperimentConfig, overwrite: bool) -> Result<LmOutcome, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    let log_path = cfg.out.join("lm_loss.jsonl");
    guard_outputs(&[cfg.lm_checkpoint.clone(), log_path.clone()], overwrite)?;
    guard_outputs(&[cfg.out.join(RunManifest::file_name("train-lm"))], overwrite)?;
    create_dir(&cfg.out)?;
    if let Some(parent) = cfg.lm_checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut lm = LmParams::init(&cfg.lm, cfg.seed)?;
    let opts = LmTrainOptions {
        steps: cfg.lm_steps,
        batch_seqs: cfg.lm_batch_seqs,
        seq: cfg.lm.seq_len_max,
        lr: cfg.lm_lr,
        lr_mode: LrMode::LinearToZero,
        seed: cfg.seed,
        log_every: 50,
    };
    let mut manifest = RunManifest::new("train-lm", Some(cfg.to_text()));
    let result = train_lm(corpus.train(), &mut lm, &opts);
    let losses = match result {
        Ok(l) => l,
        Err(e) => {
            let last = cfg.out.join("lm_last_good.saew");
            save(&lm.to_checkpoint(), &last)?;
            manifest.artifact("last_good", &last);
            manifest.finish(started, Some(e.to_string()));
            manifest.write(&cfg.out).map_err(|err| io_error(&cfg.out, err))?;
            return Err(e.into());
        }
    };
    save(&lm.to_checkpoint(), &cfg.lm_checkpoint)?;
    let mut log = String::new();
    for (step, loss) in &losses {
        log += &serde_json::json!({ "step": step, "loss": loss }).to_string();
        log.push('\n');
    }
    write_text(&log_path, &log)?;
    let validation_ce = validation_ce(&lm, corpus.validation(), cfg)?;
    manifest.artifact("lm", &cfg.lm_checkpoint);
    manifest.artifact("loss_log", &log_path);
    manifest.summary.insert("validation_ce".into(), validation_ce.into());
    manifest.tokens = cfg.lm_steps * (cfg.lm_batch_seqs * cfg.lm.seq_len_max) as u64;
    manifest.finish(started, None);
    manifest.write(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    Ok(LmOutcome {
        lm,
        losses,
        validation_ce,
    })
}

/// Mean next-token CE over up to `eval.tokens` validation tokens.
pub fn validation_ce(lm: &LmParams, slice: &[usize], cfg: &ExperimentConfig) -> Result<f64, CliError> {
    let seq = cfg.lm.seq_len_max.min(slice.len().saturating_sub(1)).max(2);
    let stream = WindowStream::sequential(slice, seq)?;
    let windows = ((cfg.eval_tokens as usize) / seq).clamp(1, stream.windows());
    let (mut sum, mut n) = (0.0, 0usize);
    for b in stream.batches(0..windows, cfg.eval_batch_seqs) {
        let (logits, _) = saewb_core::lm::lm_forward(&b, lm, saewb_core::lm::SpliceMode::Clean)?;
        let targets = b.next_token_targets();
        let count = targets.iter().filter(|t| t.is_some()).count();
        if let Some(ce) = saewb_core::lm::cross_entropy(&logits, &targets) {
            sum += ce * count as f64;
            n += count;
        }
    }
    Ok(sum / n.max(1) as f64)
}

fn window_plan(cfg: &ExperimentConfig) -> WindowPlan {
    let plan = plan_windows(cfg.schedule.total_tokens, cfg.schedule.finetune_tokens, cfg.seq);
    match cfg.regime {
        Regime::MseOnly => WindowPlan {
            mse_windows: plan.total(),
            finetune_windows: 0,
        },
        _ => plan,
    }
}

fn harvest_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.harvest_dir.clone().unwrap_or_else(|| cfg.out.join("harvest"))
}

fn harvest_config(cfg: &ExperimentConfig, tokens: u64) -> HarvestConfig {
    HarvestConfig {
        tokens,
        seq: cfg.seq,
        batch_seqs: cfg.batch_seqs.max(8),
        shard_rows: cfg.shard_rows,
        seed: cfg.seed,
    }
}

pub fn cmd_harvest(cfg: &ExperimentConfig, overwrite: bool) -> Result<ActivationStore, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    let lm = load_lm(&cfg.lm_checkpoint, cfg.lm.hook_layer)?;
    let dir = harvest_dir(cfg);
    guard_outputs(&[dir.join(saewb_core::training::store::META_FILE)], overwrite)?;
    let plan = window_plan(cfg);
    if plan.mse_windows == 0 {
        return Err(CliError::Validation("the MSE phase has no tokens to harvest".into()));
    }
    let (store, hash) = harvest(corpus.train(), &lm, &dir, &harvest_config(cfg, (plan.mse_windows * cfg.seq) as u64))?;
    create_dir(&cfg.out)?;
    let mut manifest = RunManifest::new("harvest", Some(cfg.to_text()));
    manifest.artifact("store", &dir);
    manifest.stream_hash = Some(hash.hex());
    manifest.tokens = store.rows();
    manifest.finish(started, None);
    manifest.write(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    Ok(store)
}

/// Open a reused store after checking it matches this config, or harvest
/// a fresh one. Returns the store and the hash of the tokens behind it.
fn obtain_store(
    cfg: &ExperimentConfig,
    train: &[usize],
    lm: &LmParams,
    tokens: u64,
) -> Result<(ActivationStore, StreamHash), CliError> {
    let dir = harvest_dir(cfg);
    if cfg.harvest_dir.is_some() && dir.join(saewb_core::training::store::META_FILE).exists() {
        let store = ActivationStore::open(&dir)?;
        let m = store.meta();
        if m.seq != cfg.seq || m.seed != cfg.seed || m.rows != tokens || m.d_model != lm.config.d_model {
            return Err(CliError::Validation(format!(
                "store at {} was harvested with seq {}, seed {}, {} rows of width {}; this run needs seq {}, seed {}, {} rows of width {}",
                dir.display(),
                m.seq,
                m.seed,
                m.rows,
                m.d_model,
                cfg.seq,
                cfg.seed,
                tokens,
                lm.config.d_model
            )));
        }
        let hash = u64::from_str_radix(&m.stream_hash, 16)
            .map(StreamHash)
            .map_err(|_| CliError::Validation(format!("store at {} has a malformed stream hash", dir.display())))?;
        return Ok((store, hash));
    }
    Ok(harvest(train, lm, &dir, &harvest_config(cfg, tokens))?)
}

/// Rows used to initialize the SAE: hook activations of the first windows
/// of the shared stream, so every regime starts from the same weights.
pub fn init_sample(train: &[usize], lm: &LmParams, seq: usize, seed: u64) -> Result<Matrix, CliError> {
    let stream = WindowStream::new(train, seq, seed)?;
    let n = stream.windows().min(16);
    let parts: Vec<Matrix> = stream
        .batches(0..n, 16)
        .iter()
        .map(|b| hook_activations(b, lm))
        .collect::<Result<_, _>>()?;
    Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
}

pub fn initial_sae(cfg: &ExperimentConfig, train: &[usize], lm: &LmParams) -> Result<SaeParams, CliError> {
    if let Some(p) = &cfg.sae_checkpoint {
        let sae = SaeParams::from_checkpoint(&Checkpoint::load(p)?)?;
        if sae.d_model() != lm.config.d_model {
            return Err(CliError::Validation(format!(
                "{}: SAE width {} does not match LM width {}",
                p.display(),
                sae.d_model(),
                lm.config.d_model
            )));
        }
        return Ok(sae);
    }
    let mut sc = cfg.sae.clone();
    sc.d_model = lm.config.d_model;
    Ok(init_sae(&sc, &init_sample(train, lm, cfg.seq, cfg.seed)?, cfg.seed)?)
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub sae: SaeParams,
    pub skip: Option<SkipAdapter>,
    pub lora_lm: Option<LoraLm>,
    pub curve: Vec<CurvePoint>,
    /// Evaluation right after the MSE phase, when there was one.
    pub after_mse: Option<EvalReport>,
    pub final_report: EvalReport,
    pub stream_hash: StreamHash,
    pub tokens: u64,
    /// Training-batch MSE averaged over the last logged records of the final stage.
    pub final_train_mse: f64,
    pub manifest: RunManifest,
}

fn controller_for(cfg: &ExperimentConfig, sae: &SaeParams, phase: ControllerPhase) -> Option<SparsityController> {
    let cc = cfg.controller.as_ref()?;
    let on = cc.phase == ControllerPhase::Both || cc.phase == phase;
    (on && sae.arch.is_relu()).then(|| SparsityController {
        target_l0: cc.target_l0,
        l1_penalty: sae.arch.lambda(),
        adjustment_rate: cc.rate,
    })
}

fn eval_config(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig {
        tokens: cfg.eval_tokens,
        seq: cfg.seq,
        batch_seqs: cfg.eval_batch_seqs,
    }
}

/// Mean of the logged training MSE over the last tenth of the records.
fn tail_mse(records: &[saewb_core::training::LogRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    let n = (records.len() / 10).max(1);
    records[records.len() - n..].iter().map(|r| r.mse).sum::<f64>() / n as f64
}

struct Stagework<'a> {
    cfg: &'a ExperimentConfig,
    plan: WindowPlan,
}

impl Stagework<'_> {
    fn splice_opts(&self, objective: Objective, controller: Option<SparsityController>) -> SpliceOptions {
        SpliceOptions {
            start_window: self.plan.mse_windows,
            windows: self.plan.finetune_windows,
            seq: self.cfg.seq,
            batch_seqs: self.cfg.batch_seqs,
            data_seed: self.cfg.seed,
            lr: self.cfg.schedule.finetune_lr,
            lr_mode: LrMode::LinearToZero,
            adam: self.cfg.adam(),
            objective,
            controller,
            direction: self.cfg.kl_direction,
        }
    }
}

/// Executes the configured regime in `cfg.out`.
pub fn cmd_run(cfg: &ExperimentConfig, overwrite: bool) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.out;
    let loss_path = out.join(LOSS_LOG);
    let eval_path = out.join(EVAL_LOG);
    guard_outputs(&[loss_path.clone(), eval_path.clone(), out.join(crate::manifest::MANIFEST_FILE)], overwrite)?;
    let corpus = load_corpus(cfg)?;
    let lm = load_lm(&cfg.lm_checkpoint, cfg.lm.hook_layer)?;
    if lm.config.d_model != cfg.lm.d_model {
        return Err(CliError::Validation(format!(
            "lm.d_model is {} but {} has width {}",
            cfg.lm.d_model,
            cfg.lm_checkpoint.display(),
            lm.config.d_model
        )));
    }
    create_dir(out)?;
    write_text(&out.join(CONFIG_SNAPSHOT), &cfg.to_text())?;
    let train = corpus.train();
    let val = corpus.validation();
    let ecfg = eval_config(cfg);
    let mut sae = initial_sae(cfg, train, &lm)?;
    save(&sae.to_checkpoint(None), &out.join("sae_init.saew"))?;
    let mut manifest = RunManifest::new("run", Some(cfg.to_text()));
    manifest.artifact("config", &out.join(CONFIG_SNAPSHOT));
    manifest.artifact("sae_init", &out.join("sae_init.saew"));

    let curve: RefCell<Vec<CurvePoint>> = RefCell::new(Vec::new());
    let eval_file = RefCell::new(BufWriter::new(
        fs::File::create(&eval_path).map_err(|e| io_error(&eval_path, e))?,
    ));
    let loss_file = BufWriter::new(fs::File::create(&loss_path).map_err(|e| io_error(&loss_path, e))?);
    let eval_hook = |tokens: u64, view: ModelView<'_>| -> Result<(), TrainError> {
        if curve.borrow().last().is_some_and(|p| p.tokens == tokens) {
            return Ok(());
        }
        let model = EvalModel {
            reference: &lm,
            adapted_lm: view.lm,
            sae: view.sae,
            skip: view.skip,
        };
        let report = evaluate(&model, val, &ecfg)?;
        let point = CurvePoint { tokens, report };
        let line = serde_json::to_string(&point).expect("curve point serializes");
        writeln!(eval_file.borrow_mut(), "{line}").map_err(|e| TrainError::Invalid(format!("eval log: {e}")))?;
        log::info!("eval at {tokens} tokens: ce_gap {:.5} kl {:.5} l0 {:.2}", report.ce_gap, report.kl, report.mean_l0);
        curve.borrow_mut().push(point);
        Ok(())
    };
    let mut monitor = Monitor::new(cfg.schedule.log_every)
        .with_sink(loss_file)
        .with_eval(cfg.eval_every, eval_hook);
    monitor.evaluate_now(ModelView {
        sae: &sae,
        skip: None,
        lm: None,
    })?;

    let plan = window_plan(cfg);
    let mut activity = FeatureActivity::new(sae.dict_size(), cfg.dead_threshold);
    let mut skip: Option<SkipAdapter> = None;
    let mut lora_lm: Option<LoraLm> = None;
    let mut after_mse = None;
    let mut stage_records_from = 0usize;
    let work = Stagework { cfg, plan };

    let result: Result<(), CliError> = (|| {
        if cfg.regime == Regime::E2E {
            let mut opts = work.splice_opts(Objective::KlMse, controller_for(cfg, &sae, ControllerPhase::Both));
            opts.start_window = 0;
            opts.windows = plan.total();
            opts.lr = cfg.schedule.lr_initial;
            opts.lr_mode = cfg.schedule.lr_mode;
            run_spliced(train, &lm, SpliceTarget::Sae(&mut sae), &mut activity, &opts, &mut monitor)?;
            return Ok(());
        }
        if let (Some(p), true) = (&cfg.mse_checkpoint, plan.mse_windows > 0) {
            let ck = Checkpoint::load(p)?;
            let resumed = SaeParams::from_checkpoint(&ck)?;
            if resumed.d_model() != sae.d_model() || resumed.dict_size() != sae.dict_size() {
                return Err(CliError::Validation(format!(
                    "{}: SAE shape ({}, {}) does not match the config ({}, {})",
                    p.display(),
                    resumed.dict_size(),
                    resumed.d_model(),
                    sae.dict_size(),
                    sae.d_model()
                )));
            }
            sae = resumed;
            activity = SaeParams::activity_from_checkpoint(&ck)?
                .unwrap_or_else(|| FeatureActivity::new(sae.dict_size(), cfg.dead_threshold));
            // Account for the skipped tokens exactly as the MSE phase would.
            let stream = WindowStream::new(train, cfg.seq, cfg.seed)?;
            stream.windows_for(plan.mse_windows * cfg.seq)?;
            for i in 0..plan.mse_windows {
                monitor.hash.update(stream.window(i));
            }
            monitor.tokens += (plan.mse_windows * cfg.seq) as u64;
            monitor.evaluate_now(ModelView {
                sae: &sae,
                skip: None,
                lm: None,
            })?;
            after_mse = curve.borrow().last().map(|p| p.report);
        } else if plan.mse_windows > 0 {
            let tokens = (plan.mse_windows * cfg.seq) as u64;
            let (store, hash) = obtain_store(cfg, train, &lm, tokens)?;
            monitor.hash = hash;
            let opts = MseOptions {
                tokens,
                batch_rows: cfg.schedule.batch_tokens as usize,
                lr: cfg.schedule.lr_initial,
                lr_mode: cfg.schedule.lr_mode,
                shuffle_capacity: cfg.shuffle_capacity,
                shuffle_seed: cfg.seed.wrapping_add(1),
                adam: cfg.adam(),
                controller: controller_for(cfg, &sae, ControllerPhase::Mse),
            };
            train_sae_mse(&store, &mut sae, &mut activity, &opts, &mut monitor)?;
            save(&sae.to_checkpoint(Some(&activity)), &out.join("sae_mse.saew"))?;
            monitor.evaluate_now(ModelView {
                sae: &sae,
                skip: None,
                lm: None,
            })?;
            after_mse = curve.borrow().last().map(|p| p.report);
        }
        for (i, stage) in cfg.regime.stages().into_iter().enumerate() {
            stage_records_from = monitor.records.len();
            let seed = cfg.seed.wrapping_add(100 + i as u64);
            let ctl = controller_for(cfg, &sae, ControllerPhase::Finetune);
            match stage {
                Stage::Finetune | Stage::KlOnly => {
                    let obj = if stage == Stage::Finetune { Objective::KlMse } else { Objective::KlOnly };
                    run_spliced(train, &lm, SpliceTarget::Sae(&mut sae), &mut activity, &work.splice_opts(obj, ctl), &mut monitor)?;
                }
                Stage::LoraSae { rank } => {
                    let mut l = attach_lora_to_sae(&sae, rank, seed)?;
                    run_spliced(train, &lm, SpliceTarget::LoraSae(&mut l), &mut activity, &work.splice_opts(Objective::KlMse, ctl), &mut monitor)?;
                    save(&l.to_checkpoint(), &out.join("lora_sae.saew"))?;
                    sae = l.merged()?;
                }
                Stage::LinearSkip { .. } | Stage::MlpSkip { .. } => {
                    let d = sae.d_model();
                    let mut a = match stage {
                        Stage::LinearSkip { rank } => SkipAdapter::LowRank(LowRankSkip::new(d, rank, seed)?),
                        Stage::MlpSkip { hidden } => SkipAdapter::Mlp(MlpSkip::new(d, hidden, seed)?),
                        _ => unreachable!(),
                    };
                    let frozen = sae.clone();
                    let target = SpliceTarget::Skip {
                        sae: &frozen,
                        adapter: &mut a,
                    };
                    let res = run_spliced(train, &lm, target, &mut activity, &work.splice_opts(Objective::KlMse, None), &mut monitor);
                    skip = Some(a);
                    res?;
                }
                Stage::LoraLm { rank, scope, attn_only } => {
                    let mut l = attach_lora_to_lm(&lm, rank, scope, attn_only, seed)?;
                    let frozen = sae.clone();
                    let target = SpliceTarget::LoraLm { sae: &frozen, lm: &mut l };
                    let res = run_spliced(train, &lm, target, &mut activity, &work.splice_opts(Objective::KlOnly, None), &mut monitor);
                    lora_lm = Some(l);
                    res?;
                }
            }
        }
        Ok(())
    })();

    let final_eval = match &result {
        Ok(()) => {
            let merged = lora_lm.as_ref().map(|l| l.merged()).transpose()?;
            monitor
                .evaluate_now(ModelView {
                    sae: &sae,
                    skip: skip.as_ref(),
                    lm: merged.as_ref(),
                })
                .map_err(CliError::from)
        }
        Err(_) => Ok(()),
    };
    monitor.flush()?;
    let records = std::mem::take(&mut monitor.records);
    let tokens = monitor.tokens;
    let stream_hash = monitor.hash;
    drop(monitor);
    eval_file.borrow_mut().flush().map_err(|e| io_error(&eval_path, e))?;

    manifest.artifact("loss_log", &loss_path);
    manifest.artifact("eval_log", &eval_path);
    manifest.stream_hash = Some(stream_hash.hex());
    manifest.tokens = tokens;
    if plan.mse_windows > 0 && cfg.regime != Regime::E2E && cfg.mse_checkpoint.is_none() {
        manifest.artifact("sae_mse", &out.join("sae_mse.saew"));
    }
    let failure = result.err().or(final_eval.err());
    if let Some(e) = failure {
        let last = out.join("last_good.saew");
        save(&sae.to_checkpoint(Some(&activity)), &last)?;
        manifest.artifact("last_good", &last);
        manifest.finish(started, Some(e.to_string()));
        manifest.write(out).map_err(|err| io_error(out, err))?;
        return Err(e);
    }
    let sae_path = out.join("sae.saew");
    save(&sae.to_checkpoint(Some(&activity)), &sae_path)?;
    manifest.artifact("sae", &sae_path);
    if let Some(a) = &skip {
        let p = out.join("skip_adapter.saew");
        save(&a.to_checkpoint(), &p)?;
        manifest.artifact("skip_adapter", &p);
    }
    if let Some(l) = &lora_lm {
        let p = out.join("lm_adapter.saew");
        save(&l.to_checkpoint(), &p)?;
        manifest.artifact("lm_adapter", &p);
    }
    if cfg.regime.stages().iter().any(|s| matches!(s, Stage::LoraSae { .. })) {
        manifest.artifact("lora_sae", &out.join("lora_sae.saew"));
    }
    let curve = curve.into_inner();
    let final_report = curve.last().expect("final evaluation recorded").report;
    let final_json = serde_json::to_string_pretty(&final_report).expect("report serializes");
    write_text(&out.join("eval_final.json"), &final_json)?;
    manifest.artifact("eval_final", &out.join("eval_final.json"));
    let final_train_mse = tail_mse(&records[stage_records_from.min(records.len())..]);
    manifest.summary.insert("regime".into(), cfg.regime.name().into());
    manifest.summary.insert("final_ce_gap".into(), final_report.ce_gap.into());
    manifest.summary.insert("final_train_mse".into(), final_train_mse.into());
    if let Some(r) = after_mse {
        manifest.summary.insert("after_mse_ce_gap".into(), r.ce_gap.into());
    }
    manifest.finish(started, None);
    manifest.write(out).map_err(|e| io_error(out, e))?;
    Ok(RunOutcome {
        sae,
        skip,
        lora_lm,
        curve,
        after_mse,
        final_report,
        stream_hash,
        tokens,
        final_train_mse,
        manifest,
    })
}

/// Paths for `eval`.
#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub sae: PathBuf,
    pub adapter: Option<PathBuf>,
    pub tokens: Option<u64>,
    /// Evaluate on the training split instead of validation.
    pub train_split: bool,
}

pub fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs, overwrite: bool) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let out = cfg.out.join("eval.json");
    guard_outputs(&[out.clone()], overwrite)?;
    let corpus = load_corpus(cfg)?;
    let lm = load_lm(&cfg.lm_checkpoint, cfg.lm.hook_layer)?;
    let sae = SaeParams::from_checkpoint(&Checkpoint::load(&args.sae)?)?;
    let mut skip = None;
    let mut adapted = None;
    if let Some(p) = &args.adapter {
        let ck = Checkpoint::load(p)?;
        match adapter_kind(&ck)? {
            "lora_lm" => adapted = Some(LoraLm::from_checkpoint(&ck, &lm)?.merged()?),
            "lora_sae" => {
                return Err(CliError::Validation(format!(
                    "{}: LoRA-SAE adapters are evaluated through the merged sae.saew of their run",
                    p.display()
                )))
            }
            _ => skip = Some(SkipAdapter::from_checkpoint(&ck)?),
        }
    }
    let mut ecfg = eval_config(cfg);
    if let Some(t) = args.tokens {
        ecfg.tokens = t;
    }
    let slice = if args.train_split { corpus.train() } else { corpus.validation() };
    let model = EvalModel {
        reference: &lm,
        adapted_lm: adapted.as_ref(),
        sae: &sae,
        skip: skip.as_ref(),
    };
    let report = evaluate(&model, slice, &ecfg)?;
    create_dir(&cfg.out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out, &text)?;
    println!("{text}");
    Ok(report)
}

/// Reads a run's `eval.jsonl`.
pub fn read_curve(dir: &Path) -> Result<RunCurve, CliError> {
    let path = dir.join(EVAL_LOG);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: CurvePoint = serde_json::from_str(line)
            .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        points.push(p);
    }
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunCurve { label, points })
}

#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub curves_csv: String,
    pub final_csv: String,
    pub svg: String,
    pub warnings: Vec<String>,
}

pub fn cmd_compare(dirs: &[PathBuf], out: &Path, overwrite: bool) -> Result<CompareOutcome, CliError> {
    let files = ["comparison.csv", "comparison_ce.csv", "final.csv", "ce_gap.svg"].map(|f| out.join(f));
    guard_outputs(&files, overwrite)?;
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for d in dirs {
        match read_curve(d) {
            Ok(c) if !c.points.is_empty() => runs.push(c),
            Ok(_) => warnings.push(format!("{}: no evaluation points, skipped", d.display())),
            Err(e) => warnings.push(format!("{e}, skipped")),
        }
    }
    let cmp = compare_runs(&runs)?;
    warnings.extend(cmp.warnings.iter().cloned());
    let series: Vec<(String, Vec<(f64, f64)>)> = cmp
        .runs
        .iter()
        .map(|r| (r.label.clone(), r.points.iter().map(|p| (p.tokens as f64, p.report.ce_gap)).collect()))
        .collect();
    let chart = svg::line_chart("CE gap vs training tokens", "tokens", "CE gap (nats/token)", &series);
    create_dir(out)?;
    let curves_csv = cmp.curves_csv();
    let final_csv = cmp.final_csv();
    write_text(&files[0], &curves_csv)?;
    write_text(&files[1], &cmp.curves_ce_csv())?;
    write_text(&files[2], &final_csv)?;
    write_text(&files[3], &chart)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CompareOutcome {
        curves_csv,
        final_csv,
        svg: chart,
        warnings,
    })
}

fn load_sae(path: &Path) -> Result<SaeParams, CliError> {
    Ok(SaeParams::from_checkpoint(&Checkpoint::load(path)?)?)
}

/// Compares every checkpoint after the first against the first.
pub fn cmd_stability(series: &[PathBuf], out: &Path, overwrite: bool) -> Result<Vec<StabilityReport>, CliError> {
    if series.len() < 2 {
        return Err(CliError::Validation("stability needs at least two checkpoints".into()));
    }
    let files = [out.join("stability.json"), out.join("stability.svg")];
    guard_outputs(&files, overwrite)?;
    let base = load_sae(&series[0])?;
    let mut reports = Vec::new();
    for p in &series[1..] {
        let after = load_sae(p)?;
        reports.push(weight_stability(&base, &after)?);
    }
    let band = |f: &dyn Fn(&StabilityReport) -> saewb_core::evaluation::Percentiles| {
        reports.iter().map(|r| { let q = f(r); (q.p25, q.p50, q.p75) }).collect::<Vec<_>>()
    };
    let chart = svg::band_chart(
        "Cosine similarity to the first checkpoint (p25-p75)",
        "checkpoint",
        "cosine similarity",
        &[("encoder rows".into(), band(&|r| r.encoder)), ("decoder columns".into(), band(&|r| r.decoder))],
    );
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_text(&files[0], &json)?;
    write_text(&files[1], &chart)?;
    println!("{json}");
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_refuses_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, "x").unwrap();
        let e = guard_outputs(&[f.clone()], false).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("a.txt"));
        guard_outputs(&[f], true).unwrap();
    }
}
