//! The optimizer loops.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{combined_graph, compute_alpha_kl, lr_at, LrMode, LrSchedule, SparsityController};
use super::store::ActivationStore;
use super::TrainError;
use crate::adapters::{skip_graph, LoraLm, LoraSae, SkipAdapter};
use crate::autodiff::{Graph, KlDirection, Var};
use crate::corpus::{random_batch, StreamHash, WindowStream};
use crate::lm::{forward_clean, forward_from_hook, forward_to_hook, log_softmax_rows, LmParams, LmTrainer, TokenBatch};
use crate::optim::{Adam, AdamConfig, Binder};
use crate::params::ParamSet;
use crate::sae::{
    forward_graph, loss_terms_graph, mean_l0, penalty_graph, update_activity, FeatureActivity, SaeArch, SaeParams,
};
use crate::tensor::Matrix;

/// One line of the loss log. Field names are part of the file format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub tokens: u64,
    pub mse: f64,
    pub kl: f64,
    pub alpha_kl: f64,
    pub sparsity: f64,
    pub auxk: f64,
    pub l1_penalty: f64,
    /// Mean L0 of the step's batch.
    pub l0: f64,
    pub lr: f64,
    pub total: f64,
}

/// Current weights, handed to evaluation callbacks.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub sae: &'a SaeParams,
    pub skip: Option<&'a SkipAdapter>,
    pub lm: Option<&'a LmParams>,
}

type EvalHook<'a> = Box<dyn FnMut(u64, ModelView<'_>) -> Result<(), TrainError> + 'a>;

/// Step and token counters that run across phases, the loss log, the hash of
/// consumed corpus tokens and the periodic evaluation hook.
pub struct Monitor<'a> {
    pub log_every: u64,
    pub records: Vec<LogRecord>,
    pub step: u64,
    pub tokens: u64,
    pub hash: StreamHash,
    /// Mean L0 of every step's batch.
    pub l0_trace: Vec<f64>,
    sink: Option<Box<dyn Write + 'a>>,
    eval_every: u64,
    next_eval: u64,
    hook: Option<EvalHook<'a>>,
}

impl<'a> Monitor<'a> {
    pub fn new(log_every: u64) -> Self {
        Self {
            log_every: log_every.max(1),
            records: Vec::new(),
            step: 0,
            tokens: 0,
            hash: StreamHash::default(),
            l0_trace: Vec::new(),
            sink: None,
            eval_every: 0,
            next_eval: 0,
            hook: None,
        }
    }

    /// Also write each record as a JSON line.
    pub fn with_sink(mut self, sink: impl Write + 'a) -> Self {
        self.sink = Some(Box::new(sink));
        self
    }

    /// Call `hook` whenever the token counter passes a multiple of `every`.
    pub fn with_eval(mut self, every: u64, hook: impl FnMut(u64, ModelView<'_>) -> Result<(), TrainError> + 'a) -> Self {
        self.eval_every = every;
        self.next_eval = every;
        self.hook = Some(Box::new(hook));
        self
    }

    fn eval_due(&self) -> bool {
        self.hook.is_some() && self.eval_every > 0 && self.tokens >= self.next_eval
    }

    fn run_eval(&mut self, view: ModelView<'_>) -> Result<(), TrainError> {
        self.evaluate_now(view)
    }

    /// Evaluate now, regardless of the interval. The next periodic
    /// evaluation moves past the current token count.
    pub fn evaluate_now(&mut self, view: ModelView<'_>) -> Result<(), TrainError> {
        while self.eval_every > 0 && self.next_eval <= self.tokens {
            self.next_eval += self.eval_every;
        }
        match self.hook.as_mut() {
            Some(h) => h(self.tokens, view),
            None => Ok(()),
        }
    }

    fn record(&mut self, rec: LogRecord, force: bool) -> Result<(), TrainError> {
        if !force && rec.step % self.log_every != 0 {
            return Ok(());
        }
        if let Some(w) = self.sink.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| TrainError::Invalid(format!("loss log: {e}")))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(w) = self.sink.as_mut() {
            w.flush().map_err(|e| TrainError::Invalid(format!("loss log: {e}")))?;
        }
        Ok(())
    }
}

fn check_finite(step: u64, total: f64, grads: &std::collections::BTreeMap<String, Matrix>) -> Result<(), TrainError> {
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: format!("loss {total}"),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step,
            what: format!("gradient of {name}"),
        });
    }
    Ok(())
}

fn lambda_of(sae: &SaeParams, controller: &Option<SparsityController>) -> f64 {
    match (sae.arch, controller) {
        (SaeArch::Relu { .. }, Some(c)) => c.l1_penalty,
        (arch, _) => arch.lambda(),
    }
}

fn set_lambda(sae: &mut SaeParams, value: f64) {
    if let SaeArch::Relu { lambda, .. } = &mut sae.arch {
        *lambda = value;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseOptions {
    pub tokens: u64,
    pub batch_rows: usize,
    pub lr: f64,
    pub lr_mode: LrMode,
    pub shuffle_capacity: usize,
    pub shuffle_seed: u64,
    pub adam: AdamConfig,
    /// ReLU only; steers λ during this phase.
    pub controller: Option<SparsityController>,
}

/// MSE-phase training over the buffer-shuffled store. Consumes exactly
/// `opts.tokens` rows, cycling the store if it is smaller. On error the SAE
/// holds the last good weights. Returns the final controller state.
pub fn train_sae_mse(
    store: &ActivationStore,
    sae: &mut SaeParams,
    activity: &mut FeatureActivity,
    opts: &MseOptions,
    monitor: &mut Monitor<'_>,
) -> Result<Option<SparsityController>, TrainError> {
    let mut controller = opts.controller;
    if opts.tokens == 0 {
        return Ok(controller);
    }
    if store.d_model() != sae.d_model() {
        return Err(TrainError::Invalid(format!(
            "store rows have width {}, SAE expects {}",
            store.d_model(),
            sae.d_model()
        )));
    }
    let batch_rows = opts.batch_rows.max(1);
    let steps = opts.tokens.div_ceil(batch_rows as u64);
    let sched = LrSchedule {
        initial: opts.lr,
        mode: opts.lr_mode,
        total_steps: steps,
    };
    let mut adam = Adam::new(opts.adam);
    let mut stream = store.shuffled_stream(opts.shuffle_capacity, opts.shuffle_seed).cycled();
    let mut remaining = opts.tokens;
    for local in 0..steps {
        let want = remaining.min(batch_rows as u64) as usize;
        let Some(x) = stream.next_batch(want) else {
            return Err(stream
                .take_error()
                .unwrap_or_else(|| TrainError::Invalid("activation stream ended early".into())));
        };
        if let Some(e) = stream.take_error() {
            return Err(e);
        }
        remaining -= x.rows() as u64;
        let lambda = lambda_of(sae, &controller);
        let lr = lr_at(local, &sched);

        let mut g = Graph::new();
        let mut binder = Binder::new();
        let vars = sae.bind(&mut g, &mut binder, true);
        let xv = g.constant(x);
        let fwd = forward_graph(&mut g, sae, &vars, xv);
        let terms = loss_terms_graph(&mut g, sae, &vars, xv, &fwd, Some(activity));
        let total = match penalty_graph(&mut g, &terms, lambda, sae.arch.aux_coef()) {
            Some(p) => g.add(terms.mse, p),
            None => terms.mse,
        };
        let value = g.value(total).as_scalar();
        let mut grads = g.backward(total)?;
        let grads = binder.collect(&g, &mut grads);
        check_finite(monitor.step, value, &grads)?;
        adam.step(sae, &grads, lr);

        let h = g.value(fwd.h);
        update_activity(h, activity);
        let rows = h.rows() as u64;
        let l0 = mean_l0(h);
        monitor.l0_trace.push(l0);
        if let Some(c) = controller.as_mut() {
            if sae.arch.is_relu() {
                let l = c.update(l0);
                set_lambda(sae, l);
            }
        }
        monitor.step += 1;
        monitor.tokens += rows;
        let rec = LogRecord {
            step: monitor.step,
            tokens: monitor.tokens,
            mse: g.value(terms.mse).as_scalar(),
            kl: 0.0,
            alpha_kl: 0.0,
            sparsity: terms.sparsity.map_or(0.0, |v| g.value(v).as_scalar()),
            auxk: terms.auxk.map_or(0.0, |v| g.value(v).as_scalar()),
            l1_penalty: lambda,
            l0,
            lr,
            total: value,
        };
        monitor.record(rec, local + 1 == steps)?;
        if monitor.eval_due() {
            monitor.run_eval(ModelView {
                sae,
                skip: None,
                lm: None,
            })?;
        }
    }
    monitor.flush()?;
    Ok(controller)
}

/// What the spliced loop trains.
pub enum SpliceTarget<'a> {
    /// Every SAE weight.
    Sae(&'a mut SaeParams),
    /// LoRA factors on the SAE weights plus both biases.
    LoraSae(&'a mut LoraSae),
    /// A skip adapter after a frozen SAE.
    Skip {
        sae: &'a SaeParams,
        adapter: &'a mut SkipAdapter,
    },
    /// LoRA factors inside the LM, with a frozen SAE.
    LoraLm { sae: &'a SaeParams, lm: &'a mut LoraLm },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `(mse + α·kl)·0.5` plus penalties.
    KlMse,
    /// Raw KL plus penalties.
    KlOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpliceOptions {
    /// First streamed window.
    pub start_window: usize,
    pub windows: usize,
    pub seq: usize,
    pub batch_seqs: usize,
    /// Seed of the window order; shared with the harvest.
    pub data_seed: u64,
    pub lr: f64,
    pub lr_mode: LrMode,
    pub adam: AdamConfig,
    pub objective: Objective,
    pub controller: Option<SparsityController>,
    pub direction: KlDirection,
}

/// Whole-window split of a token budget into an MSE part and a final
/// spliced part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub mse_windows: usize,
    pub finetune_windows: usize,
}

impl WindowPlan {
    pub fn total(&self) -> usize {
        self.mse_windows + self.finetune_windows
    }
}

/// Rounds both budgets down to whole windows; the fine-tune part comes last.
pub fn plan_windows(total_tokens: u64, finetune_tokens: u64, seq: usize) -> WindowPlan {
    let total = (total_tokens / seq as u64) as usize;
    let ft = ((finetune_tokens / seq as u64) as usize).min(total);
    WindowPlan {
        mse_windows: total - ft,
        finetune_windows: ft,
    }
}

struct StepValues {
    total: f64,
    mse: f64,
    kl: f64,
    alpha: f64,
    sparsity: f64,
    auxk: f64,
    h: Matrix,
}

/// The spliced training loop behind fine-tuning, end-to-end training,
/// KL-only fine-tuning and adapter training. Batches are whole windows in
/// stream order starting at `opts.start_window`; every consumed token feeds
/// `monitor.hash`. The reference logits come from `lm`, which stays frozen.
/// On error the trained parameters hold their last good values. Returns the
/// final controller state.
pub fn run_spliced(
    train: &[usize],
    lm: &LmParams,
    mut target: SpliceTarget<'_>,
    activity: &mut FeatureActivity,
    opts: &SpliceOptions,
    monitor: &mut Monitor<'_>,
) -> Result<Option<SparsityController>, TrainError> {
    let mut controller = opts.controller;
    if opts.windows == 0 {
        return Ok(controller);
    }
    let stream = WindowStream::new(train, opts.seq, opts.data_seed)?;
    stream.windows_for((opts.start_window + opts.windows) * opts.seq)?;
    let batches = stream.batches(opts.start_window..opts.start_window + opts.windows, opts.batch_seqs);
    let sched = LrSchedule {
        initial: opts.lr,
        mode: opts.lr_mode,
        total_steps: batches.len() as u64,
    };
    let mut adam = Adam::new(opts.adam);
    let trains_sae = matches!(target, SpliceTarget::Sae(_) | SpliceTarget::LoraSae(_));
    for (local, batch) in batches.iter().enumerate() {
        crate::lm::validate_tokens(lm, batch)?;
        let lr = lr_at(local as u64, &sched);
        let sae_now: &SaeParams = match &target {
            SpliceTarget::Sae(s) => s,
            SpliceTarget::LoraSae(l) => &l.base,
            SpliceTarget::Skip { sae, .. } | SpliceTarget::LoraLm { sae, .. } => sae,
        };
        let lambda = lambda_of(sae_now, &controller);
        let (vals, grads) = {
            let mut g = Graph::new();
            let mut binder = Binder::new();
            let vals = spliced_step(&mut g, &mut binder, lm, &target, activity, batch, opts, lambda)?;
            let total = vals.1;
            let mut grads = g.backward(total)?;
            (vals.0, binder.collect(&g, &mut grads))
        };
        check_finite(monitor.step, vals.total, &grads)?;
        let params: &mut dyn ParamSet = match &mut target {
            SpliceTarget::Sae(s) => *s,
            SpliceTarget::LoraSae(l) => *l,
            SpliceTarget::Skip { adapter, .. } => *adapter,
            SpliceTarget::LoraLm { lm, .. } => *lm,
        };
        adam.step(params, &grads, lr);

        if trains_sae {
            update_activity(&vals.h, activity);
        }
        let l0 = mean_l0(&vals.h);
        monitor.l0_trace.push(l0);
        if let Some(c) = controller.as_mut() {
            let sae_mut = match &mut target {
                SpliceTarget::Sae(s) => Some(&mut **s),
                SpliceTarget::LoraSae(l) => Some(&mut l.base),
                _ => None,
            };
            if let Some(s) = sae_mut.filter(|s| s.arch.is_relu()) {
                let l = c.update(l0);
                set_lambda(s, l);
            }
        }
        monitor.hash.update(&batch.ids);
        monitor.step += 1;
        monitor.tokens += batch.tokens() as u64;
        let rec = LogRecord {
            step: monitor.step,
            tokens: monitor.tokens,
            mse: vals.mse,
            kl: vals.kl,
            alpha_kl: vals.alpha,
            sparsity: vals.sparsity,
            auxk: vals.auxk,
            l1_penalty: lambda,
            l0,
            lr,
            total: vals.total,
        };
        monitor.record(rec, local + 1 == batches.len())?;
        if monitor.eval_due() {
            eval_target(monitor, &target)?;
        }
    }
    monitor.flush()?;
    Ok(controller)
}

fn eval_target(monitor: &mut Monitor<'_>, target: &SpliceTarget<'_>) -> Result<(), TrainError> {
    match target {
        SpliceTarget::Sae(s) => monitor.run_eval(ModelView {
            sae: s,
            skip: None,
            lm: None,
        }),
        SpliceTarget::LoraSae(l) => {
            let merged = l.merged()?;
            monitor.run_eval(ModelView {
                sae: &merged,
                skip: None,
                lm: None,
            })
        }
        SpliceTarget::Skip { sae, adapter } => monitor.run_eval(ModelView {
            sae,
            skip: Some(adapter),
            lm: None,
        }),
        SpliceTarget::LoraLm { sae, lm } => {
            let merged = lm.merged()?;
            monitor.run_eval(ModelView {
                sae,
                skip: None,
                lm: Some(&merged),
            })
        }
    }
}

/// Records one spliced step and returns its values and the loss node.
#[allow(clippy::too_many_arguments)]
fn spliced_step(
    g: &mut Graph,
    binder: &mut Binder,
    lm: &LmParams,
    target: &SpliceTarget<'_>,
    activity: &FeatureActivity,
    batch: &TokenBatch,
    opts: &SpliceOptions,
    lambda: f64,
) -> Result<(StepValues, Var), TrainError> {
    let reference = lm.bind(g, &mut Binder::new(), false);
    let (clean, clean_hook) = forward_clean(g, &reference, batch);
    let ref_logp = log_softmax_rows(g.value(clean));

    let (lm_vars, x) = match target {
        SpliceTarget::LoraLm { lm: adapted, .. } => {
            let vars = adapted.bind(g, binder)?;
            let x = forward_to_hook(g, &vars, batch);
            (vars, x)
        }
        _ => (reference, clean_hook),
    };
    let (sae, sae_vars) = match target {
        SpliceTarget::Sae(s) => (&**s, s.bind(g, binder, true)),
        SpliceTarget::LoraSae(l) => (&l.base, l.bind(g, binder)?),
        SpliceTarget::Skip { sae, .. } | SpliceTarget::LoraLm { sae, .. } => (*sae, sae.bind(g, &mut Binder::new(), false)),
    };
    sae.check_width(g.value(x))?;
    let fwd = forward_graph(g, sae, &sae_vars, x);
    let trains_sae = matches!(target, SpliceTarget::Sae(_) | SpliceTarget::LoraSae(_));
    let terms = loss_terms_graph(g, sae, &sae_vars, x, &fwd, trains_sae.then_some(activity));
    let (payload, mse) = match target {
        SpliceTarget::Skip { adapter, .. } => {
            let vars = adapter.bind(g, binder, true);
            let y = skip_graph(g, &vars, fwd.x_hat);
            let mse = g.mean_sq_diff(x, y);
            (y, mse)
        }
        _ => (fwd.x_hat, terms.mse),
    };
    let spliced = forward_from_hook(g, &lm_vars, payload, batch.batch, batch.seq);
    let kl = g.kl_divergence(ref_logp, spliced, opts.direction);

    let penalty = if trains_sae {
        penalty_graph(g, &terms, lambda, sae.arch.aux_coef())
    } else {
        None
    };
    let lora_lm = matches!(target, SpliceTarget::LoraLm { .. });
    let (core, alpha) = match (opts.objective, lora_lm) {
        (_, true) | (Objective::KlOnly, _) => {
            let a = compute_alpha_kl(g.value(mse).as_scalar(), g.value(kl).as_scalar());
            (kl, a)
        }
        (Objective::KlMse, false) => combined_graph(g, mse, kl),
    };
    let total = match penalty {
        Some(p) => g.add(core, p),
        None => core,
    };
    let scalar = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).as_scalar());
    let vals = StepValues {
        total: g.value(total).as_scalar(),
        mse: g.value(mse).as_scalar(),
        kl: g.value(kl).as_scalar(),
        alpha,
        sparsity: if trains_sae { scalar(g, terms.sparsity) } else { 0.0 },
        auxk: if trains_sae { scalar(g, terms.auxk) } else { 0.0 },
        h: g.value(fwd.h).clone(),
    };
    Ok((vals, total))
}

fn splice_opts(
    sched: &super::TrainSchedule,
    start_window: usize,
    windows: usize,
    seq: usize,
    batch_seqs: usize,
    controller: Option<SparsityController>,
) -> SpliceOptions {
    SpliceOptions {
        start_window,
        windows,
        seq,
        batch_seqs,
        data_seed: sched.seed,
        lr: sched.finetune_lr,
        lr_mode: LrMode::LinearToZero,
        adam: sched.adam,
        objective: Objective::KlMse,
        controller,
        direction: KlDirection::RefToModel,
    }
}

/// KL+MSE fine-tune of a whole SAE on the windows that follow the MSE
/// phase, with the rate decaying linearly to zero.
pub fn finetune_kl_mse(
    train: &[usize],
    lm: &LmParams,
    sae: &mut SaeParams,
    activity: &mut FeatureActivity,
    sched: &super::TrainSchedule,
    seq: usize,
    batch_seqs: usize,
    controller: Option<SparsityController>,
    monitor: &mut Monitor<'_>,
) -> Result<Option<SparsityController>, TrainError> {
    let plan = plan_windows(sched.total_tokens, sched.finetune_tokens, seq);
    let opts = splice_opts(sched, plan.mse_windows, plan.finetune_windows, seq, batch_seqs, controller);
    run_spliced(train, lm, SpliceTarget::Sae(sae), activity, &opts, monitor)
}

/// As [`finetune_kl_mse`] with the MSE term dropped and KL at its raw scale.
pub fn finetune_kl_only(
    train: &[usize],
    lm: &LmParams,
    sae: &mut SaeParams,
    activity: &mut FeatureActivity,
    sched: &super::TrainSchedule,
    seq: usize,
    batch_seqs: usize,
    controller: Option<SparsityController>,
    monitor: &mut Monitor<'_>,
) -> Result<Option<SparsityController>, TrainError> {
    let plan = plan_windows(sched.total_tokens, sched.finetune_tokens, seq);
    let mut opts = splice_opts(sched, plan.mse_windows, plan.finetune_windows, seq, batch_seqs, controller);
    opts.objective = Objective::KlOnly;
    run_spliced(train, lm, SpliceTarget::Sae(sae), activity, &opts, monitor)
}

/// Spliced KL+MSE training from the first window for the whole budget,
/// under the MSE phase's rate and mode.
pub fn train_e2e(
    train: &[usize],
    lm: &LmParams,
    sae: &mut SaeParams,
    activity: &mut FeatureActivity,
    sched: &super::TrainSchedule,
    seq: usize,
    batch_seqs: usize,
    controller: Option<SparsityController>,
    monitor: &mut Monitor<'_>,
) -> Result<Option<SparsityController>, TrainError> {
    let plan = plan_windows(sched.total_tokens, sched.finetune_tokens, seq);
    let mut opts = splice_opts(sched, 0, plan.total(), seq, batch_seqs, controller);
    opts.lr = sched.lr_initial;
    opts.lr_mode = sched.lr_mode;
    run_spliced(train, lm, SpliceTarget::Sae(sae), activity, &opts, monitor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainOptions {
    pub steps: u64,
    pub batch_seqs: usize,
    pub seq: usize,
    pub lr: f64,
    pub lr_mode: LrMode,
    pub seed: u64,
    pub log_every: u64,
}

/// Next-token training on random windows. Returns `(step, loss)` pairs at
/// the logging interval and at the last step.
pub fn train_lm(train: &[usize], lm: &mut LmParams, opts: &LmTrainOptions) -> Result<Vec<(u64, f64)>, TrainError> {
    if train.len() <= opts.seq {
        return Err(TrainError::Invalid(format!(
            "training slice of {} tokens is shorter than one window of {}",
            train.len(),
            opts.seq
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trainer = LmTrainer::new(Adam::new(AdamConfig::default()));
    let sched = LrSchedule {
        initial: opts.lr,
        mode: opts.lr_mode,
        total_steps: opts.steps,
    };
    let mut log = Vec::new();
    for step in 0..opts.steps {
        let batch = random_batch(train, opts.batch_seqs, opts.seq, &mut rng);
        let before = lm.clone();
        let loss = match trainer.train_step(&batch, lm, lr_at(step, &sched)) {
            Ok(l) => l,
            Err(e) => {
                *lm = before;
                return Err(e.into());
            }
        };
        if !lm.all_finite() {
            *lm = before;
            return Err(TrainError::NonFinite {
                step,
                what: "LM weights".into(),
            });
        }
        if (step + 1) % opts.log_every.max(1) == 0 || step + 1 == opts.steps {
            log.push((step + 1, loss));
        }
    }
    Ok(log)
}
