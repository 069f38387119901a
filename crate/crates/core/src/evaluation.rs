//! Splice evaluation, gap reduction, weight stability and run comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{skip_graph, AdapterError, SkipAdapter};
use crate::autodiff::{kl_row, log_softmax_into, Graph, KlDirection};
use crate::corpus::{CorpusError, WindowStream};
use crate::lm::{forward_clean, forward_from_hook, forward_to_hook, LmError, LmParams, TokenBatch};
use crate::optim::Binder;
use crate::sae::{forward_graph, SaeError, SaeParams};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation slice is empty or shorter than one sequence")]
    EmptySlice,
    #[error("CE gap before is {0}; reduction is undefined for a non-positive gap")]
    UndefinedReduction(f64),
    #[error("{tensor}: shapes {before:?} and {after:?} differ")]
    ShapeMismatch {
        tensor: String,
        before: (usize, usize),
        after: (usize, usize),
    },
    #[error("comparison needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("run {0} has no logged evaluation points")]
    EmptyRun(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_ce: f64,
    pub spliced_ce: f64,
    pub ce_gap: f64,
    pub kl: f64,
    pub mean_l0: f64,
    pub frac_var_explained: f64,
    pub tokens_evaluated: u64,
}

/// What gets evaluated: the clean reference LM, optionally an adapted LM
/// that the spliced pass runs through, the SAE and an optional skip adapter
/// applied to its output.
#[derive(Clone, Copy, Debug)]
pub struct EvalModel<'a> {
    pub reference: &'a LmParams,
    pub adapted_lm: Option<&'a LmParams>,
    pub sae: &'a SaeParams,
    pub skip: Option<&'a SkipAdapter>,
}

impl<'a> EvalModel<'a> {
    pub fn new(reference: &'a LmParams, sae: &'a SaeParams) -> Self {
        Self {
            reference,
            adapted_lm: None,
            sae,
            skip: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Token budget; rounded down to whole sequences.
    pub tokens: u64,
    pub seq: usize,
    pub batch_seqs: usize,
}

/// Running sums; combining two accumulators is order-independent up to
/// floating-point association.
#[derive(Clone, Debug, Default)]
struct Acc {
    clean_nll: f64,
    spliced_nll: f64,
    ce_count: u64,
    kl: f64,
    nonzero: u64,
    rows: u64,
    sq_err: f64,
    col_sum: Vec<f64>,
    col_sq: Vec<f64>,
}

/// Per-batch quantities of one splice.
pub struct SpliceBatch {
    pub clean_logits: Matrix,
    pub spliced_logits: Matrix,
    pub x: Matrix,
    pub h: Matrix,
    pub payload: Matrix,
}

/// Clean and spliced forwards of one batch.
pub fn splice_batch(model: &EvalModel<'_>, batch: &TokenBatch) -> Result<SpliceBatch, EvalError> {
    crate::lm::validate_tokens(model.reference, batch)?;
    let mut g = Graph::new();
    let reference = model.reference.bind(&mut g, &mut Binder::new(), false);
    let (clean, clean_hook) = forward_clean(&mut g, &reference, batch);
    let (lm_vars, x) = match model.adapted_lm {
        Some(a) => {
            let vars = a.bind(&mut g, &mut Binder::new(), false);
            let x = forward_to_hook(&mut g, &vars, batch);
            (vars, x)
        }
        None => (reference, clean_hook),
    };
    model.sae.check_width(g.value(x))?;
    let sae_vars = model.sae.bind(&mut g, &mut Binder::new(), false);
    let f = forward_graph(&mut g, model.sae, &sae_vars, x);
    let payload = match model.skip {
        Some(s) => {
            let vars = s.bind(&mut g, &mut Binder::new(), false);
            skip_graph(&mut g, &vars, f.x_hat)
        }
        None => f.x_hat,
    };
    let spliced = forward_from_hook(&mut g, &lm_vars, payload, batch.batch, batch.seq);
    Ok(SpliceBatch {
        clean_logits: g.value(clean).clone(),
        spliced_logits: g.value(spliced).clone(),
        x: g.value(x).clone(),
        h: g.value(f.h).clone(),
        payload: g.value(payload).clone(),
    })
}

impl Acc {
    fn add(&mut self, s: &SpliceBatch, batch: &TokenBatch) {
        let targets = batch.next_token_targets();
        let v = s.clean_logits.cols();
        let (mut p, mut q) = (vec![0.0; v], vec![0.0; v]);
        for (r, t) in targets.iter().enumerate() {
            log_softmax_into(s.clean_logits.row(r), &mut p);
            log_softmax_into(s.spliced_logits.row(r), &mut q);
            self.kl += kl_row(&p, &q, KlDirection::RefToModel);
            if let Some(t) = *t {
                self.clean_nll -= p[t];
                self.spliced_nll -= q[t];
                self.ce_count += 1;
            }
        }
        let d = s.x.cols();
        if self.col_sum.is_empty() {
            self.col_sum = vec![0.0; d];
            self.col_sq = vec![0.0; d];
        }
        for r in 0..s.x.rows() {
            for (c, (&xv, &pv)) in s.x.row(r).iter().zip(s.payload.row(r)).enumerate() {
                self.sq_err += (xv - pv) * (xv - pv);
                self.col_sum[c] += xv;
                self.col_sq[c] += xv * xv;
            }
        }
        self.nonzero += s.h.data().iter().filter(|&&v| v != 0.0).count() as u64;
        self.rows += s.x.rows() as u64;
    }

    fn report(&self) -> EvalReport {
        let n = self.rows as f64;
        let total_var: f64 = self
            .col_sum
            .iter()
            .zip(&self.col_sq)
            .map(|(s, sq)| sq - s * s / n)
            .sum();
        let clean_ce = self.clean_nll / self.ce_count.max(1) as f64;
        let spliced_ce = self.spliced_nll / self.ce_count.max(1) as f64;
        EvalReport {
            clean_ce,
            spliced_ce,
            ce_gap: spliced_ce - clean_ce,
            kl: self.kl / n,
            mean_l0: self.nonzero as f64 / n,
            frac_var_explained: if total_var > 0.0 { 1.0 - self.sq_err / total_var } else { 0.0 },
            tokens_evaluated: self.rows,
        }
    }
}

/// Clean vs spliced metrics over the first `cfg.tokens` tokens of `slice`,
/// in natural order. CE skips the last position of each sequence; KL, L0
/// and explained variance use every position.
pub fn evaluate(model: &EvalModel<'_>, slice: &[usize], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let stream = WindowStream::sequential(slice, cfg.seq).map_err(|_| EvalError::EmptySlice)?;
    let windows = (cfg.tokens as usize / cfg.seq).min(stream.windows());
    if windows == 0 {
        return Err(EvalError::EmptySlice);
    }
    let mut acc = Acc::default();
    for batch in stream.batches(0..windows, cfg.batch_seqs.max(1)) {
        let s = splice_batch(model, &batch)?;
        acc.add(&s, &batch);
    }
    Ok(acc.report())
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the mean row of `x`.
pub fn frac_var_explained(x: &Matrix, x_hat: &Matrix) -> f64 {
    let mean = x.mean_rows();
    let mut err = 0.0;
    let mut var = 0.0;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            err += (x.get(r, c) - x_hat.get(r, c)).powi(2);
            var += (x.get(r, c) - mean.get(0, c)).powi(2);
        }
    }
    if var > 0.0 {
        1.0 - err / var
    } else {
        0.0
    }
}

/// `(gap_before − gap_after) / gap_before`.
pub fn gap_reduction(before: &EvalReport, after: &EvalReport) -> Result<f64, EvalError> {
    reduction(before.ce_gap, after.ce_gap)
}

pub fn reduction(gap_before: f64, gap_after: f64) -> Result<f64, EvalError> {
    if !(gap_before > 0.0) {
        return Err(EvalError::UndefinedReduction(gap_before));
    }
    Ok((gap_before - gap_after) / gap_before)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub count: usize,
    /// Vectors with zero norm on either side, left out.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub encoder: Percentiles,
    pub decoder: Percentiles,
}

/// Linear-interpolation percentile (`p` in [0, 1]) of unsorted values.
/// Reorders `values`.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    let pos = p.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_v, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return lo_v;
    }
    let hi_v = rest.iter().copied().fold(f64::INFINITY, f64::min);
    lo_v + frac * (hi_v - lo_v)
}

fn cosines(pairs: impl Iterator<Item = (Vec<f64>, Vec<f64>)>) -> (Vec<f64>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (a, b) in pairs {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        out.push((dot / (na * nb)).clamp(-1.0, 1.0));
    }
    (out, skipped)
}

fn summarize(mut v: Vec<f64>, skipped: usize) -> Percentiles {
    if v.is_empty() {
        return Percentiles {
            p25: f64::NAN,
            p50: f64::NAN,
            p75: f64::NAN,
            count: 0,
            skipped,
        };
    }
    Percentiles {
        p25: percentile(&mut v, 0.25),
        p50: percentile(&mut v, 0.50),
        p75: percentile(&mut v, 0.75),
        count: v.len(),
        skipped,
    }
}

/// Cosine similarity of every encoder row and every decoder column between
/// two checkpoints of the same SAE.
pub fn weight_similarities(before: &SaeParams, after: &SaeParams) -> Result<((Vec<f64>, usize), (Vec<f64>, usize)), EvalError> {
    for (name, a, b) in [("w_enc", &before.w_enc, &after.w_enc), ("w_dec", &before.w_dec, &after.w_dec)] {
        if a.shape() != b.shape() {
            return Err(EvalError::ShapeMismatch {
                tensor: name.into(),
                before: a.shape(),
                after: b.shape(),
            });
        }
    }
    let enc = cosines((0..before.w_enc.rows()).map(|r| (before.w_enc.row(r).to_vec(), after.w_enc.row(r).to_vec())));
    let dec = cosines((0..before.w_dec.cols()).map(|c| (before.w_dec.column(c), after.w_dec.column(c))));
    Ok((enc, dec))
}

pub fn weight_stability(before: &SaeParams, after: &SaeParams) -> Result<StabilityReport, EvalError> {
    let ((enc, es), (dec, ds)) = weight_similarities(before, after)?;
    Ok(StabilityReport {
        encoder: summarize(enc, es),
        decoder: summarize(dec, ds),
    })
}

/// One logged evaluation of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tokens: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunCurve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalRow {
    pub label: String,
    pub tokens: u64,
    pub report: EvalReport,
    /// Differences against the first run.
    pub d_ce_gap: f64,
    pub d_kl: f64,
    pub d_mean_l0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunCurve>,
    pub finals: Vec<FinalRow>,
    pub warnings: Vec<String>,
}

pub const CURVE_HEADER: &str = "label,tokens,ce_gap,kl,mean_l0";

/// Lines up runs for plotting. Each run's final row is taken at the token
/// count of the first run's last point, or at its nearest logged point with
/// a warning when that count was never logged.
pub fn compare_runs(runs: &[RunCurve]) -> Result<Comparison, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::TooFewRuns(runs.len()));
    }
    let mut runs = runs.to_vec();
    for r in &mut runs {
        if r.points.is_empty() {
            return Err(EvalError::EmptyRun(r.label.clone()));
        }
        r.points.sort_by_key(|p| p.tokens);
    }
    let target = runs[0].points.last().expect("non-empty").tokens;
    let mut warnings = Vec::new();
    let mut picked = Vec::new();
    for r in &runs {
        let p = r
            .points
            .iter()
            .min_by_key(|p| (p.tokens.abs_diff(target), std::cmp::Reverse(p.tokens)))
            .expect("non-empty");
        if p.tokens != target {
            warnings.push(format!(
                "{}: no point at {target} tokens, using nearest at {}",
                r.label, p.tokens
            ));
        }
        picked.push((r.label.clone(), p.clone()));
    }
    let base = picked[0].1.report;
    let finals = picked
        .into_iter()
        .map(|(label, p)| FinalRow {
            label,
            tokens: p.tokens,
            d_ce_gap: p.report.ce_gap - base.ce_gap,
            d_kl: p.report.kl - base.kl,
            d_mean_l0: p.report.mean_l0 - base.mean_l0,
            report: p.report,
        })
        .collect();
    Ok(Comparison {
        runs,
        finals,
        warnings,
    })
}

impl Comparison {
    /// One row per logged point of every run.
    pub fn curves_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for r in &self.runs {
            for p in &r.points {
                s += &format!(
                    "{},{},{},{},{}\n",
                    r.label, p.tokens, p.report.ce_gap, p.report.kl, p.report.mean_l0
                );
            }
        }
        s
    }

    /// Raw clean and spliced CE for the same points.
    pub fn curves_ce_csv(&self) -> String {
        let mut s = String::from("label,tokens,clean_ce,spliced_ce\n");
        for r in &self.runs {
            for p in &r.points {
                s += &format!("{},{},{},{}\n", r.label, p.tokens, p.report.clean_ce, p.report.spliced_ce);
            }
        }
        s
    }

    pub fn final_csv(&self) -> String {
        let mut s = String::from(
            "label,tokens,clean_ce,spliced_ce,ce_gap,kl,mean_l0,frac_var_explained,d_ce_gap,d_kl,d_mean_l0\n",
        );
        for f in &self.finals {
            let r = &f.report;
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                f.label,
                f.tokens,
                r.clean_ce,
                r.spliced_ce,
                r.ce_gap,
                r.kl,
                r.mean_l0,
                r.frac_var_explained,
                f.d_ce_gap,
                f.d_kl,
                f.d_mean_l0
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{LowRankSkip, SkipAdapter};
    use crate::lm::LmConfig;
    use crate::sae::{init_sae, SaeArch, SaeConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lm() -> LmParams {
        let cfg = LmConfig {
            vocab_size: 256,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            seq_len_max: 16,
            hook_layer: 1,
            tie_embeddings: false,
        };
        LmParams::init(&cfg, 4).unwrap()
    }

    fn slice() -> Vec<usize> {
        crate::corpus::synthetic_text(2, 2000).bytes().map(usize::from).collect()
    }

    fn cfg() -> EvalConfig {
        EvalConfig {
            tokens: 320,
            seq: 16,
            batch_seqs: 4,
        }
    }

    /// K = dict = d with an exact inverse pair: reconstruction is x itself.
    fn identity_sae(d: usize) -> SaeParams {
        SaeParams {
            arch: SaeArch::topk(d),
            w_enc: Matrix::identity(d),
            b_enc: Matrix::zeros(1, d),
            w_dec: Matrix::identity(d),
            b_dec: Matrix::zeros(1, d),
            input_scale: 1.0,
        }
    }

    #[test]
    fn identity_sae_has_no_gap() {
        let lm = lm();
        let sae = identity_sae(8);
        let r = evaluate(&EvalModel::new(&lm, &sae), &slice(), &cfg()).unwrap();
        assert!(r.ce_gap.abs() < 1e-9 && r.kl.abs() < 1e-9, "{r:?}");
        assert_eq!(r.ce_gap, r.spliced_ce - r.clean_ce);
        assert_eq!(r.tokens_evaluated, 320);
        assert!((r.frac_var_explained - 1.0).abs() < 1e-9);
        // Pure: same inputs, same report.
        assert_eq!(r, evaluate(&EvalModel::new(&lm, &sae), &slice(), &cfg()).unwrap());
    }

    #[test]
    fn random_sae_opens_a_gap_and_skip_identity_changes_nothing() {
        let lm = lm();
        let toks = slice();
        let sample = crate::lm::hook_activations(&TokenBatch::new(1, 16, toks[..16].to_vec()), &lm).unwrap();
        let sae = init_sae(
            &SaeConfig {
                d_model: 8,
                dict_size: 32,
                arch: SaeArch::topk(2),
                normalize_input: false,
            },
            &sample,
            1,
        )
        .unwrap();
        let plain = evaluate(&EvalModel::new(&lm, &sae), &toks, &cfg()).unwrap();
        assert!(plain.ce_gap > 0.0 && plain.kl > 0.0);
        assert!(plain.mean_l0 <= 2.0);
        let skip = SkipAdapter::LowRank(LowRankSkip::new(8, 2, 3).unwrap());
        let with_skip = evaluate(
            &EvalModel {
                skip: Some(&skip),
                ..EvalModel::new(&lm, &sae)
            },
            &toks,
            &cfg(),
        )
        .unwrap();
        assert_eq!(plain, with_skip);
    }

    #[test]
    fn mean_predictor_explains_nothing() {
        let lm = lm();
        let toks = slice();
        let c = cfg();
        let stream = WindowStream::sequential(&toks, 16).unwrap();
        let rows: Vec<Matrix> = stream
            .batches(0..20, 4)
            .iter()
            .map(|b| crate::lm::hook_activations(b, &lm).unwrap())
            .collect();
        let all = Matrix::vstack(&rows.iter().collect::<Vec<_>>());
        let mean_sae = SaeParams {
            arch: SaeArch::relu(0.0),
            w_enc: Matrix::zeros(8, 8),
            b_enc: Matrix::zeros(1, 8),
            w_dec: Matrix::zeros(8, 8),
            b_dec: all.mean_rows(),
            input_scale: 1.0,
        };
        let r = evaluate(&EvalModel::new(&lm, &mean_sae), &toks, &c).unwrap();
        assert!(r.frac_var_explained.abs() < 1e-9, "{}", r.frac_var_explained);
        let pred = Matrix::vstack(&vec![&mean_sae.b_dec; all.rows()]);
        assert!(frac_var_explained(&all, &pred).abs() < 1e-12);
    }

    #[test]
    fn empty_slice_is_an_error() {
        let lm = lm();
        let sae = identity_sae(8);
        assert!(matches!(
            evaluate(&EvalModel::new(&lm, &sae), &[1, 2, 3], &cfg()),
            Err(EvalError::EmptySlice)
        ));
    }

    #[test]
    fn gap_reduction_examples() {
        assert!((reduction(0.10, 0.05).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(reduction(0.1, 0.1).unwrap(), 0.0);
        assert!((reduction(0.08, 0.064).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(reduction(0.0, 0.1), Err(EvalError::UndefinedReduction(_))));
        assert!(reduction(-0.1, 0.1).is_err());
    }

    fn random_sae(seed: u64) -> SaeParams {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        SaeParams {
            arch: SaeArch::topk(2),
            w_enc: Matrix::randn(12, 5, 1.0, &mut r),
            b_enc: Matrix::zeros(1, 12),
            w_dec: Matrix::randn(5, 12, 1.0, &mut r),
            b_dec: Matrix::zeros(1, 5),
            input_scale: 1.0,
        }
    }

    fn sorted_percentile(v: &[f64], p: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let pos = p * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    }

    #[test]
    fn stability_identical_negated_and_oracle() {
        let a = random_sae(1);
        let same = weight_stability(&a, &a).unwrap();
        for p in [same.encoder, same.decoder] {
            assert!((p.p25 - 1.0).abs() < 1e-12 && (p.p50 - 1.0).abs() < 1e-12 && (p.p75 - 1.0).abs() < 1e-12);
        }
        let mut neg = a.clone();
        neg.w_enc = a.w_enc.scale(-1.0);
        neg.w_dec = a.w_dec.scale(-1.0);
        let n = weight_stability(&a, &neg).unwrap();
        assert!((n.encoder.p50 + 1.0).abs() < 1e-12 && (n.decoder.p75 + 1.0).abs() < 1e-12);

        let b = random_sae(2);
        let ((enc, _), (dec, _)) = weight_similarities(&a, &b).unwrap();
        for (i, c) in enc.iter().enumerate() {
            let (x, y) = (a.w_enc.row(i), b.w_enc.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((c - dot / (nx * ny)).abs() < 1e-12);
        }
        let rep = weight_stability(&a, &b).unwrap();
        assert!((rep.decoder.p25 - sorted_percentile(&dec, 0.25)).abs() < 1e-12);
        assert!((rep.encoder.p75 - sorted_percentile(&enc, 0.75)).abs() < 1e-12);

        let mut zero = b.clone();
        zero.w_dec = Matrix::zeros(5, 12);
        assert_eq!(weight_stability(&a, &zero).unwrap().decoder.skipped, 12);
        let mut wrong = b;
        wrong.w_enc = Matrix::zeros(3, 5);
        assert!(matches!(weight_stability(&a, &wrong), Err(EvalError::ShapeMismatch { .. })));
    }

    fn report(gap: f64) -> EvalReport {
        EvalReport {
            clean_ce: 1.0,
            spliced_ce: 1.0 + gap,
            ce_gap: gap,
            kl: gap / 2.0,
            mean_l0: 4.0,
            frac_var_explained: 0.9,
            tokens_evaluated: 10,
        }
    }

    fn run(label: &str, pts: &[(u64, f64)]) -> RunCurve {
        RunCurve {
            label: label.into(),
            points: pts
                .iter()
                .map(|&(tokens, gap)| CurvePoint {
                    tokens,
                    report: report(gap),
                })
                .collect(),
        }
    }

    #[test]
    fn comparison_rows_and_alignment() {
        let a = run("a", &[(100, 0.5), (200, 0.3)]);
        let same = compare_runs(&[a.clone(), a.clone()]).unwrap();
        assert!(same.finals.iter().all(|f| f.d_ce_gap == 0.0 && f.d_kl == 0.0));
        assert!(same.warnings.is_empty());
        assert_eq!(same.curves_csv().lines().count(), 1 + 4);
        assert!(same.curves_csv().starts_with("label,tokens,ce_gap,kl,mean_l0\n"));

        let b = run("b", &[(90, 0.4), (190, 0.2)]);
        let c = compare_runs(&[a.clone(), b]).unwrap();
        assert_eq!(c.warnings.len(), 1);
        assert_eq!(c.finals[1].tokens, 190);
        assert!((c.finals[1].d_ce_gap + 0.1).abs() < 1e-12);
        assert!(matches!(compare_runs(&[a]), Err(EvalError::TooFewRuns(1))));
    }

    proptest! {
        #[test]
        fn percentiles_are_ordered_and_match_sorting(v in proptest::collection::vec(-1.0f64..1.0, 1..60)) {
            let mut w = v.clone();
            let p25 = percentile(&mut w, 0.25);
            let p50 = percentile(&mut w, 0.5);
            let p75 = percentile(&mut w, 0.75);
            prop_assert!(p25 <= p50 && p50 <= p75);
            prop_assert!((p50 - sorted_percentile(&v, 0.5)).abs() < 1e-12);
            prop_assert!((p25 - sorted_percentile(&v, 0.25)).abs() < 1e-12);
        }
    }
}
