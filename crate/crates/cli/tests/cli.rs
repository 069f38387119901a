use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use saewb::commands::{cmd_eval, cmd_run, EvalArgs, EVAL_LOG};
use saewb::config::{ExperimentConfig, Regime, Stage};
use saewb::manifest::RunManifest;
use saewb_core::checkpoint::Checkpoint;
use saewb_core::corpus::{synthetic_text, Corpus};
use saewb_core::evaluation::{evaluate, CurvePoint, EvalModel};
use saewb_core::sae::{SaeArch, SaeParams};
use saewb_core::tensor::Matrix;

const SMALL: &str = "\
seed = 4
corpus.path = corpus.txt
lm.checkpoint = lm.saew
lm.d_model = 16
lm.n_layers = 2
lm.n_heads = 2
lm.d_ff = 32
lm.seq_len_max = 16
lm.hook_layer = 1
lm.train_steps = 30
lm.batch_seqs = 4
seq = 16
sae.dict_size = 64
sae.k = 4
schedule.total_tokens = 8192
schedule.finetune_tokens = 1024
schedule.batch_tokens = 128
schedule.batch_seqs = 4
schedule.log_every = 1
eval.tokens = 512
eval.every_tokens = 2048
";

fn saewb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saewb"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = saewb(dir, args);
    assert!(o.status.success(), "saewb {args:?}: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The small config with `body` keys replacing the defaults above.
fn config_text(body: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let over: Vec<String> = body.lines().map(key).collect();
    let mut text: String = SMALL.lines().filter(|l| !over.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text += body;
    text
}

/// A work dir with a corpus, a trained toy LM and `<name>.cfg` files.
fn workspace(extra: &[(&str, &str)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.txt"), synthetic_text(3, 120_000)).unwrap();
    fs::write(dir.path().join("lm.cfg"), format!("{SMALL}out = lm_run\n")).unwrap();
    for (name, body) in extra {
        fs::write(dir.path().join(format!("{name}.cfg")), config_text(&format!("out = runs/{name}\n{body}"))).unwrap();
    }
    ok(dir.path(), &["--config", "lm.cfg", "train-lm"]);
    dir
}

fn config(dir: &Path, name: &str) -> ExperimentConfig {
    let text = fs::read_to_string(dir.join(format!("{name}.cfg"))).unwrap();
    let mut c = ExperimentConfig::parse(&text).unwrap();
    c.corpus = dir.join(&c.corpus);
    c.lm_checkpoint = dir.join(&c.lm_checkpoint);
    c.out = dir.join(&c.out);
    c
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.cfg"), "corpus.path = nowhere/text.txt\n").unwrap();
    let o = saewb(dir.path(), &["--config", "a.cfg", "train-lm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere/text.txt"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_field_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for (body, needle) in [
        ("sae.k = many\n", "sae.k"),
        ("lm.n_heads = 3\n", "lm"),
        ("bogus.key = 1\n", "bogus.key"),
        ("regime = two_stage\nregime.first = linear_skip\nregime.second = finetune\nregime.rank = 4\n", "regime.first"),
    ] {
        fs::write(dir.path().join("bad.cfg"), body).unwrap();
        let o = saewb(dir.path(), &["--config", "bad.cfg", "run"]);
        assert_eq!(o.status.code(), Some(1), "{body}");
        assert!(stderr(&o).contains(needle), "{body}: {}", stderr(&o));
    }
}

#[test]
fn unknown_preset_lists_the_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = saewb(dir.path(), &["preset", "fig7"]);
    assert_eq!(o.status.code(), Some(1));
    for p in saewb::presets::PRESETS {
        assert!(stderr(&o).contains(p));
    }
    let listed = ok(dir.path(), &["--out", "sets", "preset", "appD"]);
    assert_eq!(listed.lines().count(), 3);
}

#[test]
fn train_lm_is_seeded_refuses_overwrite_and_learns() {
    let dir = workspace(&[]);
    let first = fs::read(dir.path().join("lm.saew")).unwrap();
    let o = saewb(dir.path(), &["--config", "lm.cfg", "train-lm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--overwrite"));
    ok(dir.path(), &["--config", "lm.cfg", "--overwrite", "train-lm"]);
    assert_eq!(fs::read(dir.path().join("lm.saew")).unwrap(), first);
    let m = RunManifest::read(&dir.path().join("lm_run"), "train-lm").unwrap();
    assert_eq!(m.status, "complete");
}

#[test]
fn wider_lm_beats_uniform_on_text() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.txt"), synthetic_text(8, 200_000)).unwrap();
    let cfg = "corpus.path = corpus.txt\nlm.checkpoint = lm.saew\nlm.d_model = 128\nlm.n_layers = 2\nlm.n_heads = 4\n\
               lm.d_ff = 256\nlm.seq_len_max = 64\nlm.hook_layer = 1\nlm.train_steps = 60\nlm.batch_seqs = 8\n\
               lm.lr = 0.003\nseq = 64\neval.tokens = 4096\nout = o\n";
    fs::write(dir.path().join("c.cfg"), cfg).unwrap();
    ok(dir.path(), &["--config", "c.cfg", "train-lm"]);
    let m = RunManifest::read(&dir.path().join("o"), "train-lm").unwrap();
    let ce = m.summary["validation_ce"].as_f64().unwrap();
    assert!(ce < 256f64.ln(), "validation CE {ce}");
}

#[test]
fn regimes_share_token_order_and_stages_chain() {
    let dir = workspace(&[
        ("ft", "regime = mse_then_finetune\n"),
        ("e2e", "regime = e2e\n"),
        ("two", "regime = two_stage\nregime.first = finetune\nregime.second = linear_skip\nregime.rank = 4\n"),
    ]);
    let p = dir.path();
    let ft = cmd_run(&config(p, "ft"), false).unwrap();
    let e2e = cmd_run(&config(p, "e2e"), false).unwrap();
    assert_eq!(ft.stream_hash, e2e.stream_hash);
    assert_eq!(ft.tokens, e2e.tokens);

    let two = cmd_run(&config(p, "two"), false).unwrap();
    // The fine-tune stage changes the SAE, then the adapter trains on top.
    assert_eq!(two.sae, ft.sae);
    let skip = two.skip.expect("skip adapter trained");
    assert!(skip.to_checkpoint().entries().iter().any(|e| e.data.iter().any(|v| *v != 0.0)));
    let fine_tune_steps = 1024 / (16 * 4);
    let log = fs::read_to_string(p.join("runs/two/loss.jsonl")).unwrap();
    let mse_steps = (8192 - 1024) / 128;
    assert_eq!(log.lines().count(), mse_steps + 2 * fine_tune_steps);
    assert!(p.join("runs/two/skip_adapter.saew").exists());
}

#[test]
fn mse_only_with_no_tokens_keeps_the_init() {
    let dir = workspace(&[("z", "regime = mse_only\nschedule.total_tokens = 0\nschedule.finetune_tokens = 0\n")]);
    let out = cmd_run(&config(dir.path(), "z"), false).unwrap();
    let init = SaeParams::from_checkpoint(&Checkpoint::load(&dir.path().join("runs/z/sae_init.saew")).unwrap()).unwrap();
    assert_eq!(out.sae, init);
    let m = RunManifest::read(&dir.path().join("runs/z"), "run").unwrap();
    assert_eq!(m.status, "complete");
    assert_eq!(m.tokens, 0);
}

#[test]
fn resuming_from_the_mse_checkpoint_matches_a_full_run() {
    let dir = workspace(&[("ft", "regime = lora_sae\nregime.rank = 2\n")]);
    let p = dir.path();
    let full = cmd_run(&config(p, "ft"), false).unwrap();
    let mut c = config(p, "ft");
    c.mse_checkpoint = Some(p.join("runs/ft/sae_mse.saew"));
    c.out = p.join("runs/resumed");
    let resumed = cmd_run(&c, false).unwrap();
    assert_eq!(resumed.sae, full.sae);
    assert_eq!(resumed.stream_hash, full.stream_hash);
    assert_eq!(resumed.final_report, full.final_report);
}

#[test]
fn divergence_exits_2_and_keeps_the_last_good_sae() {
    let dir = workspace(&[("nan", "schedule.lr = 1e300\n")]);
    let o = saewb(dir.path(), &["--config", "nan.cfg", "run"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let run = dir.path().join("runs/nan");
    let m = RunManifest::read(&run, "run").unwrap();
    assert_eq!(m.status, "failed");
    assert!(m.partial);
    let last = SaeParams::from_checkpoint(&Checkpoint::load(&run.join("last_good.saew")).unwrap()).unwrap();
    assert!(last.w_enc.is_finite() && last.w_dec.is_finite());
}

fn identity_sae(d: usize) -> SaeParams {
    // [I; -I] encoder with ReLU and [I, -I] decoder reproduce x exactly.
    let mut w_enc = Matrix::zeros(2 * d, d);
    let mut w_dec = Matrix::zeros(d, 2 * d);
    for i in 0..d {
        w_enc.set(i, i, 1.0);
        w_enc.set(d + i, i, -1.0);
        w_dec.set(i, i, 1.0);
        w_dec.set(i, d + i, -1.0);
    }
    SaeParams {
        arch: SaeArch::relu(0.0),
        w_enc,
        b_enc: Matrix::zeros(1, 2 * d),
        w_dec,
        b_dec: Matrix::zeros(1, d),
        input_scale: 1.0,
    }
}

#[test]
fn eval_wraps_the_library_and_flags_stale_checkpoints() {
    let dir = workspace(&[("e", "")]);
    let p = dir.path();
    identity_sae(16).to_checkpoint(None).save(&p.join("id.saew")).unwrap();
    let cfg = config(p, "e");
    let args = EvalArgs {
        sae: p.join("id.saew"),
        ..Default::default()
    };
    let report = cmd_eval(&cfg, &args, false).unwrap();
    assert!(report.ce_gap.abs() < 1e-12, "{report:?}");

    let lm = saewb::commands::load_lm(&p.join("lm.saew"), 1).unwrap();
    let corpus = Corpus::load(&p.join("corpus.txt")).unwrap();
    let sae = identity_sae(16);
    let lib = evaluate(
        &EvalModel::new(&lm, &sae),
        corpus.validation(),
        &saewb_core::evaluation::EvalConfig {
            tokens: cfg.eval_tokens,
            seq: cfg.seq,
            batch_seqs: cfg.eval_batch_seqs,
        },
    )
    .unwrap();
    assert_eq!(lib, report);
    let stdout = ok(p, &["--config", "e.cfg", "--out", "cli_eval", "eval", "--sae", "id.saew"]);
    let printed: saewb_core::evaluation::EvalReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(printed, report);

    let mut bytes = fs::read(p.join("id.saew")).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(p.join("stale.saew"), bytes).unwrap();
    let o = saewb(p, &["--config", "e.cfg", "--out", "x", "eval", "--sae", "stale.saew"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains('7') && stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn compare_emits_aligned_csv_and_one_polyline_per_run() {
    let dir = workspace(&[("a", "regime = mse_then_finetune\n"), ("b", "regime = mse_only\n")]);
    let p = dir.path();
    ok(p, &["--config", "a.cfg", "run"]);
    ok(p, &["--config", "b.cfg", "run"]);
    ok(p, &["--out", "cmp", "compare", "runs/a", "runs/b", "runs/none"]);
    let svg = fs::read_to_string(p.join("cmp/ce_gap.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(!svg.contains("href"));

    let csv = fs::read_to_string(p.join("cmp/comparison.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("label,tokens,ce_gap,kl,mean_l0"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    let mut expected = 0;
    for run in ["a", "b"] {
        let text = fs::read_to_string(p.join("runs").join(run).join(EVAL_LOG)).unwrap();
        for line in text.lines() {
            let pt: CurvePoint = serde_json::from_str(line).unwrap();
            expected += 1;
            let row = rows
                .iter()
                .find(|r| r[0] == run && r[1] == pt.tokens.to_string())
                .unwrap_or_else(|| panic!("{run} at {} missing", pt.tokens));
            let gap: f64 = row[2].parse().unwrap();
            let kl: f64 = row[3].parse().unwrap();
            assert!((gap - pt.report.ce_gap).abs() <= 1e-9);
            assert!((kl - pt.report.kl).abs() <= 1e-9);
        }
    }
    assert_eq!(rows.len(), expected);
}

#[test]
fn stability_flat_band_single_segment_and_shape_errors() {
    let dir = workspace(&[("s", "regime = mse_then_finetune\n")]);
    let p = dir.path();
    ok(p, &["--config", "s.cfg", "run"]);
    let out = ok(p, &["--out", "st", "stability", "--before", "runs/s/sae.saew", "--after", "runs/s/sae.saew"]);
    let reports: serde_json::Value = serde_json::from_str(&out).unwrap();
    for part in ["encoder", "decoder"] {
        for q in ["p25", "p50", "p75"] {
            let v = reports[0][part][q].as_f64().unwrap();
            assert!((v - 1.0).abs() < 1e-12, "{part} {q} = {v}");
        }
    }
    let svg = fs::read_to_string(p.join("st/stability.svg")).unwrap();
    assert_eq!(svg.matches("<polygon").count(), 2);

    identity_sae(16).to_checkpoint(None).save(&p.join("other.saew")).unwrap();
    let o = saewb(p, &["--out", "st2", "stability", "--before", "runs/s/sae.saew", "--after", "other.saew"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("w_enc"), "{}", stderr(&o));
}

#[test]
fn every_preset_parses_and_validates() {
    let base = ExperimentConfig::default();
    for name in saewb::presets::PRESETS {
        let set = saewb::presets::preset(name, &base).unwrap();
        assert!(!set.is_empty());
        for (_, c) in set {
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
    let app_c = saewb::presets::preset("appC", &base).unwrap();
    assert!(app_c.iter().any(|(_, c)| c.regime
        == Regime::TwoStage {
            first: Stage::Finetune,
            second: Stage::LinearSkip { rank: 16 }
        }));
}
