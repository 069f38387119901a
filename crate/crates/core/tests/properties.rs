use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saewb_core::adapters::{
    attach_lora_to_lm, attach_lora_to_sae, lora_effective_weight, lowrank_forward, mlp_skip_forward, LoraScope,
    LoraWrap, LowRankSkip, MlpSkip,
};
use saewb_core::autodiff::KlDirection;
use saewb_core::checkpoint::Checkpoint;
use saewb_core::evaluation::{evaluate, EvalConfig, EvalModel};
use saewb_core::lm::{
    hook_activations, kl_per_row, lm_forward, log_softmax_rows, LmConfig, LmParams, SpliceMode, TokenBatch,
};
use saewb_core::sae::{init_sae, sae_forward, FeatureActivity, SaeArch, SaeConfig, SaeParams};
use saewb_core::tensor::Matrix;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lm_config(seed: u64) -> LmConfig {
    LmConfig {
        vocab_size: 20 + (seed % 13) as usize,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        seq_len_max: 6,
        hook_layer: (seed % 2) as usize,
        tie_embeddings: seed % 3 == 0,
    }
}

fn tokens(batch: usize, seq: usize, vocab: usize, seed: u64) -> TokenBatch {
    use rand::Rng;
    let mut r = rng(seed);
    TokenBatch::new(batch, seq, (0..batch * seq).map(|_| r.random_range(0..vocab)).collect())
}

fn sae_for(x: &Matrix, dict: usize, arch: SaeArch, seed: u64) -> SaeParams {
    let cfg = SaeConfig {
        d_model: x.cols(),
        dict_size: dict,
        arch,
        normalize_input: false,
    };
    init_sae(&cfg, x, seed).unwrap()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_normalise_and_kl_is_nonnegative(seed in 0u64..10_000, scale in 0.01f64..20.0) {
        let a = Matrix::randn(5, 11, scale, &mut rng(seed));
        let b = Matrix::randn(5, 11, scale, &mut rng(seed + 1));
        let lp = log_softmax_rows(&a);
        for r in 0..5 {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        for dir in [KlDirection::RefToModel, KlDirection::ModelToRef] {
            prop_assert!(kl_per_row(&a, &b, dir).iter().all(|&k| k >= 0.0));
            prop_assert!(kl_per_row(&a, &a, dir).iter().all(|&k| k.abs() <= 1e-12));
        }
    }

    #[test]
    fn identity_splice_is_bitwise_clean(seed in 0u64..10_000) {
        let cfg = lm_config(seed);
        let lm = LmParams::init(&cfg, seed).unwrap();
        let t = tokens(2, 5, cfg.vocab_size, seed + 3);
        let (clean, hook) = lm_forward(&t, &lm, SpliceMode::Clean).unwrap();
        let (spliced, _) = lm_forward(&t, &lm, SpliceMode::Replace(&hook)).unwrap();
        prop_assert_eq!(bits(&clean), bits(&spliced));
        let (again, _) = lm_forward(&t, &lm, SpliceMode::Clean).unwrap();
        prop_assert_eq!(bits(&clean), bits(&again));
    }

    #[test]
    fn adapters_are_identities_at_init(seed in 0u64..10_000, d in 2usize..12, r in 1usize..6) {
        let r = r.min(d - 1).max(1);
        let x = Matrix::randn(4, d, 1.0, &mut rng(seed));
        let low = LowRankSkip::new(d, r, seed).unwrap();
        prop_assert_eq!(bits(&lowrank_forward(&x, &low).unwrap()), bits(&x));
        let mlp = MlpSkip::new(d, (r + 1).min(d - 1), seed).unwrap();
        prop_assert_eq!(bits(&mlp_skip_forward(&x, &mlp).unwrap()), bits(&x));

        let sae = sae_for(&x, 3 * d, SaeArch::topk(r), seed);
        let lora = attach_lora_to_sae(&sae, r, seed).unwrap();
        let plain = sae_forward(&x, &sae).unwrap().2;
        prop_assert_eq!(bits(&sae_forward(&x, &lora.merged().unwrap()).unwrap().2), bits(&plain));

        let cfg = lm_config(seed);
        let lm = LmParams::init(&cfg, seed).unwrap();
        let t = tokens(1, 4, cfg.vocab_size, seed);
        let scope = if seed % 2 == 0 { LoraScope::AllLayers } else { LoraScope::AfterHook };
        let ad = attach_lora_to_lm(&lm, r, scope, seed % 3 == 0, seed).unwrap();
        let a = lm_forward(&t, &lm, SpliceMode::Clean).unwrap().0;
        let b = lm_forward(&t, &ad.merged().unwrap(), SpliceMode::Clean).unwrap().0;
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn lora_wrap_matches_effective_weight(seed in 0u64..10_000, m in 1usize..9, n in 1usize..9, r in 1usize..5) {
        let r = r.min(m.min(n));
        let mut g = rng(seed);
        let base = Matrix::randn(m, n, 1.0, &mut g);
        let mut wrap = LoraWrap::new("w", m, n, r, &mut g).unwrap();
        wrap.b = Matrix::randn(m, r, 1.0, &mut g);
        let x = Matrix::randn(3, n, 1.0, &mut g);
        let eff = lora_effective_weight(&base, &wrap).unwrap();
        let through_eff = x.matmul(&eff, true);
        let through_wrap = x.matmul(&base, true).add(&x.matmul(&wrap.a, true).matmul(&wrap.b, true));
        prop_assert!(through_eff.max_abs_diff(&through_wrap) <= 1e-12);
    }

    #[test]
    fn sae_checkpoints_round_trip_bitwise(seed in 0u64..10_000, relu in any::<bool>()) {
        let x = Matrix::randn(16, 6, 1.0, &mut rng(seed));
        let arch = if relu { SaeArch::relu(0.1) } else { SaeArch::topk(3) };
        let sae = sae_for(&x, 20, arch, seed);
        let mut act = FeatureActivity::new(20, 77);
        act.tokens_since_fired[(seed % 20) as usize] = seed;
        let ck = Checkpoint::from_bytes(&sae.to_checkpoint(Some(&act)).to_bytes()).unwrap();
        prop_assert_eq!(SaeParams::from_checkpoint(&ck).unwrap(), sae);
        prop_assert_eq!(SaeParams::activity_from_checkpoint(&ck).unwrap(), Some(act));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn evaluation_is_pure_and_gap_is_exact(seed in 0u64..10_000) {
        let cfg = lm_config(seed);
        let lm = LmParams::init(&cfg, seed).unwrap();
        let slice: Vec<usize> = tokens(1, 200, cfg.vocab_size, seed).ids;
        let sample = hook_activations(&tokens(4, 6, cfg.vocab_size, seed + 1), &lm).unwrap();
        let sae = sae_for(&sample, 24, SaeArch::topk(3), seed);
        let ecfg = EvalConfig { tokens: 120, seq: 6, batch_seqs: 4 };
        let model = EvalModel::new(&lm, &sae);
        let a = evaluate(&model, &slice, &ecfg).unwrap();
        let b = evaluate(&model, &slice, &ecfg).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.ce_gap, a.spliced_ce - a.clean_ce);
        prop_assert!(a.kl >= 0.0);
    }
}
