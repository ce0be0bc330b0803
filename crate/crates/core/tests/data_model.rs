use icrlab::data::{
    single_trigger_anchor, count_bigram, make_ood_sentence, sample_b4_variant, sample_ood_sentence,
    sample_sentence, validate_sentence, Sentence, TaskConfig, Violation,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_force_bigrams(z: &[usize], a: usize, b: usize) -> usize {
    let mut n = 0;
    for h in 1..z.len() {
        if z[h - 1] == a && z[h] == b {
            n += 1;
        }
    }
    n
}

fn single_trigger_config() -> TaskConfig {
    TaskConfig { triggers: vec![1], outputs: vec![2, 3], ..TaskConfig::default() }
}

#[test]
fn noiseless_sentences_never_contain_tau() {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let s = sample_sentence(&cfg, &mut rng).unwrap();
        assert!(!s.tokens.contains(&cfg.noise_token()));
        assert_eq!(s.label(), s.output);
    }
}

#[test]
fn noise_label_rate_matches_alpha() {
    let cfg = TaskConfig::default().with_noise(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = 100_000;
    let hits = (0..m).filter(|_| sample_sentence(&cfg, &mut rng).unwrap().label_is_noise).count();
    let rate = hits as f64 / m as f64;
    assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
}

#[test]
fn sampled_sentence_structure() {
    let cfg = TaskConfig::default().with_noise(0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = cfg.context_len;
    let fillers = cfg.neutral_tokens();
    for _ in 0..2000 {
        let s = sample_sentence(&cfg, &mut rng).unwrap();
        assert_eq!(s.tokens.len(), h + 1);
        assert_eq!(s.tokens[h - 1], s.trigger);
        assert!(fillers.contains(&s.tokens[h - 2]));
        assert_eq!(count_bigram(&s, s.trigger, s.output), 1);
        assert_eq!(count_bigram(&s, s.trigger, cfg.noise_token()), 1);
        // Everything outside the planted pairs and the query is a filler.
        let special = s.tokens[..h].iter().filter(|t| !fillers.contains(t)).count();
        assert_eq!(special, 5);
    }
}

#[test]
fn handwritten_bigram_count() {
    let s = Sentence { tokens: vec![3, 1, 6, 1, 6, 9, 1, 6], trigger: 1, output: 6, label_is_noise: false };
    assert_eq!(count_bigram(&s, 1, 6), 2);
}

#[test]
fn trigger_followed_by_other_token_is_condition_three() {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = sample_sentence(&cfg, &mut rng).unwrap();
    let pos = s.tokens.iter().position(|&t| t == s.trigger).unwrap();
    s.tokens[pos + 1] = 42;
    let r = validate_sentence(&cfg, &s);
    assert!(r.violations.iter().any(|v| matches!(v, Violation::TriggerFollowedByOther { token: 42, .. })));
}

#[test]
fn noise_without_trigger_is_condition_two() {
    let cfg = TaskConfig::default().with_noise(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = sample_sentence(&cfg, &mut rng).unwrap();
    let fillers = cfg.neutral_tokens();
    let pos = (1..cfg.context_len - 2)
        .find(|&i| fillers.contains(&s.tokens[i]) && fillers.contains(&s.tokens[i - 1]) && fillers.contains(&s.tokens[i + 1]))
        .unwrap();
    s.tokens[pos] = cfg.noise_token();
    let r = validate_sentence(&cfg, &s);
    assert!(r.violations.contains(&Violation::NoiseNotAfterTrigger { position: pos + 1 }));
}

#[test]
fn penultimate_trigger_is_flagged() {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = sample_sentence(&cfg, &mut rng).unwrap();
    let h = cfg.context_len;
    s.tokens[h - 2] = 2;
    s.tokens[h - 1] = 2;
    s.trigger = 2;
    let r = validate_sentence(&cfg, &s);
    assert!(r.violations.contains(&Violation::PenultimateIsTrigger));
}

#[test]
fn ood_substitution_with_fixed_test_output() {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let s = make_ood_sentence(&cfg, 17, &mut rng).unwrap();
        assert_eq!(s.output, 17);
        assert_eq!(s.label(), 17);
        for w in s.tokens.windows(2) {
            if w[0] == s.trigger {
                assert_eq!(w[1], 17);
            }
        }
        assert!(s.tokens.iter().all(|t| !cfg.outputs.contains(t)));
        let mut test_cfg = cfg.clone();
        test_cfg.outputs = vec![17];
        assert!(validate_sentence(&test_cfg, &s).passed());
    }
}

#[test]
fn ood_rejects_training_outputs_and_triggers() {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    assert!(make_ood_sentence(&cfg, 6, &mut rng).is_err());
    assert!(make_ood_sentence(&cfg, 1, &mut rng).is_err());
    assert!(make_ood_sentence(&cfg, 61, &mut rng).is_err());
}

#[test]
fn random_ood_outputs_avoid_training_outputs() {
    let cfg = TaskConfig::default().with_noise(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let s = sample_ood_sentence(&cfg, &mut rng).unwrap();
        assert!(cfg.neutral_tokens().contains(&s.output));
        assert!(s.tokens.iter().all(|t| !cfg.outputs.contains(t)));
    }
}

#[test]
fn single_trigger_variant_shape() {
    let cfg = single_trigger_config();
    let anchor = single_trigger_anchor(&cfg);
    let h = cfg.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..2000 {
        let s = sample_b4_variant(&cfg, &mut rng).unwrap();
        assert_eq!(s.tokens[h - 2], anchor);
        assert_eq!(s.tokens[h - 1], 1);
        assert_eq!(count_bigram(&s, 1, s.output), 1);
        assert!(validate_sentence(&cfg, &s).passed());
    }
}

#[test]
fn single_trigger_variant_rejects_wrong_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    assert!(sample_b4_variant(&TaskConfig::default(), &mut rng).is_err());
}

#[test]
fn single_trigger_start_is_uniform() {
    let cfg = single_trigger_config();
    let h = cfg.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    let cells = h - 3;
    let mut hist = vec![0usize; cells];
    for _ in 0..n {
        let s = sample_b4_variant(&cfg, &mut rng).unwrap();
        let zeta = s.tokens[..h - 1].iter().position(|&t| t == 1).unwrap();
        hist[zeta] += 1;
    }
    let p = 1.0 / cells as f64;
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    // Chi-square over 253 cells: mean 252, sd ≈ 22.4; 5 sd margin.
    let chi2: f64 = hist.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
    assert!(chi2 < (cells - 1) as f64 + 5.0 * (2.0 * (cells - 1) as f64).sqrt(), "chi2 {chi2}");
    // Individual cells stay inside 5-sigma bands.
    assert!(hist.iter().all(|&c| (c as f64 - mean).abs() < 5.0 * sd));
}

#[test]
fn identical_seed_identical_stream() {
    let cfg = TaskConfig::default().with_noise(0.5);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| sample_sentence(&cfg, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(13), draw(13));
    assert_ne!(draw(13), draw(14));
}

#[test]
fn multiple_planted_pairs_histogram() {
    let cfg = TaskConfig { max_qy_bigrams: 3, ..TaskConfig::default() };
    let hist = cfg.qy_count_histogram();
    assert_eq!(hist.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut seen = [0usize; 4];
    for _ in 0..3000 {
        let s = sample_sentence(&cfg, &mut rng).unwrap();
        assert!(validate_sentence(&cfg, &s).passed());
        seen[count_bigram(&s, s.trigger, s.output)] += 1;
    }
    assert_eq!(seen[0], 0);
    for c in 1..=3 {
        assert!((seen[c] as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.05);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generator_output_always_validates(seed in any::<u64>(), alpha in 0.0f64..0.95, h in 6usize..64) {
        let cfg = TaskConfig { context_len: h, ..TaskConfig::default() }.with_noise(alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..32 {
            let s = sample_sentence(&cfg, &mut rng).unwrap();
            let r = validate_sentence(&cfg, &s);
            prop_assert!(r.passed(), "{:?}", r.violations);
            prop_assert!(count_bigram(&s, s.trigger, s.output) >= 1);
            if cfg.is_noisy() {
                prop_assert!(count_bigram(&s, s.trigger, cfg.noise_token()) >= 1);
            }
        }
    }

    #[test]
    fn bigram_count_matches_scan(tokens in proptest::collection::vec(1usize..8, 2..40), a in 1usize..8, b in 1usize..8) {
        let s = Sentence { tokens: tokens.clone(), trigger: a, output: b, label_is_noise: false };
        let context = &tokens[..tokens.len() - 1];
        prop_assert_eq!(count_bigram(&s, a, b), brute_force_bigrams(context, a, b));
    }
}
