//! The dense forward pass against an explicit matrix oracle, and the
//! closed-form logits against both.

use approx::assert_abs_diff_eq;
use icrlab::data::{count_bigram, sample_sentence, Sentence, TaskConfig};
use icrlab::embedding::{embed_sequence, embed_tokens, standard_basis};
use icrlab::model::{
    attention_weights, closed_form_logits, forward, AttentionKind, Logits, ModelParams, ScalarPoint, Scalars,
    Scheme, SentenceCounts,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ξ` straight from the definition with dense `X`, `U` and no shortcuts.
fn oracle(params: &ModelParams, tokens: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let x: Array2<f64> = embed_tokens(params.basis(), tokens).unwrap().to_dense();
    let h = x.nrows();
    let x_h = x.row(h - 1).to_owned();
    let scores: Vec<f64> = (0..h).map(|i| x_h.dot(&params.w.dot(&x.row(i)))).collect();
    let weights: Vec<f64> = match params.kind {
        AttentionKind::Linear => scores.clone(),
        AttentionKind::Relu => scores.iter().map(|a| a.max(0.0)).collect(),
        AttentionKind::Softmax => {
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|a| (a - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        }
    };
    let mut phi = Array1::zeros(params.dim());
    for i in 0..h {
        phi = phi + params.v.dot(&x.row(i)) * weights[i];
    }
    let u = params.basis().unembedding(params.out_vocab());
    let xa = u.dot(&phi);
    let xf = u.dot(&params.f.dot(&(&x_h + &phi)));
    (xa, xf)
}

fn random_scalars(scheme: Scheme, n_triggers: usize, rng: &mut ChaCha8Rng) -> Scalars {
    let nl = if scheme.is_noisy() { 1 } else { n_triggers };
    Scalars {
        lambda: (0..nl).map(|_| rng.gen_range(-2.0..12.0)).collect(),
        s: scheme.is_softmax().then(|| rng.gen_range(0.1..20.0)),
        gamma: scheme.is_noisy().then(|| rng.gen_range(-3.0..3.0)),
    }
}

fn config_for(scheme: Scheme, rng: &mut ChaCha8Rng) -> TaskConfig {
    let alpha = if scheme.is_noisy() { rng.gen_range(0.05..0.95) } else { 0.0 };
    TaskConfig { max_qy_bigrams: rng.gen_range(1..=3), ..TaskConfig::default() }.with_noise(alpha)
}

fn max_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn basis_is_orthonormal() {
    let cfg = TaskConfig::default();
    let b = standard_basis(&cfg).unwrap();
    for i in 1..=61 {
        for j in 1..=61 {
            let d = if i == j { 1.0 } else { 0.0 };
            assert_eq!(b.e(i).dot(&b.e(j)), d);
            assert_eq!(b.e_tilde(i).dot(&b.e_tilde(j)), d);
            assert_eq!(b.e(i).dot(&b.e_tilde(j)), 0.0);
        }
    }
    let u = b.unembedding(61);
    for j in 1..=61 {
        let col = u.dot(&b.e(j));
        for k in 0..61 {
            assert_eq!(col[k], if k + 1 == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn basis_needs_room() {
    let cfg = TaskConfig { embed_dim: 121, ..TaskConfig::default() };
    assert!(standard_basis(&cfg).is_err());
}

#[test]
fn embedding_rows() {
    let b = standard_basis(&TaskConfig::default()).unwrap();
    let x = embed_tokens(&b, &[5, 2]).unwrap().to_dense();
    let expected = b.e(2) + b.e_tilde(5);
    assert_eq!(x.row(1).to_owned(), expected);
    assert_eq!(x.row(0).to_owned(), b.e(5));
    assert!(embed_tokens(&b, &[5, 62]).is_err());
    assert!(embed_tokens(&b, &[0, 2]).is_err());
}

#[test]
fn embedding_norms_and_query_dot() {
    let cfg = TaskConfig::default();
    let b = standard_basis(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample_sentence(&cfg, &mut rng).unwrap();
    let x = embed_sequence(&b, &s).unwrap().to_dense();
    assert_eq!(x.nrows(), cfg.context_len);
    assert_eq!(x.row(0).dot(&x.row(0)), 1.0);
    for h in 1..x.nrows() {
        assert_eq!(x.row(h).dot(&x.row(h)), 2.0);
    }
    let last = x.row(x.nrows() - 1);
    for q in 1..=60 {
        assert_eq!(last.dot(&b.e(q)), if q == s.trigger { 1.0 } else { 0.0 });
    }
}

fn single_trigger_sentence() -> (TaskConfig, Sentence) {
    let cfg = TaskConfig { triggers: vec![1], outputs: vec![6, 7], context_len: 12, ..TaskConfig::default() };
    // Three (1, 6) bigrams, then the query.
    let tokens = vec![20, 1, 6, 30, 1, 6, 31, 1, 6, 40, 41, 1, 6];
    (cfg, Sentence { tokens, trigger: 1, output: 6, label_is_noise: false })
}

#[test]
fn attention_scores_mark_trigger_successors() {
    let (cfg, s) = single_trigger_sentence();
    let scalars = Scalars { lambda: vec![2.0], s: None, gamma: None };
    let p = ModelParams::reparam(&cfg, Scheme::NoiselessLinear, AttentionKind::Linear, scalars).unwrap();
    let x = embed_sequence(p.basis(), &s).unwrap();
    let w = attention_weights(&p, &x);
    let ctx = s.context();
    for h in 0..ctx.len() {
        let expected = if h > 0 && ctx[h - 1] == 1 { 2.0 } else { 0.0 };
        assert_eq!(w[h], expected);
    }
    let mut p3 = p.clone();
    p3.scalars.lambda = vec![3.0];
    p3.rebuild();
    let w3 = attention_weights(&p3, &x);
    assert_eq!(w3.iter().filter(|&&v| v == 3.0).count(), 3);
    // ξ_j = λ C_{q,y} 1{j = y} = 6 at y.
    let l = forward(&p, &x);
    for j in 1..=60 {
        assert_eq!(l.at(j), if j == 6 { 6.0 } else { 0.0 });
    }
}

#[test]
fn softmax_weights_closed_form() {
    let (cfg, s) = single_trigger_sentence();
    let h = cfg.context_len as f64;
    let c = count_bigram(&s, 1, 6) as f64;
    for lambda in [0.0, 1.5, 4.0] {
        let scalars = Scalars { lambda: vec![lambda], s: Some(1.0), gamma: None };
        let p = ModelParams::reparam(&cfg, Scheme::NoiselessSoftmax, AttentionKind::Softmax, scalars).unwrap();
        let x = embed_sequence(p.basis(), &s).unwrap();
        let w = attention_weights(&p, &x);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // Position 1 has no predecessor and scores 0; every other position
        // scores ±λ.
        let den = c * lambda.exp() + (h - c - 1.0) * (-lambda).exp() + 1.0;
        let ctx = s.context();
        for i in 0..ctx.len() {
            let expected = if i == 0 {
                1.0 / den
            } else if ctx[i - 1] == 1 {
                lambda.exp() / den
            } else {
                (-lambda).exp() / den
            };
            assert_abs_diff_eq!(w[i], expected, epsilon = 1e-15);
        }
        if lambda == 0.0 {
            assert!(w.iter().all(|&v| (v - 1.0 / h).abs() < 1e-15));
        }
    }
}

#[test]
fn noisy_logits_closed_form() {
    let cfg = TaskConfig { triggers: vec![1], outputs: vec![6, 7], context_len: 12, ..TaskConfig::default() }.with_noise(0.5);
    let tokens = vec![20, 1, 6, 30, 1, 61, 31, 1, 6, 40, 41, 1, 61];
    let s = Sentence { tokens, trigger: 1, output: 6, label_is_noise: true };
    for (lambda, gamma) in [(1.0, 0.0), (0.7, (0.25f64 / 0.75).ln()), (2.5, 1.3)] {
        let scalars = Scalars { lambda: vec![lambda], s: None, gamma: Some(gamma) };
        let p = ModelParams::reparam(&cfg, Scheme::NoisyLinear, AttentionKind::Linear, scalars).unwrap();
        let l = forward(&p, &embed_sequence(p.basis(), &s).unwrap());
        let c = 2.0;
        assert_abs_diff_eq!(l.at(6), lambda * c, epsilon = 1e-14);
        assert_abs_diff_eq!(l.at(61), lambda * c + gamma, epsilon = 1e-14);
        assert_abs_diff_eq!(l.xi_ff[60], gamma + lambda * c, epsilon = 1e-14);
        assert_eq!(l.xi_attn[60], 0.0);
        for j in (1..=60).filter(|&j| j != 6) {
            assert_eq!(l.at(j), 0.0);
        }
    }
}

#[test]
fn closed_form_spec_examples() {
    let cfg = TaskConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = sample_sentence(&cfg, &mut rng).unwrap();
    let counts = SentenceCounts::from_sentence(60, &cfg.triggers, &s).unwrap();
    let h = cfg.context_len as f64;
    let at = |lambda, s| ScalarPoint { lambda, s, gamma: 0.0 };
    let l0 = closed_form_logits(Scheme::NoiselessSoftmax, AttentionKind::Softmax, at(0.0, 1.0), &counts, 60).unwrap();
    for j in 1..=60 {
        assert_abs_diff_eq!(l0.at(j), counts.token_counts[j] as f64 / h, epsilon = 1e-15);
    }
    let big = closed_form_logits(Scheme::NoiselessSoftmax, AttentionKind::Softmax, at(50.0, 1.0), &counts, 60).unwrap();
    assert_abs_diff_eq!(big.at(s.output), 1.0, epsilon = 1e-12);
    for j in (1..=60).filter(|&j| j != s.output) {
        assert!(big.at(j).abs() < 1e-12);
    }

    // C_{q,y} = 2, one (q, τ) bigram, fillers elsewhere.
    let mut tc = vec![0; 62];
    tc[1] = 3;
    tc[6] = 2;
    tc[61] = 1;
    tc[20] = 250;
    let mut un = vec![0; 62];
    un[20] = 2;
    let c = SentenceCounts { context_len: 256, trigger: 1, output: 6, noise_token: 61, qy: 2, q_tau: 1, token_counts: tc, unanchored: un };
    let pt = ScalarPoint { lambda: 1.0, s: 1.0, gamma: (0.25f64 / 0.75).ln() };
    let l = closed_form_logits(Scheme::NoisyLinear, AttentionKind::Linear, pt, &c, 61).unwrap();
    assert_abs_diff_eq!(l.at(6), 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(l.at(61), 2.0 - 1.0986122886681098, epsilon = 1e-12);
}

#[test]
fn inconsistent_counts_are_rejected() {
    let mut tc = vec![0; 62];
    tc[1] = 1;
    tc[20] = 9;
    let mut un = vec![0; 62];
    un[20] = 1;
    let bad = SentenceCounts { context_len: 10, trigger: 1, output: 6, noise_token: 61, qy: 1, q_tau: 0, token_counts: tc, unanchored: un };
    let at = ScalarPoint { lambda: 1.0, s: 1.0, gamma: 0.0 };
    // C_{q,y} = 1 but token 6 never occurs.
    assert!(closed_form_logits(Scheme::NoiselessLinear, AttentionKind::Linear, at, &bad, 60).is_err());
    let mut zero = bad.clone();
    zero.qy = 0;
    assert!(closed_form_logits(Scheme::NoiselessLinear, AttentionKind::Linear, at, &zero, 60).is_err());
}

#[test]
fn zero_parameters_give_zero_logits() {
    let cfg = TaskConfig::default().with_noise(0.5);
    let d = cfg.embed_dim;
    let z = || Array2::zeros((d, d));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = sample_sentence(&cfg, &mut rng).unwrap();
    for kind in AttentionKind::ALL {
        let p = ModelParams::origin(&cfg, kind, true, z(), z(), z()).unwrap();
        let l = forward(&p, &embed_sequence(p.basis(), &s).unwrap());
        assert!(l.xi.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn missing_scalars_are_configuration_errors() {
    let cfg = TaskConfig::default();
    let no_s = Scalars { lambda: vec![0.0; 5], s: None, gamma: None };
    assert!(ModelParams::reparam(&cfg, Scheme::NoiselessSoftmax, AttentionKind::Softmax, no_s).is_err());
    let no_gamma = Scalars { lambda: vec![0.0], s: None, gamma: None };
    assert!(ModelParams::reparam(&cfg, Scheme::NoisyLinear, AttentionKind::Linear, no_gamma).is_err());
    let wrong_len = Scalars { lambda: vec![0.0; 2], s: None, gamma: None };
    assert!(ModelParams::reparam(&cfg, Scheme::NoiselessLinear, AttentionKind::Linear, wrong_len).is_err());
}

#[test]
fn dense_forward_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for noisy in [false, true] {
        let cfg = TaskConfig { context_len: 32, ..TaskConfig::default() }.with_noise(if noisy { 0.4 } else { 0.0 });
        for kind in AttentionKind::ALL {
            let p = ModelParams::origin_random(&cfg, kind, noisy, 0.3, &mut rng).unwrap();
            for _ in 0..20 {
                let s = sample_sentence(&cfg, &mut rng).unwrap();
                let l = forward(&p, &embed_sequence(p.basis(), &s).unwrap());
                let (xa, xf) = oracle(&p, s.context());
                assert!(max_diff(&l.xi_attn, &xa) < 1e-12);
                assert!(max_diff(&l.xi_ff, &xf) < 1e-12);
                assert!(max_diff(&l.xi, &(&xa + &xf)) < 1e-12);
            }
        }
    }
}

/// Closed form vs dense forward on 10³ sentences for every scheme and kind.
#[test]
fn closed_form_matches_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for scheme in Scheme::ALL {
        for &kind in scheme.kinds() {
            let mut worst: f64 = 0.0;
            for i in 0..1000 {
                let cfg = config_for(scheme, &mut rng);
                let p = ModelParams::reparam(&cfg, scheme, kind, random_scalars(scheme, 5, &mut rng)).unwrap();
                let s = sample_sentence(&cfg, &mut rng).unwrap();
                let dense = forward(&p, &embed_sequence(p.basis(), &s).unwrap());
                let counts = SentenceCounts::from_sentence(cfg.vocab_size, &cfg.triggers, &s).unwrap();
                let cf: Logits = p.closed_form(&counts).unwrap();
                worst = worst.max(max_diff(&cf.xi_attn, &dense.xi_attn)).max(max_diff(&cf.xi_ff, &dense.xi_ff));
                if i < 20 {
                    let (xa, xf) = oracle(&p, s.context());
                    assert!(max_diff(&cf.xi_attn, &xa) < 1e-10 && max_diff(&cf.xi_ff, &xf) < 1e-10);
                }
            }
            assert!(worst <= 1e-10, "{scheme} {kind}: {worst:e}");
        }
    }
}

#[test]
fn linear_and_relu_agree_on_nonnegative_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for scheme in [Scheme::NoiselessLinear, Scheme::NoisyLinear] {
        for _ in 0..100 {
            let cfg = config_for(scheme, &mut rng);
            let mut sc = random_scalars(scheme, 5, &mut rng);
            sc.lambda.iter_mut().for_each(|l| *l = l.abs());
            let lin = ModelParams::reparam(&cfg, scheme, AttentionKind::Linear, sc.clone()).unwrap();
            let relu = ModelParams::reparam(&cfg, scheme, AttentionKind::Relu, sc).unwrap();
            let s = sample_sentence(&cfg, &mut rng).unwrap();
            let x = embed_sequence(lin.basis(), &s).unwrap();
            assert_eq!(forward(&lin, &x), forward(&relu, &x));
        }
    }
}

#[test]
fn noisy_attention_ignores_tau_and_softmax_logits_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let cfg = config_for(Scheme::NoisyLinear, &mut rng);
        let sc = random_scalars(Scheme::NoisyLinear, 5, &mut rng);
        let p = ModelParams::reparam(&cfg, Scheme::NoisyLinear, AttentionKind::Linear, sc).unwrap();
        let s = sample_sentence(&cfg, &mut rng).unwrap();
        let l = forward(&p, &embed_sequence(p.basis(), &s).unwrap());
        assert_eq!(l.xi_attn[cfg.noise_token() - 1], 0.0);

        let cfg = config_for(Scheme::NoiselessSoftmax, &mut rng);
        let sc = random_scalars(Scheme::NoiselessSoftmax, 5, &mut rng);
        let scale = sc.s.unwrap();
        let p = ModelParams::reparam(&cfg, Scheme::NoiselessSoftmax, AttentionKind::Softmax, sc).unwrap();
        let s = sample_sentence(&cfg, &mut rng).unwrap();
        let l = forward(&p, &embed_sequence(p.basis(), &s).unwrap());
        assert!(l.xi_attn.iter().all(|&v| (0.0..=scale + 1e-12).contains(&v)));
    }
}
