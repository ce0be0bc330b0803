//! Cross-entropy, closed-form population losses, the empirical loss of the
//! unknown-noise algorithm and the Bayes risk. All logarithms are natural.

use crate::data::{count_bigram, DatasetStats, Sentence, Token};
use crate::embedding::embed_sequence;
use crate::error::{domain_err, Error, Result};
use crate::model::{closed_form_jacobian, forward, ModelParams, Scheme, ScalarPoint, SentenceCounts};
use crate::model::AttentionKind;

/// Label distribution for one sentence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// A single observed label.
    Label(Token),
    /// `(1 − α) δ_y + α δ_τ`: the label averaged over the noise draw.
    Mix { output: Token, noise: Token, alpha: f64 },
}

impl Target {
    pub fn for_sentence(s: &Sentence) -> Target {
        Target::Label(s.label())
    }
}

/// `ln Σ_j e^{x_j}`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `−ln softmax(ξ)_label`.
///
/// Written as `m − ξ_label + ln(1 + Σ_{j≠j*} e^{ξ_j − m})` where `j*` is
/// the argmax, so losses far below machine epsilon keep their value.
pub fn cross_entropy_slice(xi: &[f64], label: Token) -> f64 {
    let (jstar, m) = argmax(xi);
    let rest: f64 = xi
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != jstar)
        .map(|(_, &x)| (x - m).exp())
        .sum();
    (m - xi[label - 1]) + rest.ln_1p()
}

pub fn cross_entropy(logits: &crate::model::Logits, label: Token) -> f64 {
    cross_entropy_slice(logits.xi.as_slice().expect("contiguous"), label)
}

fn argmax(xi: &[f64]) -> (usize, f64) {
    xi.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc })
}

/// Loss of `target` under logits `xi`, writing `∂loss/∂ξ` into `grad`.
pub fn ce_grad_into(xi: &[f64], target: &Target, grad: &mut [f64]) -> f64 {
    let (jstar, m) = argmax(xi);
    let mut rest = 0.0;
    for (j, (g, &x)) in grad.iter_mut().zip(xi).enumerate() {
        *g = (x - m).exp();
        if j != jstar {
            rest += *g;
        }
    }
    let z = 1.0 + rest;
    for g in grad.iter_mut() {
        *g /= z;
    }
    // p_{j*} − 1 without cancellation.
    let star_minus_one = -rest / z;
    let lse = m + rest.ln_1p();
    match *target {
        Target::Label(t) => {
            let i = t - 1;
            if i == jstar {
                grad[i] = star_minus_one;
            } else {
                grad[i] -= 1.0;
            }
            lse - xi[i]
        }
        Target::Mix { output, noise, alpha } => {
            let (iy, it) = (output - 1, noise - 1);
            grad[iy] -= 1.0 - alpha;
            grad[it] -= alpha;
            (1.0 - alpha) * (lse - xi[iy]) + alpha * (lse - xi[it])
        }
    }
}

/// Expected loss of `target`.
pub fn target_loss(xi: &[f64], target: &Target) -> f64 {
    match *target {
        Target::Label(t) => cross_entropy_slice(xi, t),
        Target::Mix { output, noise, alpha } => {
            (1.0 - alpha) * cross_entropy_slice(xi, output) + alpha * cross_entropy_slice(xi, noise)
        }
    }
}

/// Binary entropy `−α ln α − (1 − α) ln(1 − α)`; 0 at the endpoints.
pub fn bayes_risk(alpha: f64) -> f64 {
    let h = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
    h(alpha) + h(1.0 - alpha)
}

/// `ln(e^a + e^b)`.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Source of `C_{q,y}` values for the population losses.
#[derive(Clone, Copy, Debug)]
pub enum CountSource<'a> {
    /// Exact distribution `(C, probability)`; triggers are uniform.
    Histogram(&'a [(usize, f64)]),
    /// Sampled sentences as `(trigger index, C_{q,y})`.
    Batch(&'a [(usize, usize)]),
}

/// Noiseless linear/ReLU population loss
/// `E[ln(e^{Cλ_q} + N − 1) − Cλ_q]` and its gradient in `λ`.
pub fn population_loss_noiseless_grad(lambda: &[f64], source: CountSource, n: usize) -> (f64, Vec<f64>) {
    let nm1 = (n - 1) as f64;
    // ln(e^{x} + N − 1) − x and its derivative p − 1 = −(N−1)/(e^x + N − 1).
    let term = |x: f64| -> (f64, f64) {
        let l = log_add_exp(0.0, nm1.ln() - x);
        let d = -1.0 / (1.0 + (x - nm1.ln()).exp());
        (l, d)
    };
    let mut grad = vec![0.0; lambda.len()];
    let mut loss = 0.0;
    match source {
        CountSource::Histogram(hist) => {
            let wq = 1.0 / lambda.len() as f64;
            for (i, &l) in lambda.iter().enumerate() {
                for &(c, p) in hist {
                    let (v, d) = term(c as f64 * l);
                    loss += wq * p * v;
                    grad[i] += wq * p * d * c as f64;
                }
            }
        }
        CountSource::Batch(batch) => {
            let wb = 1.0 / batch.len() as f64;
            for &(i, c) in batch {
                let (v, d) = term(c as f64 * lambda[i]);
                loss += wb * v;
                grad[i] += wb * d * c as f64;
            }
        }
    }
    (loss, grad)
}

pub fn population_loss_noiseless(lambda: &[f64], source: CountSource, n: usize) -> f64 {
    population_loss_noiseless_grad(lambda, source, n).0
}

/// Noisy linear/ReLU population loss at `(λ, γ)` with label-noise rate `α`:
/// `E[−Cλ − αγ + ln(e^{Cλ}(1 + e^γ) + N − 1)]`, plus `(∂/∂λ, ∂/∂γ)`.
pub fn population_loss_noisy_linear_grad(
    lambda: f64,
    gamma: f64,
    alpha: f64,
    hist: &[(usize, f64)],
    n: usize,
) -> Result<(f64, f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain_err(format!("noise level {alpha} outside (0, 1)"));
    }
    let nm1 = (n - 1) as f64;
    let lg = log_add_exp(0.0, gamma);
    let (mut loss, mut dl, mut dg) = (0.0, 0.0, 0.0);
    for &(c, p) in hist {
        let c = c as f64;
        let x = c * lambda + lg;
        let lse = log_add_exp(x, nm1.ln());
        // Probability mass on {y, τ} and on τ alone.
        let p_pair = (x - lse).exp();
        let p_tau = (c * lambda + gamma - lse).exp();
        loss += p * (-c * lambda - alpha * gamma + lse);
        dl += p * c * (p_pair - 1.0);
        dg += p * (p_tau - alpha);
    }
    Ok((loss, dl, dg))
}

/// Noisy population loss over a batch of sentences via the closed-form
/// logits, with the label averaged over the noise draw.
pub fn population_loss_noisy(
    scheme: Scheme,
    kind: AttentionKind,
    at: ScalarPoint,
    alpha: f64,
    batch: &[SentenceCounts],
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain_err(format!("noise level {alpha} outside (0, 1)"));
    }
    if !scheme.is_noisy() {
        return domain_err(format!("{scheme} is not a noisy scheme"));
    }
    if batch.is_empty() {
        return domain_err("empty batch");
    }
    let mut total = 0.0;
    for c in batch {
        let k = c.noise_token;
        let (l, _) = closed_form_jacobian(scheme, kind, at, c, k)?;
        let t = Target::Mix { output: c.output, noise: c.noise_token, alpha };
        total += target_loss(l.xi.as_slice().expect("contiguous"), &t);
    }
    Ok(total / batch.len() as f64)
}

/// `α̂ = M_τ / M` and `γ̂ = ln(α̂ / (1 − α̂))`.
pub fn estimate_alpha_gamma(dataset: &[Sentence]) -> Result<DatasetStats> {
    let m = dataset.len();
    if m == 0 {
        return domain_err("empty dataset");
    }
    let m_tau = dataset.iter().filter(|s| s.label_is_noise).count();
    if m_tau == 0 || m_tau == m {
        return Err(Error::DegenerateEstimate { noise_count: m_tau, size: m });
    }
    let a = m_tau as f64 / m as f64;
    Ok(DatasetStats { size: m, noise_count: m_tau, alpha_hat: a, gamma_hat: (a / (1.0 - a)).ln() })
}

/// Per-sentence `C_{q,y}` of a dataset.
pub fn qy_counts(dataset: &[Sentence]) -> Vec<usize> {
    dataset.iter().map(|s| count_bigram(s, s.trigger, s.output)).collect()
}

fn check_stats(stats: &DatasetStats, counts: &[usize]) -> Result<()> {
    if stats.noise_count == 0 || stats.noise_count >= stats.size {
        return Err(Error::DegenerateEstimate { noise_count: stats.noise_count, size: stats.size });
    }
    if counts.len() != stats.size {
        return domain_err("one bigram count per sentence is required");
    }
    Ok(())
}

/// `(1/M) Σ [−Cλ + ln(e^{Cλ}/(1 − α̂) + N − 1)] − (M_τ/M) γ̂`, the mean
/// cross-entropy of the noisy linear model at `(λ, γ̂)`.
pub fn empirical_loss(lambda: f64, stats: &DatasetStats, counts: &[usize], n: usize) -> Result<f64> {
    check_stats(stats, counts)?;
    let nm1 = ((n - 1) as f64).ln();
    let l1a = -(1.0 - stats.alpha_hat).ln();
    let sum: f64 = counts
        .iter()
        .map(|&c| {
            let x = c as f64 * lambda;
            -x + log_add_exp(x + l1a, nm1)
        })
        .sum();
    Ok(sum / stats.size as f64 - stats.noise_count as f64 / stats.size as f64 * stats.gamma_hat)
}

/// `dL_emp/dλ = (1/M) Σ C (1 − N) / (e^{Cλ}/(1 − α̂) + N − 1)`, negative
/// for every `λ`.
pub fn empirical_loss_grad(lambda: f64, stats: &DatasetStats, counts: &[usize], n: usize) -> Result<f64> {
    check_stats(stats, counts)?;
    let nm1 = (n - 1) as f64;
    let l1a = -(1.0 - stats.alpha_hat).ln();
    let sum: f64 = counts
        .iter()
        .map(|&c| {
            let c = c as f64;
            // −C (N−1) / (e^{Cλ}/(1−α̂) + N − 1)
            -c / (1.0 + (c * lambda + l1a - nm1.ln()).exp())
        })
        .sum();
    Ok(sum / stats.size as f64)
}

/// Predicted probabilities of the sentence's output and of `τ`.
pub fn ood_probabilities(params: &ModelParams, s: &Sentence) -> Result<(f64, f64)> {
    let x = embed_sequence(params.basis(), s)?;
    let l = forward(params, &x);
    let xi = l.xi.as_slice().expect("contiguous");
    let lse = log_sum_exp(xi);
    let p_y = (xi[s.output - 1] - lse).exp();
    let p_tau = if params.noisy {
        (xi[params.noise_token() - 1] - lse).exp()
    } else {
        0.0
    };
    Ok((p_y, p_tau))
}
