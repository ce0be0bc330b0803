//! Logits of the reparameterized models from sentence count statistics.
//!
//! Under the data-model conditions every position falls into one of three
//! score classes: `+λ` (predecessor is the trigger and the token is
//! attended), `0` (no in-vocabulary predecessor: position 1 and positions
//! right after `τ`), and `−λ` (everything else). Softmax weights are then
//! `w₊ = e^λ/D`, `w₀ = 1/D`, `w₋ = e^{−λ}/D` with
//! `D = c₊ e^λ + n₀ + (H − c₊ − n₀) e^{−λ}`.

use ndarray::Array1;

use super::{AttentionKind, Logits, ModelParams, Scheme, Family};
use crate::data::{Sentence, Token};
use crate::error::{domain_err, Result};

/// Count statistics of one sentence. Token-indexed vectors have length
/// `N + 2` and index 0 unused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceCounts {
    pub context_len: usize,
    pub trigger: Token,
    pub output: Token,
    pub noise_token: Token,
    /// `C_{q,y}`.
    pub qy: usize,
    /// `C_{q,τ}`.
    pub q_tau: usize,
    /// `C_j` over `z_1..z_H`.
    pub token_counts: Vec<usize>,
    /// Occurrences of each token at positions without an in-vocabulary
    /// predecessor.
    pub unanchored: Vec<usize>,
}

impl SentenceCounts {
    /// Counts a sentence, checking the structure the closed forms rely on:
    /// a single trigger type, `z_H = q`, `z_{H−1} ≠ q`, `q` followed only by
    /// `y` or `τ`, and `τ` preceded only by `q`.
    pub fn from_sentence(vocab_size: usize, triggers: &[Token], s: &Sentence) -> Result<SentenceCounts> {
        let tau = vocab_size + 1;
        let z = s.context();
        let h = z.len();
        let (q, y) = (s.trigger, s.output);
        if h < 2 || z[h - 1] != q {
            return domain_err("the last context token must be the trigger");
        }
        if z[h - 2] == q {
            return domain_err("the trigger may not precede itself at the query");
        }
        let mut token_counts = vec![0; tau + 1];
        let mut unanchored = vec![0; tau + 1];
        let (mut qy, mut q_tau) = (0, 0);
        for (i, &t) in z.iter().enumerate() {
            if t == 0 || t > tau {
                return domain_err(format!("token {t} out of range"));
            }
            token_counts[t] += 1;
            if t != q && triggers.contains(&t) {
                return domain_err("closed forms need a single trigger type per sentence");
            }
            let prev = if i == 0 { None } else { Some(z[i - 1]) };
            match prev {
                None => unanchored[t] += 1,
                Some(p) if p == tau => unanchored[t] += 1,
                Some(p) if p == q => {
                    if t == y {
                        qy += 1;
                    } else if t == tau {
                        q_tau += 1;
                    } else {
                        return domain_err(format!("trigger followed by {t}"));
                    }
                }
                Some(_) if t == tau => return domain_err("noise token without the trigger before it"),
                Some(_) => {}
            }
        }
        let c = SentenceCounts {
            context_len: h,
            trigger: q,
            output: y,
            noise_token: tau,
            qy,
            q_tau,
            token_counts,
            unanchored,
        };
        c.check()?;
        Ok(c)
    }

    /// Consistency of hand-built counts.
    pub fn check(&self) -> Result<()> {
        let tau = self.noise_token;
        if self.token_counts.len() != tau + 1 || self.unanchored.len() != tau + 1 {
            return domain_err("count vectors must have length N + 2");
        }
        let total: usize = self.token_counts.iter().sum();
        if total != self.context_len {
            return domain_err(format!("token counts sum to {total}, not H = {}", self.context_len));
        }
        if self.qy == 0 {
            return domain_err("C_{q,y} must be at least 1");
        }
        if self.output == 0 || self.output > tau || self.trigger == 0 || self.trigger > tau {
            return domain_err("trigger or output out of range");
        }
        for j in 1..=tau {
            let planted = self.planted(j, true);
            if self.unanchored[j] + planted > self.token_counts[j] {
                return domain_err(format!("counts for token {j} exceed its occurrences"));
            }
        }
        let q = self.trigger;
        if self.qy + self.q_tau > self.token_counts[q] {
            return domain_err("more trigger bigrams than trigger occurrences");
        }
        if self.unanchored.iter().sum::<usize>() == 0 {
            return domain_err("position 1 is always unanchored");
        }
        Ok(())
    }

    /// Number of `+λ` positions holding `j`.
    fn planted(&self, j: Token, tau_attended: bool) -> usize {
        let mut p = 0;
        if j == self.output {
            p += self.qy;
        }
        if tau_attended && j == self.noise_token {
            p += self.q_tau;
        }
        p
    }
}

/// The scalars that act on one sentence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarPoint {
    pub lambda: f64,
    pub s: f64,
    pub gamma: f64,
}

/// Partial derivatives of every logit coordinate with respect to the
/// sentence's `λ`, `s` and `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitJacobian {
    pub d_lambda: Array1<f64>,
    pub d_s: Array1<f64>,
    pub d_gamma: Array1<f64>,
}

/// Closed-form logits over `k` output tokens.
pub fn closed_form_logits(
    scheme: Scheme,
    kind: AttentionKind,
    at: ScalarPoint,
    counts: &SentenceCounts,
    k: usize,
) -> Result<Logits> {
    closed_form_jacobian(scheme, kind, at, counts, k).map(|(l, _)| l)
}

/// Closed-form logits together with their scalar derivatives.
pub fn closed_form_jacobian(
    scheme: Scheme,
    kind: AttentionKind,
    at: ScalarPoint,
    counts: &SentenceCounts,
    k: usize,
) -> Result<(Logits, LogitJacobian)> {
    if !scheme.kinds().contains(&kind) {
        return domain_err(format!("{scheme} has no closed form under {kind} attention"));
    }
    counts.check()?;
    let tau = counts.noise_token;
    if k > tau {
        return domain_err("output vocabulary larger than N + 1");
    }
    if counts.output > k {
        return domain_err("output token outside the output vocabulary");
    }
    let mut xa = Array1::zeros(k);
    let mut xf = Array1::zeros(k);
    let mut jl = Array1::zeros(k);
    let mut js = Array1::zeros(k);
    let mut jg = Array1::zeros(k);
    let y = counts.output - 1;
    let has_tau = k == tau;

    if !scheme.is_softmax() {
        let (l, dl) = match kind {
            AttentionKind::Relu if at.lambda < 0.0 => (0.0, 0.0),
            _ => (at.lambda, 1.0),
        };
        let c = counts.qy as f64;
        xa[y] = l * c;
        jl[y] = dl * c;
        match scheme {
            Scheme::NoiselessLinear if has_tau => {
                xa[tau - 1] = l * counts.q_tau as f64;
                jl[tau - 1] = dl * counts.q_tau as f64;
            }
            Scheme::NoisyLinear => {
                if !has_tau {
                    return domain_err("noisy schemes need the noise token in the output vocabulary");
                }
                xf[tau - 1] = at.gamma + l * c;
                jl[tau - 1] = dl * c;
                jg[tau - 1] = 1.0;
            }
            _ => {}
        }
        let jac = LogitJacobian { d_lambda: jl, d_s: js, d_gamma: jg };
        return Ok((Logits::new(xa, xf), jac));
    }

    let tau_attended = scheme == Scheme::NoiselessSoftmax;
    let h = counts.context_len as f64;
    let c_plus = (counts.qy + if tau_attended { counts.q_tau } else { 0 }) as f64;
    let n0 = counts.unanchored.iter().sum::<usize>() as f64;
    let m = h - c_plus - n0;
    let lam = at.lambda;
    let shift = lam.abs();
    let (fp, f0, fm) = ((lam - shift).exp(), (-shift).exp(), (-lam - shift).exp());
    let den = c_plus * fp + n0 * f0 + m * fm;
    let (wp, w0, wm) = (fp / den, f0 / den, fm / den);
    let kappa = c_plus * wp - m * wm;
    let (dwp, dw0, dwm) = (wp * (1.0 - kappa), -kappa * w0, wm * (-1.0 - kappa));
    for j in 1..=k {
        let p = counts.planted(j, tau_attended) as f64;
        let z = counts.unanchored[j] as f64;
        let rest = counts.token_counts[j] as f64 - p - z;
        let a = p * wp + z * w0 + rest * wm;
        xa[j - 1] = at.s * a;
        js[j - 1] = a;
        jl[j - 1] = at.s * (p * dwp + z * dw0 + rest * dwm);
    }
    if scheme == Scheme::NoisySoftmax {
        if !has_tau {
            return domain_err("noisy schemes need the noise token in the output vocabulary");
        }
        let q = counts.trigger;
        let nq0 = counts.unanchored[q] as f64;
        let nqm = counts.token_counts[q] as f64 - nq0;
        let wq = nq0 * w0 + nqm * wm;
        let dwq = nq0 * dw0 + nqm * dwm;
        let (cy, ct) = (counts.qy as f64, counts.q_tau as f64);
        let inner = at.gamma * wq + cy * wp + ct * wm;
        let t = tau - 1;
        xf[t] = at.gamma + at.s * inner;
        jg[t] = 1.0 + at.s * wq;
        js[t] += inner;
        jl[t] += at.s * (at.gamma * dwq + cy * dwp + ct * dwm);
    }
    let jac = LogitJacobian { d_lambda: jl, d_s: js, d_gamma: jg };
    Ok((Logits::new(xa, xf), jac))
}

impl ModelParams {
    /// Scalars acting on a sentence with trigger `q`.
    pub fn scalar_point(&self, q: Token) -> Option<ScalarPoint> {
        Some(ScalarPoint {
            lambda: self.lambda_for(q)?,
            s: self.scalars.s.unwrap_or(1.0),
            gamma: self.scalars.gamma.unwrap_or(0.0),
        })
    }

    /// Closed-form logits of a fully reparameterized model.
    pub fn closed_form(&self, counts: &SentenceCounts) -> Result<Logits> {
        let Family::Reparam(scheme) = self.family else {
            return domain_err("closed forms exist only for fully reparameterized models");
        };
        let Some(at) = self.scalar_point(counts.trigger) else {
            return domain_err(format!("no attention scalar for trigger {}", counts.trigger));
        };
        closed_form_logits(scheme, self.kind, at, counts, self.out_vocab())
    }
}
