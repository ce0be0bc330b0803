//! Executable versions of the convergence, generalization and
//! directional-convergence statements.

use std::fmt;

use ndarray::Array2;

use crate::data::Token;
use crate::error::{domain_err, Result};
use crate::losses::bayes_risk;
use crate::model::{frobenius_dot, frobenius_norm, Logits};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub id: String,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub note: String,
    pub config_hash: String,
    pub seed: u64,
}

impl CheckReport {
    pub fn new(id: impl Into<String>, pass: bool, measured: f64, bound: f64, tolerance: f64) -> CheckReport {
        CheckReport {
            id: id.into(),
            pass,
            measured,
            bound,
            tolerance,
            note: String::new(),
            config_hash: String::new(),
            seed: 0,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn with_run(mut self, config_hash: impl Into<String>, seed: u64) -> Self {
        self.config_hash = config_hash.into();
        self.seed = seed;
        self
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: measured {:.6e}, bound {:.6e}, tol {:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.measured,
            self.bound,
            self.tolerance
        )?;
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

/// Least-squares slope of `ln L_t` against `t` over `window = (first, last)`
/// (inclusive). The window is cut at the first nonpositive or non-finite
/// loss.
pub fn fit_log_linear(losses: &[f64], window: (usize, usize)) -> Result<f64> {
    let (a, b) = window;
    if a >= losses.len() || b < a {
        return domain_err(format!("window {a}..={b} outside a curve of length {}", losses.len()));
    }
    let b = b.min(losses.len() - 1);
    let pts: Vec<(f64, f64)> = losses[a..=b]
        .iter()
        .enumerate()
        .take_while(|(_, &l)| l > 0.0 && l.is_finite())
        .map(|(i, &l)| ((a + i) as f64, l.ln()))
        .collect();
    if pts.len() < 2 {
        return domain_err("fewer than two positive losses in the window");
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Passes iff `lo ≤ slope ≤ hi`.
pub fn check_linear_rate(slope: f64, lo: f64, hi: f64) -> CheckReport {
    CheckReport::new("linear-rate", (lo..=hi).contains(&slope), slope, hi, hi - lo)
        .with_note(format!("window [{lo}, {hi}]"))
}

/// `e^{ηt} / (e^{ηt} + N − 1)`.
pub fn ood_noiseless_bound(t: usize, eta: f64, n: usize) -> f64 {
    1.0 / (1.0 + (n as f64 - 1.0) * (-eta * t as f64).exp())
}

/// Passes iff `p_ytest ≥ e^{ηt}/(e^{ηt} + N − 1) − 1e−12`.
pub fn check_ood_noiseless(p_ytest: f64, t: usize, eta: f64, n: usize) -> CheckReport {
    let bound = ood_noiseless_bound(t, eta, n);
    CheckReport::new("ood-noiseless", p_ytest >= bound - 1e-12, p_ytest, bound, 1e-12)
        .with_note(format!("t = {t}"))
}

/// `√(ln(2/δ) / (2M))`.
pub fn hoeffding_width(m: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * m as f64)).sqrt()
}

/// Tolerance `c₁ √(ln(1/δ)/M) + c₂ N² e^{−2ηt}` of the noisy OOD check.
pub fn ood_noisy_tolerance(m: usize, t: usize, eta: f64, n: usize, delta: f64, c1: f64, c2: f64) -> f64 {
    c1 * ((1.0 / delta).ln() / m as f64).sqrt() + c2 * (n as f64).powi(2) * (-2.0 * eta * t as f64).exp()
}

/// Passes iff both `|p_ytest − (1 − α)|` and `|p_τ − α|` are within
/// [`ood_noisy_tolerance`]. Reports the larger deviation.
#[allow(clippy::too_many_arguments)]
pub fn check_ood_noisy(
    p_ytest: f64,
    p_tau: f64,
    alpha: f64,
    m: usize,
    t: usize,
    eta: f64,
    n: usize,
    delta: f64,
    c1: f64,
    c2: f64,
) -> CheckReport {
    let tol = ood_noisy_tolerance(m, t, eta, n, delta, c1, c2);
    let dev = (p_ytest - (1.0 - alpha)).abs().max((p_tau - alpha).abs());
    CheckReport::new("ood-noisy", dev <= tol, dev, tol, tol).with_note(format!("alpha = {alpha}"))
}

/// Attention logits peak at `y` and feed-forward logits peak at `τ`, both
/// strictly.
pub fn check_flip(logits: &Logits, y: Token, tau: Token) -> bool {
    let strict_max = |v: &ndarray::Array1<f64>, t: Token| {
        let top = v[t - 1];
        v.iter().enumerate().all(|(j, &x)| j + 1 == t || x < top)
    };
    tau <= logits.vocab() && strict_max(&logits.xi_attn, y) && strict_max(&logits.xi_ff, tau)
}

/// Steps after which the flip condition holds:
/// `max(1, ⌈|ln(1 − α + w) − ln(α − w)| / η⌉)` with `w` the Hoeffding width.
pub fn flip_threshold(alpha: f64, m: usize, delta: f64, eta: f64) -> Result<usize> {
    let w = hoeffding_width(m, delta);
    if w >= alpha.min(1.0 - alpha) {
        return domain_err(format!("Hoeffding width {w} leaves no room around alpha = {alpha}"));
    }
    let t = ((1.0 - alpha + w).ln() - (alpha - w).ln()).abs() / eta;
    Ok((t.ceil() as usize).max(1))
}

/// `⟨W/‖W‖, W*/‖W*‖⟩` in the Frobenius inner product.
pub fn cosine_to_target(w: &Array2<f64>, w_star: &Array2<f64>) -> Result<f64> {
    if w.dim() != w_star.dim() {
        return domain_err("matrices differ in shape");
    }
    let (a, b) = (frobenius_norm(w), frobenius_norm(w_star));
    if a == 0.0 || b == 0.0 {
        return domain_err("cosine of a zero matrix is undefined");
    }
    Ok(frobenius_dot(w, w_star) / (a * b))
}

/// Second-phase softmax bounds: for every recorded `t > T₀`,
/// `s_t ≥ 1/2 + η(t − T₀)` and `λ_{q,t} ≥ ηt/|Q|` for every trigger.
/// `lambdas[t]` lists the per-trigger values at step `steps[t]`.
pub fn check_two_phase(steps: &[usize], s: &[f64], lambdas: &[Vec<f64>], t0: usize, eta: f64, n_triggers: usize) -> CheckReport {
    let tol = 1e-9;
    let mut worst = f64::INFINITY;
    let mut checked = 0;
    for ((&t, &st), ls) in steps.iter().zip(s).zip(lambdas) {
        if t <= t0 {
            continue;
        }
        checked += 1;
        let s_margin = st - (0.5 + eta * (t - t0) as f64);
        let l_bound = eta * t as f64 / n_triggers as f64;
        let l_margin = ls.iter().map(|l| l - l_bound).fold(f64::INFINITY, f64::min);
        worst = worst.min(s_margin).min(l_margin);
    }
    let pass = checked > 0 && worst >= -tol;
    CheckReport::new("two-phase", pass, worst, 0.0, tol).with_note(format!("T0 = {t0}, {checked} steps checked"))
}

/// `L_Bayes + (ln(2/δ)/(2M)) / (min(α, 1−α) − w) + (N − 1) e^{−ηt}`.
pub fn bayes_gap_bound(alpha: f64, m: usize, delta: f64, eta: f64, t: usize, n: usize) -> Result<f64> {
    let w = hoeffding_width(m, delta);
    let margin = alpha.min(1.0 - alpha) - w;
    if margin <= 0.0 {
        return domain_err(format!("Hoeffding width {w} leaves no room around alpha = {alpha}"));
    }
    Ok(bayes_risk(alpha) + w * w / margin + (n as f64 - 1.0) * (-eta * t as f64).exp())
}

/// Passes iff `final_loss` is at most [`bayes_gap_bound`].
pub fn check_bayes_gap(final_loss: f64, alpha: f64, m: usize, delta: f64, eta: f64, t: usize, n: usize) -> Result<CheckReport> {
    let bound = bayes_gap_bound(alpha, m, delta, eta, t, n)?;
    Ok(CheckReport::new("bayes-gap", final_loss <= bound, final_loss, bound, 0.0)
        .with_note(format!("alpha = {alpha}, Bayes risk {:.6}", bayes_risk(alpha))))
}

/// Passes iff `|values[i] − expected[i]| ≤ tol · max(1, |expected[i]|)`
/// at every step.
pub fn check_schedule(id: &str, values: &[f64], expected: &[f64], tol: f64) -> CheckReport {
    let worst = values
        .iter()
        .zip(expected)
        .map(|(v, e)| (v - e).abs() / e.abs().max(1.0))
        .fold(0.0, f64::max);
    let pass = values.len() == expected.len() && worst <= tol;
    CheckReport::new(id, pass, worst, 0.0, tol)
}

/// Fraction of passing reports.
pub fn pass_rate(reports: &[CheckReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().filter(|r| r.pass).count() as f64 / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_curve_has_its_rate() {
        let l: Vec<f64> = (0..300).map(|t| 59.0 * (-0.1 * t as f64).exp()).collect();
        assert!((fit_log_linear(&l, (0, 299)).unwrap() + 0.1).abs() < 1e-9);
    }

    #[test]
    fn window_stops_at_zero_loss() {
        let mut l: Vec<f64> = (0..10).map(|t| (-(t as f64)).exp()).collect();
        l[6] = 0.0;
        assert!((fit_log_linear(&l, (0, 9)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_curve_fails_rate_check() {
        let l = vec![0.5; 100];
        let slope = fit_log_linear(&l, (10, 90)).unwrap();
        assert_eq!(slope, 0.0);
        assert!(!check_linear_rate(slope, -0.11, -0.09).pass);
    }

    #[test]
    fn midpoint_of_ood_bound() {
        let eta = 0.01;
        let t = (59f64.ln() / eta) as usize;
        assert!((ood_noiseless_bound(t, eta, 60) - 0.5).abs() < 3e-3);
        assert!(1.0 - ood_noiseless_bound(2000, 0.1, 60) < 1e-15);
    }

    #[test]
    fn degenerate_flip_threshold() {
        assert!(flip_threshold(0.01, 100, 0.05, 0.1).is_err());
    }

    #[test]
    fn two_phase_detects_dip() {
        let steps: Vec<usize> = (0..300).collect();
        let lam: Vec<Vec<f64>> = steps.iter().map(|&t| vec![0.1 * t as f64 / 5.0]).collect();
        let good: Vec<f64> = steps.iter().map(|&t| 0.5 + 0.1 * (t as f64 - 139.0).max(0.0)).collect();
        assert!(check_two_phase(&steps, &good, &lam, 139, 0.1, 5).pass);
        let mut bad = good.clone();
        bad[200] = 0.4;
        assert!(!check_two_phase(&steps, &bad, &lam, 139, 0.1, 5).pass);
    }

    #[test]
    fn zero_matrix_cosine_is_an_error() {
        let z = Array2::<f64>::zeros((3, 3));
        assert!(cosine_to_target(&z, &Array2::eye(3)).is_err());
    }
}
