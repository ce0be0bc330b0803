//! Theory checks applied to recorded runs, and the checkmark matrix.

use icrlab::checks::{
    check_bayes_gap, check_ood_noiseless, check_ood_noisy, check_schedule, check_two_phase, flip_threshold, CheckReport,
};
use icrlab::losses::bayes_risk;
use icrlab::model::{AttentionKind, FamilyTag, ModelId};
use icrlab::training::{phase_one_length, GradientSource, Optimizer, TrainTrajectory};

use crate::config::Mode;
use crate::experiment::Run;

/// Loss above which a noiseless run has not reached zero loss.
pub const ZERO_LOSS_THRESHOLD: f64 = 0.1;
/// Margin above the Bayes risk a noisy run may keep.
pub const BAYES_MARGIN: f64 = 0.05;
/// Step whose OOD loss a final OOD loss must not exceed.
pub const OOD_REFERENCE_STEP: usize = 100;

fn lambda_columns(t: &TrainTrajectory) -> Vec<Vec<f64>> {
    t.param_names
        .iter()
        .filter(|n| n.starts_with("lambda"))
        .map(|n| t.column(n).expect("named column"))
        .collect()
}

/// Per-step length of the update of each normalized block. Scalar
/// blocks move by exactly `η`; a matrix norm changes by at most `η`.
fn step_length_report(run: &Run) -> CheckReport {
    let t = &run.trajectory;
    let eta = run.spec.eta;
    let tol = 1e-9;
    let mut worst: f64 = 0.0;
    let lambdas = lambda_columns(t);
    let exact = |cols: &[Vec<f64>], i: usize| -> f64 {
        cols.iter().map(|c| (c[i + 1] - c[i]).powi(2)).sum::<f64>().sqrt()
    };
    for i in 0..t.records.len().saturating_sub(1) {
        if t.records[i].stalled {
            continue;
        }
        if !lambdas.is_empty() {
            let d = exact(&lambdas, i);
            // A block with zero gradient stays put while another one moves.
            if d > 0.0 {
                worst = worst.max((d - eta).abs());
            }
        }
        for name in ["norm_v", "norm_w", "norm_f"] {
            if let Some(c) = t.column(name) {
                worst = worst.max((c[i + 1] - c[i]).abs() - eta);
            }
        }
        if let Some(s) = t.column("s") {
            let d = (s[i + 1] - s[i]).abs();
            if d > 0.0 {
                worst = worst.max((d - eta).abs());
            }
        }
    }
    CheckReport::new("step-length", worst <= tol, worst, eta, tol).with_note("normalized blocks move by eta")
}

/// Checks that apply to a run, given its model, noise level and settings.
pub fn run_checks(run: &Run) -> Vec<CheckReport> {
    let spec = &run.spec;
    let t = &run.trajectory;
    let n = spec.vocab_size;
    let nq = spec.triggers.len();
    let eta = spec.eta;
    let steps = t.last().step;
    let mut reps = Vec::new();
    if spec.optimizer == Optimizer::Normalized {
        reps.push(step_length_report(run));
    }
    let scalar = run.model.family == FamilyTag::Reparam;
    let ngd = spec.optimizer == Optimizer::Normalized;
    if scalar && ngd && run.alpha == 0.0 {
        let last = t.last().loss_pop;
        if run.model.kind == AttentionKind::Softmax {
            let t0 = phase_one_length(nq, spec.context_len, eta);
            let steps_v: Vec<usize> = t.records.iter().map(|r| r.step).collect();
            let s = t.column("s").unwrap_or_default();
            let lam = lambda_columns(t);
            let per_step: Vec<Vec<f64>> = (0..steps_v.len()).map(|i| lam.iter().map(|c| c[i]).collect()).collect();
            if steps > t0 {
                reps.push(check_two_phase(&steps_v, &s, &per_step, t0, eta, nq));
            }
        } else {
            // (N − 1) e^{−λ} with the slowest guaranteed rate λ_q ≥ ηt/|Q|.
            let bound = (n as f64 - 1.0) * (-eta * steps as f64 / nq as f64).exp();
            reps.push(CheckReport::new("zero-loss", last <= bound, last, bound, 0.0).with_note(format!("T = {steps}")));
            if spec.gradient == GradientSource::Exact && spec.mode == Mode::Population {
                let expected: Vec<f64> = t.records.iter().map(|r| eta * r.step as f64 / (nq as f64).sqrt()).collect();
                for (q, col) in lambda_columns(t).iter().enumerate() {
                    reps.push(check_schedule(&format!("lambda-schedule-{}", q + 1), col, &expected, 1e-12));
                }
            }
        }
        let mut worst: Option<CheckReport> = None;
        let linear_logits = run.model.kind != AttentionKind::Softmax;
        for r in t.records.iter().filter(|r| linear_logits && r.p_ood_y_min.is_finite()) {
            let rep = check_ood_noiseless(r.p_ood_y_min, r.step, eta / nq as f64, n);
            let margin = rep.measured - rep.bound;
            if worst.as_ref().is_none_or(|w| margin < w.measured - w.bound) {
                worst = Some(rep);
            }
        }
        reps.extend(worst);
    }
    if scalar && ngd && run.alpha > 0.0 && run.model.kind != AttentionKind::Softmax {
        let alpha = run.alpha;
        let m = spec.train_size;
        if spec.mode == Mode::UnknownNoise {
            let expected: Vec<f64> = t.records.iter().map(|r| eta * r.step as f64).collect();
            reps.push(check_schedule("lambda-schedule", &t.column("lambda").unwrap_or_default(), &expected, 1e-12));
        }
        match check_bayes_gap(t.last().loss_pop, alpha, m, spec.delta, eta, steps, n) {
            Ok(r) => reps.push(r),
            Err(e) => reps.push(CheckReport::new("bayes-gap", false, f64::NAN, f64::NAN, 0.0).with_note(e.to_string())),
        }
        let last = t.last();
        reps.push(check_ood_noisy(last.p_ood_y, last.p_ood_tau, alpha, m, steps, eta, n, spec.delta, spec.c1, spec.c2));
        if let Ok(t_flip) = flip_threshold(alpha, m, spec.delta, eta) {
            let late: Vec<f64> = t
                .records
                .iter()
                .filter(|r| r.step >= t_flip && r.logits.flip_frac.is_finite())
                .map(|r| r.logits.flip_frac)
                .collect();
            let worst = late.iter().copied().fold(1.0, f64::min);
            reps.push(
                CheckReport::new("flip", !late.is_empty() && worst == 1.0, worst, 1.0, 0.0)
                    .with_note(format!("t >= {t_flip}, alpha = {alpha}")),
            );
        }
    }
    let hash = spec.hash();
    reps.into_iter()
        .map(|r| {
            let note = if r.note.is_empty() { run.model.to_string() } else { format!("{}; {}", run.model, r.note) };
            r.with_note(note).with_run(hash.clone(), run.seed)
        })
        .collect()
}

/// One checkmark-matrix cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Pass,
    Fail,
    /// No run at the required noise level.
    Missing,
}

impl Cell {
    pub fn symbol(self) -> &'static str {
        match self {
            Cell::Pass => "yes",
            Cell::Fail => "no",
            Cell::Missing => "n/a",
        }
    }
}

pub const TABLE_COLUMNS: [&str; 4] = ["zero_loss", "ood", "bayes_loss", "noisy_ood"];

fn loss_at(t: &TrainTrajectory, step: usize, col: impl Fn(&icrlab::training::StepRecord) -> f64) -> Option<f64> {
    t.records.iter().filter(|r| r.step <= step && col(r).is_finite()).last().map(&col)
}

/// Final OOD loss at or below `threshold` and not above its value at
/// [`OOD_REFERENCE_STEP`].
fn ood_ok(t: &TrainTrajectory, threshold: f64) -> bool {
    let last = match loss_at(t, usize::MAX, |r| r.loss_ood) {
        Some(v) => v,
        None => return false,
    };
    let reference = loss_at(t, OOD_REFERENCE_STEP, |r| r.loss_ood).unwrap_or(f64::INFINITY);
    last <= threshold && last <= reference
}

/// Classifies runs of one model. A cell passes iff every seed passes.
pub fn table_row(noiseless: &[&TrainTrajectory], noisy: &[&TrainTrajectory], alpha: f64) -> [Cell; 4] {
    let all = |ts: &[&TrainTrajectory], f: &dyn Fn(&TrainTrajectory) -> bool| {
        if ts.is_empty() {
            Cell::Missing
        } else if ts.iter().all(|t| f(t)) {
            Cell::Pass
        } else {
            Cell::Fail
        }
    };
    let noisy_threshold = bayes_risk(alpha) + BAYES_MARGIN;
    [
        all(noiseless, &|t| t.last().loss_pop <= ZERO_LOSS_THRESHOLD),
        all(noiseless, &|t| ood_ok(t, ZERO_LOSS_THRESHOLD)),
        all(noisy, &|t| t.last().loss_pop <= noisy_threshold),
        all(noisy, &|t| ood_ok(t, noisy_threshold)),
    ]
}

/// Rows of the checkmark matrix for every model with runs.
pub fn checkmark_matrix(runs: &[Run], alpha: f64) -> Vec<(ModelId, [Cell; 4])> {
    ModelId::GRID
        .iter()
        .filter(|m| runs.iter().any(|r| r.model == **m))
        .map(|&m| {
            let pick = |a: f64| -> Vec<&TrainTrajectory> {
                runs.iter().filter(|r| r.model == m && r.alpha == a).map(|r| &r.trajectory).collect()
            };
            (m, table_row(&pick(0.0), &pick(alpha), alpha))
        })
        .collect()
}
