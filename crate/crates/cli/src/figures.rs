//! CSV and SVG outputs built from recorded runs.

use std::fs;
use std::path::{Path, PathBuf};

use icrlab::model::{FamilyTag, ModelId};
use icrlab::training::TrainTrajectory;

use crate::experiment::{alpha_dir, Run};
use crate::svg::{render, Panel, Series};
use crate::verify::{checkmark_matrix, TABLE_COLUMNS};
use crate::CliError;

/// Step-wise mean over seeds of one trajectory column.
fn mean_curve(ts: &[&TrainTrajectory], col: impl Fn(&icrlab::training::StepRecord) -> f64) -> Vec<(f64, f64)> {
    let Some(first) = ts.first() else { return Vec::new() };
    first
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let vals: Vec<f64> = ts.iter().filter_map(|t| t.records.get(i)).map(&col).filter(|v| v.is_finite()).collect();
            (vals.len() == ts.len()).then(|| (r.step as f64, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

fn group<'a>(runs: &'a [Run], m: ModelId, alpha: f64) -> Vec<&'a TrainTrajectory> {
    runs.iter().filter(|r| r.model == m && r.alpha == alpha).map(|r| &r.trajectory).collect()
}

fn models(runs: &[Run]) -> Vec<ModelId> {
    ModelId::GRID.into_iter().filter(|m| runs.iter().any(|r| r.model == *m)).collect()
}

/// Loss curves: per noise level, population loss of every model, OOD loss
/// of the unconstrained models, OOD loss of the reparameterized ones.
fn loss_figure(runs: &[Run], alphas: &[f64], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut csv = String::from("model,alpha,seed,step,loss_pop,loss_ood\n");
    for r in runs {
        for rec in &r.trajectory.records {
            csv += &format!("{},{},{},{},{},{}\n", r.model, r.alpha, r.seed, rec.step, rec.loss_pop, rec.loss_ood);
        }
    }
    let csv_path = dir.join("loss_curves.csv");
    fs::write(&csv_path, csv)?;
    let mut panels = Vec::new();
    for &a in alphas {
        let row = if a == 0.0 { "noiseless".to_string() } else { format!("alpha = {a}") };
        let series = |pred: &dyn Fn(ModelId) -> bool, ood: bool| -> Vec<Series> {
            models(runs)
                .into_iter()
                .filter(|m| pred(*m))
                .map(|m| {
                    let g = group(runs, m, a);
                    let points = if ood { mean_curve(&g, |r| r.loss_ood) } else { mean_curve(&g, |r| r.loss_pop) };
                    Series { label: m.to_string(), points }
                })
                .filter(|s| !s.points.is_empty())
                .collect()
        };
        panels.push(Panel {
            title: format!("population loss, {row}"),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_y: true,
            series: series(&|_| true, false),
        });
        panels.push(Panel {
            title: format!("OOD loss, Origin, {row}"),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_y: true,
            series: series(&|m| m.family == FamilyTag::Origin, true),
        });
        panels.push(Panel {
            title: format!("OOD loss, Reparam, {row}"),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_y: true,
            series: series(&|m| m.family != FamilyTag::Origin, true),
        });
    }
    let svg_path = dir.join("loss_curves.svg");
    fs::write(&svg_path, render(&panels, 3))?;
    Ok(vec![csv_path, svg_path])
}

/// Attention- and feed-forward-layer logits of `y` and `τ` on noisy runs.
fn logit_figures(runs: &[Run], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut csv = String::from("model,alpha,seed,step,xiA_y,xiA_tau,xiA_maxother,xiF_y,xiF_tau,xiF_maxother,flip_frac\n");
    let mut written = Vec::new();
    for r in runs.iter().filter(|r| r.alpha > 0.0) {
        for rec in r.trajectory.records.iter().filter(|x| x.logits.xi_a_y.is_finite()) {
            let l = &rec.logits;
            csv += &format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.model, r.alpha, r.seed, rec.step, l.xi_a_y, l.xi_a_tau, l.xi_a_maxother, l.xi_f_y, l.xi_f_tau, l.xi_f_maxother, l.flip_frac
            );
        }
    }
    let csv_path = dir.join("logits.csv");
    fs::write(&csv_path, csv)?;
    written.push(csv_path);
    let mut keys: Vec<(ModelId, f64)> = runs.iter().filter(|r| r.alpha > 0.0).map(|r| (r.model, r.alpha)).collect();
    keys.dedup();
    for (m, a) in keys {
        let g = group(runs, m, a);
        let s = |label: &str, f: fn(&icrlab::training::StepRecord) -> f64| Series { label: label.into(), points: mean_curve(&g, f) };
        let panels = [
            Panel {
                title: format!("{m}, attention layer, alpha = {a}"),
                x_label: "step".into(),
                y_label: "logit".into(),
                log_y: false,
                series: vec![s("y", |r| r.logits.xi_a_y), s("tau", |r| r.logits.xi_a_tau), s("max other", |r| r.logits.xi_a_maxother)],
            },
            Panel {
                title: format!("{m}, feed-forward layer, alpha = {a}"),
                x_label: "step".into(),
                y_label: "logit".into(),
                log_y: false,
                series: vec![s("y", |r| r.logits.xi_f_y), s("tau", |r| r.logits.xi_f_tau), s("max other", |r| r.logits.xi_f_maxother)],
            },
        ];
        let path = dir.join(format!("logits_{m}_{}.svg", alpha_dir(a)));
        fs::write(&path, render(&panels, 2))?;
        written.push(path);
    }
    Ok(written)
}

/// The checkmark matrix as CSV and as a plain-text table.
pub fn table_files(runs: &[Run], alpha: f64, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = checkmark_matrix(runs, alpha);
    let mut csv = format!("model,{}\n", TABLE_COLUMNS.join(","));
    let mut md = format!("| model | {} |\n|---|---|---|---|---|\n", TABLE_COLUMNS.join(" | "));
    for (m, cells) in &rows {
        let sym: Vec<&str> = cells.iter().map(|c| c.symbol()).collect();
        csv += &format!("{m},{}\n", sym.join(","));
        md += &format!("| {m} | {} |\n", sym.join(" | "));
    }
    md += &format!("\nNoisy columns use alpha = {alpha}.\n");
    let (c, t) = (dir.join("checkmarks.csv"), dir.join("checkmarks.md"));
    fs::write(&c, csv)?;
    fs::write(&t, md)?;
    Ok(vec![c, t])
}

/// Writes every figure for the runs under `out` into `out/figures`.
pub fn write_figures(out: &Path, runs: &[Run], table_alpha: f64) -> Result<Vec<PathBuf>, CliError> {
    if runs.is_empty() {
        return Err(CliError::Io(format!("no runs under {}", out.join("runs").display())));
    }
    let dir = out.join("figures");
    fs::create_dir_all(&dir)?;
    let mut alphas: Vec<f64> = runs.iter().map(|r| r.alpha).collect();
    alphas.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    alphas.dedup();
    let mut files = loss_figure(runs, &alphas, &dir)?;
    files.extend(logit_figures(runs, &dir)?);
    files.extend(table_files(runs, table_alpha, &dir)?);
    Ok(files)
}
