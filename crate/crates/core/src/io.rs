//! Plain-text formats: datasets, trajectories, check reports and model
//! checkpoints. Floats are written in Rust's shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::checks::CheckReport;
use crate::data::{Sentence, TaskConfig, Token};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, Family, ModelParams, Scalars, Scheme};
use crate::training::{LogitSummary, StepRecord, TrainTrajectory};

/// Writes `seed, idx, q, y, label, z_1..z_{H+1}`, one sentence per row.
pub fn write_dataset(path: &Path, seed: u64, sentences: &[Sentence]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let len = sentences.first().map_or(0, |s| s.tokens.len());
    let mut header: Vec<String> = ["seed", "idx", "q", "y", "label"].map(String::from).to_vec();
    header.extend((1..=len).map(|h| format!("z_{h}")));
    w.write_record(&header)?;
    for (i, s) in sentences.iter().enumerate() {
        if s.tokens.len() != len {
            return Err(Error::Parse("sentences of one dataset must share a length".into()));
        }
        let mut row = vec![seed.to_string(), i.to_string(), s.trigger.to_string(), s.output.to_string()];
        row.push(s.label().to_string());
        row.extend(s.tokens.iter().map(Token::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], returning its seed.
pub fn read_dataset(path: &Path) -> Result<(u64, Vec<Sentence>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut seed = 0;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let nums: Vec<u64> = rec
            .iter()
            .map(|f| f.trim().parse::<u64>().map_err(|e| Error::Parse(format!("{f:?}: {e}"))))
            .collect::<Result<_>>()?;
        if nums.len() < 6 {
            return Err(Error::Parse("dataset row too short".into()));
        }
        seed = nums[0];
        let (q, y, label) = (nums[2] as Token, nums[3] as Token, nums[4] as Token);
        let tokens: Vec<Token> = nums[5..].iter().map(|&t| t as Token).collect();
        if *tokens.last().expect("nonempty") != label {
            return Err(Error::Parse("label column disagrees with the last token".into()));
        }
        out.push(Sentence { tokens, trigger: q, output: y, label_is_noise: label != y });
    }
    Ok((seed, out))
}

const FIXED_COLUMNS: [&str; 16] = [
    "loss_pop",
    "loss_emp",
    "loss_ood",
    "grad_norm",
    "cos_wstar",
    "xiA_y",
    "xiA_tau",
    "xiF_y",
    "xiF_tau",
    "xiA_maxother",
    "xiF_maxother",
    "flip_frac",
    "p_ood_y",
    "p_ood_y_min",
    "p_ood_tau",
    "stalled",
];

fn fixed_columns() -> &'static [&'static str] {
    &FIXED_COLUMNS
}

/// Writes `step, <parameters>, loss_pop, loss_emp, loss_ood, grad_norm,
/// cos_wstar, xiA_y, xiA_tau, xiF_y, xiF_tau, xiA_maxother, xiF_maxother,
/// flip_frac, p_ood_y, p_ood_y_min, p_ood_tau, stalled`.
pub fn write_trajectory(path: &Path, traj: &TrainTrajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(traj.param_names.iter().cloned());
    header.extend(fixed_columns().iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in &traj.records {
        let l = &r.logits;
        let mut row = vec![r.step.to_string()];
        row.extend(r.params.iter().map(f64::to_string));
        row.extend(
            [
                r.loss_pop,
                r.loss_emp,
                r.loss_ood,
                r.grad_norm,
                r.cos_wstar,
                l.xi_a_y,
                l.xi_a_tau,
                l.xi_f_y,
                l.xi_f_tau,
                l.xi_a_maxother,
                l.xi_f_maxother,
                l.flip_frac,
                r.p_ood_y,
                r.p_ood_y_min,
                r.p_ood_tau,
            ]
            .iter()
            .map(f64::to_string),
        );
        row.push(u8::from(r.stalled).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

/// Reads a trajectory written by [`write_trajectory`]; `model` names it.
pub fn read_trajectory(path: &Path, model: &str) -> Result<TrainTrajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let fixed = fixed_columns();
    if header.len() < 1 + fixed.len() || header[0] != "step" || header[header.len() - fixed.len()..] != *fixed {
        return Err(Error::Parse(format!("{}: not a trajectory file", path.display())));
    }
    let n_params = header.len() - 1 - fixed.len();
    let param_names = header[1..1 + n_params].to_vec();
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        if f.len() != header.len() {
            return Err(Error::Parse("trajectory row has the wrong width".into()));
        }
        let step = f[0].trim().parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?;
        let params = f[1..1 + n_params].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
        let v = f[1 + n_params..1 + n_params + 15].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
        let stalled = f[f.len() - 1].trim() == "1";
        records.push(StepRecord {
            step,
            params,
            loss_pop: v[0],
            loss_emp: v[1],
            loss_ood: v[2],
            grad_norm: v[3],
            cos_wstar: v[4],
            logits: LogitSummary {
                xi_a_y: v[5],
                xi_a_tau: v[6],
                xi_f_y: v[7],
                xi_f_tau: v[8],
                xi_a_maxother: v[9],
                xi_f_maxother: v[10],
                flip_frac: v[11],
            },
            p_ood_y: v[12],
            p_ood_y_min: v[13],
            p_ood_tau: v[14],
            stalled,
        });
    }
    Ok(TrainTrajectory { model: model.to_string(), param_names, records })
}

/// Writes check reports as a table.
pub fn write_reports(path: &Path, reports: &[CheckReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["check", "pass", "measured", "bound", "tolerance", "config_hash", "seed", "note"])?;
    for r in reports {
        w.write_record([
            r.id.clone(),
            r.pass.to_string(),
            r.measured.to_string(),
            r.bound.to_string(),
            r.tolerance.to_string(),
            r.config_hash.clone(),
            r.seed.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const CHECKPOINT_HEADER: &str = "# icrlab checkpoint v1";

fn family_tag(f: Family) -> String {
    match f {
        Family::Origin => "origin".into(),
        Family::ReparamW => "reparam-w".into(),
        Family::Reparam(s) => format!("reparam:{s}"),
    }
}

fn join(xs: impl IntoIterator<Item = String>) -> String {
    xs.into_iter().collect::<Vec<_>>().join(",")
}

/// Saves parameters: a versioned header, `key value` lines, then for
/// dense families the matrices as `matrix NAME ROWS COLS` followed by one
/// row per line.
pub fn write_checkpoint(path: &Path, p: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(w, "family {}", family_tag(p.family))?;
    writeln!(w, "kind {}", p.kind)?;
    writeln!(w, "noisy {}", p.noisy)?;
    writeln!(w, "vocab_size {}", p.basis().vocab_size())?;
    writeln!(w, "embed_dim {}", p.dim())?;
    writeln!(w, "triggers {}", join(p.triggers().iter().map(|t| t.to_string())))?;
    writeln!(w, "lambda {}", join(p.scalars.lambda.iter().map(|x| x.to_string())))?;
    if let Some(s) = p.scalars.s {
        writeln!(w, "s {s}")?;
    }
    if let Some(g) = p.scalars.gamma {
        writeln!(w, "gamma {g}")?;
    }
    let mats: Vec<(&str, &Array2<f64>)> = match p.family {
        Family::Origin => vec![("V", &p.v), ("W", &p.w), ("F", &p.f)],
        Family::ReparamW => vec![("W", &p.w)],
        Family::Reparam(_) => vec![],
    };
    for (name, m) in mats {
        writeln!(w, "matrix {name} {} {}", m.nrows(), m.ncols())?;
        for row in m.rows() {
            writeln!(w, "{}", join(row.iter().map(|x| x.to_string())))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = BufReader::new(File::open(path)?);
    let mut lines = file.lines();
    let bad = |m: &str| Error::Parse(format!("{}: {m}", path.display()));
    match lines.next() {
        Some(Ok(h)) if h.trim() == CHECKPOINT_HEADER => {}
        _ => return Err(bad("missing checkpoint header")),
    }
    let mut family = None;
    let mut kind = None;
    let mut noisy = false;
    let mut cfg = TaskConfig::default();
    let mut scalars = Scalars::default();
    let mut mats: Vec<(String, Array2<f64>)> = Vec::new();
    while let Some(line) = lines.next() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line.split_once(' ').unwrap_or((line, ""));
        let floats = |v: &str| -> Result<Vec<f64>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(parse_f64).collect()
        };
        match key {
            "family" => {
                family = Some(match val {
                    "origin" => Family::Origin,
                    "reparam-w" => Family::ReparamW,
                    v => match v.strip_prefix("reparam:") {
                        Some(s) => Family::Reparam(s.parse::<Scheme>()?),
                        None => return Err(bad("unknown family")),
                    },
                })
            }
            "kind" => kind = Some(val.parse::<AttentionKind>()?),
            "noisy" => noisy = val == "true",
            "vocab_size" => cfg.vocab_size = val.parse().map_err(|_| bad("vocab_size"))?,
            "embed_dim" => cfg.embed_dim = val.parse().map_err(|_| bad("embed_dim"))?,
            "triggers" => {
                cfg.triggers = val
                    .split(',')
                    .map(|t| t.trim().parse::<Token>().map_err(|_| bad("triggers")))
                    .collect::<Result<_>>()?
            }
            "lambda" => scalars.lambda = floats(val)?,
            "s" => scalars.s = Some(parse_f64(val)?),
            "gamma" => scalars.gamma = Some(parse_f64(val)?),
            "matrix" => {
                let parts: Vec<&str> = val.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(bad("matrix header"));
                }
                let rows: usize = parts[1].parse().map_err(|_| bad("matrix rows"))?;
                let cols: usize = parts[2].parse().map_err(|_| bad("matrix cols"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let l = lines.next().ok_or_else(|| bad("truncated matrix"))??;
                    let row = floats(&l)?;
                    if row.len() != cols {
                        return Err(bad("matrix row width"));
                    }
                    data.extend(row);
                }
                let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?;
                mats.push((parts[0].to_string(), m));
            }
            _ => return Err(bad(&format!("unknown key {key:?}"))),
        }
    }
    let family = family.ok_or_else(|| bad("missing family"))?;
    let kind = kind.ok_or_else(|| bad("missing kind"))?;
    // Outputs only need to avoid the triggers for the basis to build.
    cfg.outputs = (1..=cfg.vocab_size).filter(|t| !cfg.triggers.contains(t)).take(1).collect();
    let take = |name: &str, mats: &mut Vec<(String, Array2<f64>)>| -> Result<Array2<f64>> {
        let i = mats.iter().position(|(n, _)| n == name).ok_or_else(|| bad(&format!("missing matrix {name}")))?;
        Ok(mats.remove(i).1)
    };
    match family {
        Family::Origin => {
            let v = take("V", &mut mats)?;
            let w = take("W", &mut mats)?;
            let f = take("F", &mut mats)?;
            ModelParams::origin(&cfg, kind, noisy, v, w, f)
        }
        Family::ReparamW => {
            let w = take("W", &mut mats)?;
            ModelParams::reparam_w(&cfg, kind, noisy, w, scalars.s, scalars.gamma)
        }
        Family::Reparam(scheme) => ModelParams::reparam(&cfg, scheme, kind, scalars),
    }
}
