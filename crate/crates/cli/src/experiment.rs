//! Runs of the model grid and their on-disk layout.
//!
//! ```text
//! OUT/data/alpha-A/seed-S/{train,pop_eval,ood}.csv + manifest.txt
//! OUT/runs/MODEL/alpha-A/seed-S/{config.txt,trajectory.csv,model.ckpt[,stats.txt]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use icrlab::data::Sentence;
use icrlab::io::{read_trajectory, write_checkpoint, write_dataset, write_trajectory};
use icrlab::model::{AttentionKind, FamilyTag, ModelId};
use icrlab::training::{algorithm1, sample_batch, sample_ood_batch, train_finite, train_population, Sampler, TrainOutcome, TrainTrajectory};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentSpec, Mode};
use crate::CliError;

const TRAIN_STREAM: u64 = 1 << 50;
const POP_EVAL_STREAM: u64 = 1 << 51;
const OOD_EVAL_STREAM: u64 = 1 << 52;

pub fn alpha_dir(alpha: f64) -> String {
    format!("alpha-{alpha}")
}

pub fn run_dir(out: &Path, model: ModelId, alpha: f64, seed: u64) -> PathBuf {
    out.join("runs").join(model.to_string()).join(alpha_dir(alpha)).join(format!("seed-{seed}"))
}

/// The fixed training set of a seed. Finite-sample runs and `generate`
/// draw the same sentences.
pub fn training_set(spec: &ExperimentSpec, alpha: f64, seed: u64) -> Result<Vec<Sentence>, CliError> {
    Ok(sample_batch(&spec.task(alpha), Sampler::Standard, spec.train_size, seed, TRAIN_STREAM)?)
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes the training, population-evaluation and OOD sets of one
/// `(α, seed)` with a manifest. Returns the directory.
pub fn generate(spec: &ExperimentSpec, alpha: f64, seed: u64) -> Result<PathBuf, CliError> {
    let dir = spec.out.join("data").join(alpha_dir(alpha)).join(format!("seed-{seed}"));
    fs::create_dir_all(&dir)?;
    let cfg = spec.task(alpha);
    let sets = [
        ("train", training_set(spec, alpha, seed)?),
        ("pop_eval", sample_batch(&cfg, Sampler::Standard, spec.pop_eval_size, seed, POP_EVAL_STREAM)?),
        ("ood", sample_ood_batch(&cfg, spec.ood_size, seed, OOD_EVAL_STREAM)?),
    ];
    let mut manifest = format!("seed = {seed}\nalpha = {alpha}\nconfig_hash = {}\n", spec.hash());
    for (name, data) in &sets {
        let path = dir.join(format!("{name}.csv"));
        write_dataset(&path, seed, data)?;
        let noise = data.iter().filter(|s| s.label_is_noise).count();
        manifest += &format!(
            "{name}.records = {}\n{name}.noise_labels = {noise}\n{name}.sha256 = {}\n",
            data.len(),
            sha256_file(&path)?
        );
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("config.txt"), spec.to_text())?;
    Ok(dir)
}

/// Trains one model at one noise level and seed.
pub fn train(spec: &ExperimentSpec, model: ModelId, alpha: f64, seed: u64) -> Result<TrainOutcome, CliError> {
    let cfg = spec.task(alpha);
    let tcfg = spec.train(seed);
    let out = match spec.mode {
        Mode::Population => train_population(&cfg, model, &tcfg)?,
        Mode::Finite => train_finite(&cfg, model, &training_set(spec, alpha, seed)?, spec.epochs, &tcfg)?,
        Mode::UnknownNoise => {
            if model.family != FamilyTag::Reparam || model.kind == AttentionKind::Softmax {
                return Err(CliError::Usage(format!("unknown-noise mode trains Reparam-Linear or Reparam-ReLU, not {model}")));
            }
            if alpha <= 0.0 {
                return Err(CliError::Usage("unknown-noise mode needs a noise level above 0".into()));
            }
            algorithm1(&cfg, model.kind, &training_set(spec, alpha, seed)?, &tcfg)?.0
        }
    };
    Ok(out)
}

/// Trains and writes one run directory.
pub fn train_and_save(spec: &ExperimentSpec, model: ModelId, alpha: f64, seed: u64) -> Result<PathBuf, CliError> {
    let out = train(spec, model, alpha, seed)?;
    let dir = run_dir(&spec.out, model, alpha, seed);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), spec.for_run(model, alpha, seed).to_text())?;
    write_trajectory(&dir.join("trajectory.csv"), &out.trajectory)?;
    write_checkpoint(&dir.join("model.ckpt"), &out.params)?;
    if let Some(st) = &out.stats {
        fs::write(
            dir.join("stats.txt"),
            format!("size = {}\nnoise_count = {}\nalpha_hat = {}\ngamma_hat = {}\n", st.size, st.noise_count, st.alpha_hat, st.gamma_hat),
        )?;
    }
    Ok(dir)
}

/// A run read back from disk.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub spec: ExperimentSpec,
    pub model: ModelId,
    pub alpha: f64,
    pub seed: u64,
    pub trajectory: TrainTrajectory,
}

fn load_run(dir: &Path) -> Result<Run, CliError> {
    let text = fs::read_to_string(dir.join("config.txt"))?;
    let spec = ExperimentSpec::parse(&text)?;
    let (model, alpha, seed) = match (spec.models.as_slice(), spec.alphas.as_slice(), spec.seeds.as_slice()) {
        ([m], [a], [s]) => (*m, *a, *s),
        _ => return Err(CliError::Usage(format!("{}: run config must name one model, alpha and seed", dir.display()))),
    };
    let trajectory = read_trajectory(&dir.join("trajectory.csv"), &model.to_string())?;
    Ok(Run { dir: dir.to_path_buf(), spec, model, alpha, seed, trajectory })
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// All runs under `out/runs`, sorted by model, noise level and seed.
/// A missing `runs` directory yields no runs.
pub fn load_runs(out: &Path) -> Result<Vec<Run>, CliError> {
    let root = out.join("runs");
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut runs = Vec::new();
    for m in sorted_subdirs(&root)? {
        for a in sorted_subdirs(&m)? {
            for s in sorted_subdirs(&a)? {
                runs.push(load_run(&s)?);
            }
        }
    }
    let grid_pos = |m: ModelId| ModelId::GRID.iter().position(|g| *g == m).unwrap_or(usize::MAX);
    runs.sort_by(|a, b| {
        (grid_pos(a.model), a.alpha, a.seed).partial_cmp(&(grid_pos(b.model), b.alpha, b.seed)).expect("finite alphas")
    });
    Ok(runs)
}

/// Runs `f` over `jobs` on a pool of worker threads; results come back in
/// job order.
pub fn pool_map<J: Sync, R: Send>(jobs: &[J], f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Trains every `(model, α, seed)` of the experiment and writes the run
/// directories.
pub fn train_grid(spec: &ExperimentSpec, alphas: &[f64]) -> Result<Vec<PathBuf>, CliError> {
    let mut jobs = Vec::new();
    for &m in &spec.models {
        for &a in alphas {
            for &s in &spec.seeds {
                jobs.push((m, a, s));
            }
        }
    }
    pool_map(&jobs, |&(m, a, s)| {
        eprintln!("training {m} alpha={a} seed={s}");
        train_and_save(spec, m, a, s)
    })
    .into_iter()
    .collect()
}
