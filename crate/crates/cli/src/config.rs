//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use icrlab::data::{TaskConfig, Token};
use icrlab::model::ModelId;
use icrlab::training::{GradientSource, Optimizer, Sampler, TrainConfig};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Fresh batches from the sampler every step.
    Population,
    /// Epochs over a fixed training set of `train_size` sentences.
    Finite,
    /// Estimate the noise level from the training set, then train `λ`.
    UnknownNoise,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Population => "population",
            Mode::Finite => "finite",
            Mode::UnknownNoise => "unknown-noise",
        }
    }
}

/// Every key with its documentation, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("vocab_size", "vocabulary size N; the noise token is N+1"),
    ("context_len", "context length H"),
    ("embed_dim", "embedding dimension d (at least 2N+1)"),
    ("triggers", "trigger tokens Q"),
    ("outputs", "output tokens O"),
    ("max_qy_bigrams", "planted (q, y) pairs per sentence are drawn from 1..=this"),
    ("alphas", "noise levels; 0 is the noiseless task"),
    ("models", "model ids from the grid, or `all`"),
    ("mode", "population | finite | unknown-noise"),
    ("gradient", "batch | exact (exact: linear and ReLU scalar models)"),
    ("optimizer", "ngd | gd"),
    ("eta", "learning rate"),
    ("steps", "training steps T"),
    ("batch_size", "sentences per step"),
    ("train_size", "training set size M"),
    ("pop_eval_size", "population evaluation set size"),
    ("ood_size", "out-of-distribution evaluation set size"),
    ("epochs", "passes over the training set in finite mode"),
    ("eval_every", "probe/OOD evaluation period in steps"),
    ("eval_size", "probe and OOD sentences used during training"),
    ("init_std", "std of the unconstrained models' initial entries"),
    ("seeds", "seeds; each run uses one"),
    ("delta", "failure probability of the high-probability bounds"),
    ("c1", "sampling constant of the noisy OOD tolerance"),
    ("c2", "transient constant of the noisy OOD tolerance"),
    ("table_alpha", "noise level of the noisy columns of the checkmark matrix"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub triggers: Vec<Token>,
    pub outputs: Vec<Token>,
    pub max_qy_bigrams: usize,
    pub alphas: Vec<f64>,
    pub models: Vec<ModelId>,
    pub mode: Mode,
    pub gradient: GradientSource,
    pub optimizer: Optimizer,
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub pop_eval_size: usize,
    pub ood_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub init_std: f64,
    pub seeds: Vec<u64>,
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
    pub table_alpha: f64,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let task = TaskConfig::default();
        let train = TrainConfig::default();
        ExperimentSpec {
            vocab_size: task.vocab_size,
            context_len: task.context_len,
            embed_dim: task.embed_dim,
            triggers: task.triggers,
            outputs: task.outputs,
            max_qy_bigrams: task.max_qy_bigrams,
            alphas: vec![0.2, 0.5, 0.8],
            models: ModelId::GRID.to_vec(),
            mode: Mode::Population,
            gradient: GradientSource::Batch,
            optimizer: Optimizer::Normalized,
            eta: train.eta,
            steps: train.steps,
            batch_size: train.batch_size,
            train_size: 2048,
            pop_eval_size: 20480,
            ood_size: 512,
            epochs: 100,
            eval_every: train.eval_every,
            eval_size: train.eval_size,
            init_std: train.init_std,
            seeds: (0..5).collect(),
            delta: 0.05,
            c1: 2.0,
            c2: 2.0,
            table_alpha: 0.5,
            out: PathBuf::from("out"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_optimizer(v: &str) -> Result<Optimizer, CliError> {
    match v.trim() {
        "ngd" => Ok(Optimizer::Normalized),
        "gd" => Ok(Optimizer::Plain),
        _ => Err(usage(format!("optimizer must be ngd or gd, got {v:?}"))),
    }
}

pub fn parse_model(v: &str) -> Result<ModelId, CliError> {
    v.trim().parse::<ModelId>().map_err(|e| usage(e.to_string()))
}

impl ExperimentSpec {
    /// Parses a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<ExperimentSpec, CliError> {
        let mut spec = ExperimentSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("line {}: expected key = value", i + 1)))?;
            spec.set(k.trim(), v.trim())?;
        }
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "vocab_size" => self.vocab_size = num(key, v)?,
            "context_len" => self.context_len = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "triggers" => self.triggers = list(key, v)?,
            "outputs" => self.outputs = list(key, v)?,
            "max_qy_bigrams" => self.max_qy_bigrams = num(key, v)?,
            "alphas" => self.alphas = list(key, v)?,
            "models" => {
                self.models = if v.trim() == "all" {
                    ModelId::GRID.to_vec()
                } else {
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_model).collect::<Result<_, _>>()?
                }
            }
            "mode" => {
                self.mode = match v {
                    "population" => Mode::Population,
                    "finite" => Mode::Finite,
                    "unknown-noise" => Mode::UnknownNoise,
                    _ => return Err(usage(format!("unknown mode {v:?}"))),
                }
            }
            "gradient" => {
                self.gradient = match v {
                    "batch" => GradientSource::Batch,
                    "exact" => GradientSource::Exact,
                    _ => return Err(usage(format!("unknown gradient source {v:?}"))),
                }
            }
            "optimizer" => self.optimizer = parse_optimizer(v)?,
            "eta" => self.eta = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "train_size" => self.train_size = num(key, v)?,
            "pop_eval_size" => self.pop_eval_size = num(key, v)?,
            "ood_size" => self.ood_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_size" => self.eval_size = num(key, v)?,
            "init_std" => self.init_std = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "delta" => self.delta = num(key, v)?,
            "c1" => self.c1 = num(key, v)?,
            "c2" => self.c2 = num(key, v)?,
            "table_alpha" => self.table_alpha = num(key, v)?,
            _ => return Err(usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "vocab_size" => self.vocab_size.to_string(),
            "context_len" => self.context_len.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "triggers" => join(&self.triggers),
            "outputs" => join(&self.outputs),
            "max_qy_bigrams" => self.max_qy_bigrams.to_string(),
            "alphas" => join(&self.alphas),
            "models" => join(&self.models),
            "mode" => self.mode.name().into(),
            "gradient" => match self.gradient {
                GradientSource::Batch => "batch".into(),
                GradientSource::Exact => "exact".into(),
            },
            "optimizer" => match self.optimizer {
                Optimizer::Normalized => "ngd".into(),
                Optimizer::Plain => "gd".into(),
            },
            "eta" => self.eta.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "train_size" => self.train_size.to_string(),
            "pop_eval_size" => self.pop_eval_size.to_string(),
            "ood_size" => self.ood_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_size" => self.eval_size.to_string(),
            "init_std" => self.init_std.to_string(),
            "seeds" => join(&self.seeds),
            "delta" => self.delta.to_string(),
            "c1" => self.c1.to_string(),
            "c2" => self.c2.to_string(),
            "table_alpha" => self.table_alpha.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// The resolved configuration in the file format, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.value(k));
        }
        s
    }

    /// SHA-256 of [`to_text`](Self::to_text), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(usage(format!("noise level {a} outside [0, 1)")));
        }
        self.task(0.0).validate().map_err(|e| usage(e.to_string()))?;
        self.train(0).validate().map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    pub fn task(&self, alpha: f64) -> TaskConfig {
        TaskConfig {
            vocab_size: self.vocab_size,
            context_len: self.context_len,
            embed_dim: self.embed_dim,
            triggers: self.triggers.clone(),
            outputs: self.outputs.clone(),
            noise_level: 0.0,
            max_qy_bigrams: self.max_qy_bigrams,
        }
        .with_noise(alpha)
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
            optimizer: self.optimizer,
            gradient: self.gradient,
            sampler: Sampler::Standard,
            eval_every: self.eval_every,
            eval_size: self.eval_size,
            init_std: self.init_std,
            ..TrainConfig::default()
        }
    }

    /// The configuration of one run, as written next to its outputs.
    pub fn for_run(&self, model: ModelId, alpha: f64, seed: u64) -> ExperimentSpec {
        ExperimentSpec { models: vec![model], alphas: vec![alpha], seeds: vec![seed], ..self.clone() }
    }

    /// Key reference for `--help`.
    pub fn key_help() -> String {
        let d = ExperimentSpec::default();
        let mut s = String::from("Configuration keys (key = value, `#` comments):\n");
        for (k, doc) in KEYS {
            let _ = writeln!(s, "  {k:<15} {doc} [default: {}]", d.value(k));
        }
        s
    }
}
