//! Normalized and plain gradient descent for every parameterization.
//!
//! Normalized steps are taken per parameter block: the `λ` vector, the
//! scale `s`, `γ`, and each dense matrix are divided by their own Euclidean
//! (Frobenius) norm. A scalar block therefore moves by exactly `η` in the
//! direction of `−sign(∂L)`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::{check_flip, cosine_to_target};
use crate::data::{
    sample_b4_variant, sample_ood_sentence, sample_sentence, DatasetStats, Sentence,
    TaskConfig, Token,
};
use crate::embedding::{embed_sequence, Embedded};
use crate::error::{config_err, domain_err, Result};
use crate::losses::{
    ce_grad_into, empirical_loss, empirical_loss_grad, estimate_alpha_gamma, log_sum_exp,
    population_loss_noiseless_grad, population_loss_noisy_linear_grad, qy_counts, target_loss,
    CountSource, Target,
};
use crate::model::{
    backward_dense, closed_form_jacobian, forward_batch, frobenius_norm, l2_norm, AttentionKind, BatchForward,
    DenseGrads, Family, Logits, ModelId, ModelParams, Scalars, Scheme, SentenceCounts,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Per-block normalized gradient descent.
    Normalized,
    /// Plain gradient descent.
    Plain,
}

/// How the reparameterized models estimate the population gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientSource {
    /// A fresh sampled batch per step.
    Batch,
    /// The exact expectation over the sampler's `C_{q,y}` histogram with
    /// uniform triggers. Linear and ReLU schemes only.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Standard,
    /// Single trigger, two outputs, fixed token before the query.
    SingleTrigger,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub gradient: GradientSource,
    pub sampler: Sampler,
    /// A block whose gradient norm is at or below this is left unchanged
    /// and the step is recorded as a stall.
    pub stall_threshold: f64,
    /// Probe and OOD sets are evaluated every `eval_every` steps and at the
    /// last step.
    pub eval_every: usize,
    pub eval_size: usize,
    /// Standard deviation of the unconstrained models' initial entries; 0
    /// starts them at zero.
    pub init_std: f64,
    pub lambda0: f64,
    /// Initial value scale for softmax models; `None` uses
    /// [`initial_scale`].
    pub s0: Option<f64>,
    /// Train `γ` as well; otherwise it stays at `ln(α/(1−α))`.
    pub train_gamma: bool,
    /// Target direction for [`cosine_to_target`] tracking of `W`.
    pub w_star: Option<Array2<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.1,
            steps: 2000,
            batch_size: 512,
            seed: 0,
            optimizer: Optimizer::Normalized,
            gradient: GradientSource::Batch,
            sampler: Sampler::Standard,
            stall_threshold: 0.0,
            eval_every: 10,
            eval_size: 512,
            init_std: 0.0,
            lambda0: 0.0,
            s0: None,
            train_gamma: false,
            w_star: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return config_err(format!("learning rate {} must be positive", self.eta));
        }
        if self.batch_size == 0 || self.eval_size == 0 {
            return config_err("batch and evaluation sizes must be positive");
        }
        if self.eval_every == 0 {
            return config_err("evaluation period must be positive");
        }
        Ok(())
    }
}

/// Initial value scale `(|Q| ln H + 2) / 2` for softmax attention.
pub fn initial_scale(n_triggers: usize, context_len: usize) -> f64 {
    (n_triggers as f64 * (context_len as f64).ln() + 2.0) / 2.0
}

/// End of the first softmax phase, `⌈|Q| ln H / (2η)⌉`.
pub fn phase_one_length(n_triggers: usize, context_len: usize, eta: f64) -> usize {
    (n_triggers as f64 * (context_len as f64).ln() / (2.0 * eta)).ceil() as usize
}

/// `γ = ln(α / (1 − α))`.
pub fn noise_log_odds(alpha: f64) -> f64 {
    (alpha / (1.0 - alpha)).ln()
}

/// Layer-wise logit summary, averaged over a sentence set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogitSummary {
    pub xi_a_y: f64,
    pub xi_a_tau: f64,
    pub xi_f_y: f64,
    pub xi_f_tau: f64,
    pub xi_a_maxother: f64,
    pub xi_f_maxother: f64,
    /// Fraction of sentences meeting the flip condition.
    pub flip_frac: f64,
}

#[derive(Default)]
struct SummaryAcc {
    sum: LogitSummary,
    n: usize,
}

impl SummaryAcc {
    fn add(&mut self, l: &Logits, y: Token, tau: Token) {
        let k = l.vocab();
        let get = |v: &ndarray::Array1<f64>, t: Token| if t <= k { v[t - 1] } else { 0.0 };
        let max_except = |v: &ndarray::Array1<f64>, t: Token| {
            v.iter()
                .enumerate()
                .filter(|&(j, _)| j + 1 != t)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let s = &mut self.sum;
        s.xi_a_y += get(&l.xi_attn, y);
        s.xi_a_tau += get(&l.xi_attn, tau);
        s.xi_f_y += get(&l.xi_ff, y);
        s.xi_f_tau += get(&l.xi_ff, tau);
        s.xi_a_maxother += max_except(&l.xi_attn, y);
        s.xi_f_maxother += max_except(&l.xi_ff, tau);
        s.flip_frac += f64::from(u8::from(k >= tau && check_flip(l, y, tau)));
        self.n += 1;
    }

    fn finish(self) -> LogitSummary {
        let n = self.n.max(1) as f64;
        let s = self.sum;
        LogitSummary {
            xi_a_y: s.xi_a_y / n,
            xi_a_tau: s.xi_a_tau / n,
            xi_f_y: s.xi_f_y / n,
            xi_f_tau: s.xi_f_tau / n,
            xi_a_maxother: s.xi_a_maxother / n,
            xi_f_maxother: s.xi_f_maxother / n,
            flip_frac: s.flip_frac / n,
        }
    }
}

/// One row of a trajectory. Unavailable quantities are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Values for [`TrainTrajectory::param_names`].
    pub params: Vec<f64>,
    pub loss_pop: f64,
    pub loss_emp: f64,
    pub loss_ood: f64,
    pub grad_norm: f64,
    pub cos_wstar: f64,
    pub logits: LogitSummary,
    /// Mean and minimum predicted probability of the OOD output.
    pub p_ood_y: f64,
    pub p_ood_y_min: f64,
    /// Mean predicted probability of `τ` on OOD sentences.
    pub p_ood_tau: f64,
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrajectory {
    pub model: String,
    pub param_names: Vec<String>,
    pub records: Vec<StepRecord>,
}

impl TrainTrajectory {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.param_names.iter().position(|n| n == name)?;
        Some(self.records.iter().map(|r| r.params[i]).collect())
    }

    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("trajectories hold step 0")
    }

    pub fn stall_steps(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.stalled).map(|r| r.step).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trajectory: TrainTrajectory,
    pub params: ModelParams,
    pub stats: Option<DatasetStats>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const PROBE_STREAM: u64 = 1 << 40;
const OOD_STREAM: u64 = 1 << 41;
const INIT_STREAM: u64 = 1 << 42;

/// Sentences drawn from `sampler`, reproducible from `(seed, stream)`.
pub fn sample_batch(cfg: &TaskConfig, sampler: Sampler, n: usize, seed: u64, stream: u64) -> Result<Vec<Sentence>> {
    let mut rng = rng_for(seed, stream);
    (0..n)
        .map(|_| match sampler {
            Sampler::Standard => sample_sentence(cfg, &mut rng),
            Sampler::SingleTrigger => sample_b4_variant(cfg, &mut rng),
        })
        .collect()
}

/// OOD sentences with a test output drawn per sentence.
pub fn sample_ood_batch(cfg: &TaskConfig, n: usize, seed: u64, stream: u64) -> Result<Vec<Sentence>> {
    let mut rng = rng_for(seed, stream);
    (0..n).map(|_| sample_ood_sentence(cfg, &mut rng)).collect()
}

fn target_of(s: &Sentence, alpha: Option<f64>, tau: Token) -> Target {
    match alpha {
        Some(a) if a > 0.0 => Target::Mix { output: s.output, noise: tau, alpha: a },
        _ => Target::Label(s.label()),
    }
}

/// A fixed sentence set in the representation the model needs.
struct EvalSet {
    sentences: Vec<Sentence>,
    embedded: Vec<Embedded>,
    counts: Vec<SentenceCounts>,
}

impl EvalSet {
    fn new(cfg: &TaskConfig, params: &ModelParams, sentences: Vec<Sentence>) -> Result<EvalSet> {
        let dense = !matches!(params.family, Family::Reparam(_));
        let embedded = if dense {
            sentences.iter().map(|s| embed_sequence(params.basis(), s)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let counts = if dense {
            Vec::new()
        } else {
            sentences
                .iter()
                .map(|s| SentenceCounts::from_sentence(cfg.vocab_size, &cfg.triggers, s))
                .collect::<Result<_>>()?
        };
        Ok(EvalSet { sentences, embedded, counts })
    }

    fn logits(&self, params: &ModelParams) -> Result<Vec<Logits>> {
        if self.counts.is_empty() && !self.sentences.is_empty() {
            let fw = forward_batch(params, &self.embedded);
            Ok((0..fw.len()).map(|i| fw.logits(i)).collect())
        } else {
            self.counts.iter().map(|c| params.closed_form(c)).collect()
        }
    }
}

struct Evaluation {
    loss: f64,
    p_y: f64,
    p_y_min: f64,
    p_tau: f64,
    summary: LogitSummary,
}

fn evaluate(set: &EvalSet, params: &ModelParams, alpha: Option<f64>) -> Result<Evaluation> {
    let tau = params.noise_token();
    let logits = set.logits(params)?;
    let mut acc = SummaryAcc::default();
    let (mut loss, mut p_y, mut p_tau) = (0.0, 0.0, 0.0);
    let mut p_y_min = f64::INFINITY;
    for (l, s) in logits.iter().zip(&set.sentences) {
        let xi = l.xi.as_slice().expect("contiguous");
        loss += target_loss(xi, &target_of(s, alpha, tau));
        let lse = log_sum_exp(xi);
        let py = (xi[s.output - 1] - lse).exp();
        p_y += py;
        p_y_min = p_y_min.min(py);
        if l.vocab() >= tau {
            p_tau += (xi[tau - 1] - lse).exp();
        }
        acc.add(l, s.output, tau);
    }
    let n = set.sentences.len().max(1) as f64;
    Ok(Evaluation { loss: loss / n, p_y: p_y / n, p_y_min, p_tau: p_tau / n, summary: acc.finish() })
}

/// Scalar gradient of a fully reparameterized model.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrad {
    pub loss: f64,
    pub lambda: Vec<f64>,
    pub s: f64,
    pub gamma: f64,
}

/// Mean loss over the batch and its gradient in `(λ, s, γ)`, from the
/// closed-form logits.
pub fn reparam_batch_grad(params: &ModelParams, counts: &[SentenceCounts], targets: &[Target]) -> Result<ScalarGrad> {
    let Family::Reparam(scheme) = params.family else {
        return domain_err("scalar gradients need a fully reparameterized model");
    };
    let k = params.out_vocab();
    let mut g = ScalarGrad { loss: 0.0, lambda: vec![0.0; params.scalars.lambda.len()], s: 0.0, gamma: 0.0 };
    let mut buf = vec![0.0; k];
    for (c, t) in counts.iter().zip(targets) {
        let at = params
            .scalar_point(c.trigger)
            .ok_or_else(|| crate::Error::Domain(format!("no scalar for trigger {}", c.trigger)))?;
        let (l, jac) = closed_form_jacobian(scheme, params.kind, at, c, k)?;
        g.loss += ce_grad_into(l.xi.as_slice().expect("contiguous"), t, &mut buf);
        let dot = |v: &ndarray::Array1<f64>| v.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
        let li = lambda_slot(params, scheme, c.trigger);
        g.lambda[li] += dot(&jac.d_lambda);
        g.s += dot(&jac.d_s);
        g.gamma += dot(&jac.d_gamma);
    }
    let n = counts.len().max(1) as f64;
    g.loss /= n;
    g.lambda.iter_mut().for_each(|x| *x /= n);
    g.s /= n;
    g.gamma /= n;
    Ok(g)
}

fn lambda_slot(params: &ModelParams, scheme: Scheme, q: Token) -> usize {
    if scheme.is_noisy() {
        0
    } else {
        params.triggers().iter().position(|&t| t == q).expect("trigger checked by scalar_point")
    }
}

/// Scalar gradient read off the dense gradient: `⟨∂L/∂W, ∂W/∂λ_q⟩`,
/// `trace(∂L/∂V)` for `s`, and `⟨∂L/∂F, ∂F/∂γ⟩`. An independent route to
/// [`reparam_batch_grad`].
pub fn reparam_grad_by_projection(params: &ModelParams, dense: &DenseGrads) -> Result<ScalarGrad> {
    let Family::Reparam(scheme) = params.family else {
        return domain_err("projection needs a fully reparameterized model");
    };
    let basis = params.basis();
    let triggers = params.triggers();
    let nl = params.scalars.lambda.len();
    let mut lambda = vec![0.0; nl];
    for (i, l) in lambda.iter_mut().enumerate() {
        let mut unit = vec![0.0; nl];
        unit[i] = 1.0;
        let dw = crate::model::memory_w(basis, triggers, scheme, &unit);
        *l = crate::model::frobenius_dot(&dense.w, &dw);
    }
    let s = if scheme.is_softmax() { dense.v.diag().sum() } else { 0.0 };
    let gamma = if scheme.is_noisy() {
        let row = basis.e_index(params.noise_token());
        triggers.iter().map(|&q| dense.f[[row, basis.e_index(q)]]).sum()
    } else {
        0.0
    };
    Ok(ScalarGrad { loss: dense.loss, lambda, s, gamma })
}

/// One normalized (or plain) step on a block; returns `false` on a stall.
fn step_block(x: &mut [f64], g: &[f64], eta: f64, opt: Optimizer, stall: f64) -> bool {
    let norm = l2_norm(g.iter());
    if !(norm > stall) {
        return false;
    }
    // eta / norm would overflow for subnormal norms.
    let div = match opt {
        Optimizer::Normalized => norm,
        Optimizer::Plain => 1.0,
    };
    for (xi, gi) in x.iter_mut().zip(g) {
        *xi -= eta * (gi / div);
    }
    true
}

fn step_scalar(x: &mut f64, g: f64, eta: f64, opt: Optimizer, stall: f64) -> bool {
    let mut v = [*x];
    let ok = step_block(&mut v, &[g], eta, opt, stall);
    *x = v[0];
    ok
}

/// Normalized step on scalar parameters: `x ← x − η g / ‖g‖`. A zero
/// gradient leaves `x` unchanged and returns `false`.
pub fn ngd_step_scalars(x: &mut [f64], grad: &[f64], eta: f64) -> bool {
    step_block(x, grad, eta, Optimizer::Normalized, 0.0)
}

fn step_matrix(x: &mut Array2<f64>, g: &Array2<f64>, eta: f64, opt: Optimizer, stall: f64) -> bool {
    let norm = frobenius_norm(g);
    if !(norm > stall) {
        return false;
    }
    let div = match opt {
        Optimizer::Normalized => norm,
        Optimizer::Plain => 1.0,
    };
    x.zip_mut_with(g, |xi, gi| *xi -= eta * (gi / div));
    true
}

/// Builds the initial parameters of a grid model.
pub fn init_params(cfg: &TaskConfig, model: ModelId, tcfg: &TrainConfig, gamma: Option<f64>) -> Result<ModelParams> {
    let noisy = cfg.is_noisy();
    let s0 = tcfg.s0.unwrap_or_else(|| initial_scale(cfg.triggers.len(), cfg.context_len));
    let gamma = if noisy {
        Some(gamma.unwrap_or_else(|| noise_log_odds(cfg.noise_level)))
    } else {
        None
    };
    match model.family_for(noisy) {
        Family::Origin => {
            let mut rng = rng_for(tcfg.seed, INIT_STREAM);
            ModelParams::origin_random(cfg, model.kind, noisy, tcfg.init_std, &mut rng)
        }
        Family::ReparamW => {
            let d = cfg.embed_dim;
            let s = (model.kind == AttentionKind::Softmax).then_some(s0);
            ModelParams::reparam_w(cfg, model.kind, noisy, Array2::zeros((d, d)), s, gamma)
        }
        Family::Reparam(scheme) => {
            let nl = if scheme.is_noisy() { 1 } else { cfg.triggers.len() };
            let scalars = Scalars {
                lambda: vec![tcfg.lambda0; nl],
                s: scheme.is_softmax().then_some(s0),
                gamma,
            };
            ModelParams::reparam(cfg, scheme, model.kind, scalars)
        }
    }
}

/// Names of the logged parameter columns.
pub fn param_names(params: &ModelParams) -> Vec<String> {
    let mut names = Vec::new();
    match params.family {
        Family::Origin => names.extend(["norm_v", "norm_w", "norm_f"].map(String::from)),
        Family::ReparamW => names.push("norm_w".into()),
        Family::Reparam(scheme) => {
            if scheme.is_noisy() {
                names.push("lambda".into());
            } else {
                names.extend(params.triggers().iter().map(|q| format!("lambda_{q}")));
            }
        }
    }
    if params.scalars.s.is_some() {
        names.push("s".into());
    }
    if params.scalars.gamma.is_some() {
        names.push("gamma".into());
    }
    names
}

fn param_values(params: &ModelParams) -> Vec<f64> {
    let mut v = Vec::new();
    match params.family {
        Family::Origin => v.extend([&params.v, &params.w, &params.f].map(frobenius_norm)),
        Family::ReparamW => v.push(frobenius_norm(&params.w)),
        Family::Reparam(_) => v.extend(&params.scalars.lambda),
    }
    v.extend(params.scalars.s);
    v.extend(params.scalars.gamma);
    v
}

fn cosine(params: &ModelParams, tcfg: &TrainConfig) -> f64 {
    match &tcfg.w_star {
        Some(ws) => cosine_to_target(&params.w, ws).unwrap_or(f64::NAN),
        None => f64::NAN,
    }
}

/// Gradient of a step plus what gets logged about it.
struct StepGrad {
    loss: f64,
    norm: f64,
    update: Update,
}

enum Update {
    Scalars(ScalarGrad),
    Dense(DenseGrads),
    /// Exact noiseless gradient in `λ`.
    Lambda(Vec<f64>),
    /// Exact noisy gradient in `(λ, γ)`.
    LambdaGamma(f64, f64),
}

fn apply(params: &mut ModelParams, u: &Update, tcfg: &TrainConfig) -> bool {
    let (eta, opt, st) = (tcfg.eta, tcfg.optimizer, tcfg.stall_threshold);
    let softmax_s = params.scalars.s.is_some();
    let mut moved = false;
    match u {
        Update::Scalars(g) => {
            moved |= step_block(&mut params.scalars.lambda, &g.lambda, eta, opt, st);
            if softmax_s {
                moved |= step_scalar(params.scalars.s.as_mut().expect("checked"), g.s, eta, opt, st);
            }
            if tcfg.train_gamma {
                if let Some(gm) = params.scalars.gamma.as_mut() {
                    moved |= step_scalar(gm, g.gamma, eta, opt, st);
                }
            }
        }
        Update::Lambda(g) => moved |= step_block(&mut params.scalars.lambda, g, eta, opt, st),
        Update::LambdaGamma(dl, dg) => {
            moved |= step_scalar(&mut params.scalars.lambda[0], *dl, eta, opt, st);
            if tcfg.train_gamma {
                if let Some(gm) = params.scalars.gamma.as_mut() {
                    moved |= step_scalar(gm, *dg, eta, opt, st);
                }
            }
        }
        Update::Dense(g) => match params.family {
            Family::Origin => {
                moved |= step_matrix(&mut params.v, &g.v, eta, opt, st);
                moved |= step_matrix(&mut params.w, &g.w, eta, opt, st);
                moved |= step_matrix(&mut params.f, &g.f, eta, opt, st);
            }
            Family::ReparamW => {
                moved |= step_matrix(&mut params.w, &g.w, eta, opt, st);
                if softmax_s {
                    let ds = g.v.diag().sum();
                    moved |= step_scalar(params.scalars.s.as_mut().expect("checked"), ds, eta, opt, st);
                }
                if tcfg.train_gamma {
                    let dg = gamma_grad(params, g);
                    if let Some(gm) = params.scalars.gamma.as_mut() {
                        moved |= step_scalar(gm, dg, eta, opt, st);
                    }
                }
            }
            Family::Reparam(_) => unreachable!("scalar models use closed-form gradients"),
        },
    }
    params.rebuild();
    moved
}

fn gamma_grad(params: &ModelParams, g: &DenseGrads) -> f64 {
    let basis = params.basis();
    let row = basis.e_index(params.noise_token());
    params.triggers().iter().map(|&q| g.f[[row, basis.e_index(q)]]).sum()
}

fn trainable_norm(params: &ModelParams, u: &Update, train_gamma: bool) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let s_on = params.scalars.s.is_some();
    match u {
        Update::Scalars(g) => {
            sq(&g.lambda)
                + if s_on { g.s * g.s } else { 0.0 }
                + if train_gamma { g.gamma * g.gamma } else { 0.0 }
        }
        Update::Lambda(g) => sq(g),
        Update::LambdaGamma(dl, dg) => dl * dl + if train_gamma { dg * dg } else { 0.0 },
        Update::Dense(g) => {
            let fsq = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>();
            match params.family {
                Family::Origin => fsq(&g.v) + fsq(&g.w) + fsq(&g.f),
                _ => {
                    let ds = if s_on { g.v.diag().sum() } else { 0.0 };
                    let dg = if train_gamma { gamma_grad(params, g) } else { 0.0 };
                    fsq(&g.w) + ds * ds + dg * dg
                }
            }
        }
    }
    .sqrt()
}

fn batch_grad(
    cfg: &TaskConfig,
    params: &ModelParams,
    batch: &[Sentence],
    targets: &[Target],
    tcfg: &TrainConfig,
) -> Result<StepGrad> {
    let update = match params.family {
        Family::Reparam(_) => {
            let counts = batch
                .iter()
                .map(|s| SentenceCounts::from_sentence(cfg.vocab_size, &cfg.triggers, s))
                .collect::<Result<Vec<_>>>()?;
            Update::Scalars(reparam_batch_grad(params, &counts, targets)?)
        }
        _ => {
            let emb = batch.iter().map(|s| embed_sequence(params.basis(), s)).collect::<Result<Vec<_>>>()?;
            let (_, g) = backward_dense(params, &emb, targets);
            Update::Dense(g)
        }
    };
    let loss = match &update {
        Update::Scalars(g) => g.loss,
        Update::Dense(g) => g.loss,
        _ => unreachable!(),
    };
    let norm = trainable_norm(params, &update, tcfg.train_gamma);
    Ok(StepGrad { loss, norm, update })
}

fn exact_grad(cfg: &TaskConfig, params: &ModelParams, tcfg: &TrainConfig) -> Result<StepGrad> {
    let hist = cfg.qy_count_histogram();
    let (loss, update) = match params.family {
        Family::Reparam(Scheme::NoiselessLinear) => {
            let src = CountSource::Histogram(&hist);
            let (l, g) = population_loss_noiseless_grad(&params.scalars.lambda, src, cfg.vocab_size);
            (l, Update::Lambda(g))
        }
        Family::Reparam(Scheme::NoisyLinear) => {
            let gamma = params.scalars.gamma.expect("noisy scheme has gamma");
            let lambda = params.scalars.lambda[0];
            let (l, dl, dg) =
                population_loss_noisy_linear_grad(lambda, gamma, cfg.noise_level, &hist, cfg.vocab_size)?;
            (l, Update::LambdaGamma(dl, dg))
        }
        _ => return domain_err("exact population gradients exist only for linear and ReLU schemes"),
    };
    let norm = trainable_norm(params, &update, tcfg.train_gamma);
    Ok(StepGrad { loss, norm, update })
}

/// Population training of any grid model: a fresh batch (or the exact
/// expectation) per step, `T + 1` records including step 0.
pub fn train_population(cfg: &TaskConfig, model: ModelId, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    let mut params = init_params(cfg, model, tcfg, None)?;
    if tcfg.gradient == GradientSource::Exact && !matches!(params.family, Family::Reparam(_)) {
        return config_err("exact gradients are available only for fully reparameterized models");
    }
    let alpha = cfg.is_noisy().then_some(cfg.noise_level);
    let tau = cfg.noise_token();
    let probe = EvalSet::new(cfg, &params, sample_batch(cfg, tcfg.sampler, tcfg.eval_size, tcfg.seed, PROBE_STREAM)?)?;
    let ood = match tcfg.sampler {
        Sampler::Standard => Some(EvalSet::new(cfg, &params, sample_ood_batch(cfg, tcfg.eval_size, tcfg.seed, OOD_STREAM)?)?),
        Sampler::SingleTrigger => None,
    };
    let mut records = Vec::with_capacity(tcfg.steps + 1);
    let names = param_names(&params);
    for t in 0..=tcfg.steps {
        let grad = match tcfg.gradient {
            GradientSource::Exact => exact_grad(cfg, &params, tcfg)?,
            GradientSource::Batch => {
                let batch = sample_batch(cfg, tcfg.sampler, tcfg.batch_size, tcfg.seed, t as u64)?;
                let targets: Vec<Target> = batch.iter().map(|s| target_of(s, alpha, tau)).collect();
                batch_grad(cfg, &params, &batch, &targets, tcfg)?
            }
        };
        let eval_now = t % tcfg.eval_every == 0 || t == tcfg.steps;
        let mut rec = StepRecord {
            step: t,
            params: param_values(&params),
            loss_pop: grad.loss,
            loss_emp: f64::NAN,
            loss_ood: f64::NAN,
            grad_norm: grad.norm,
            cos_wstar: cosine(&params, tcfg),
            logits: LogitSummary::default(),
            p_ood_y: f64::NAN,
            p_ood_y_min: f64::NAN,
            p_ood_tau: f64::NAN,
            stalled: false,
        };
        if eval_now {
            rec.logits = evaluate(&probe, &params, alpha)?.summary;
            if let Some(ood) = &ood {
                let e = evaluate(ood, &params, alpha)?;
                rec.loss_ood = e.loss;
                rec.p_ood_y = e.p_y;
                rec.p_ood_y_min = e.p_y_min;
                rec.p_ood_tau = e.p_tau;
            }
        } else {
            rec.logits = LogitSummary {
                xi_a_y: f64::NAN,
                xi_a_tau: f64::NAN,
                xi_f_y: f64::NAN,
                xi_f_tau: f64::NAN,
                xi_a_maxother: f64::NAN,
                xi_f_maxother: f64::NAN,
                flip_frac: f64::NAN,
            };
        }
        if t < tcfg.steps {
            rec.stalled = !apply(&mut params, &grad.update, tcfg);
        }
        records.push(rec);
    }
    let trajectory = TrainTrajectory { model: model.to_string(), param_names: names, records };
    Ok(TrainOutcome { trajectory, params, stats: None })
}

/// Alias of [`train_population`] for the dense models.
pub fn train_full(cfg: &TaskConfig, model: ModelId, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    if model.family_for(cfg.is_noisy()) == Family::Origin || model.family_for(cfg.is_noisy()) == Family::ReparamW {
        train_population(cfg, model, tcfg)
    } else {
        config_err(format!("{model} has no dense trainable matrices"))
    }
}

/// Trains on a fixed dataset for `epochs` passes of shuffled minibatches.
/// Noisy models use `γ̂` estimated from the data in place of the true log
/// odds.
pub fn train_finite(
    cfg: &TaskConfig,
    model: ModelId,
    dataset: &[Sentence],
    epochs: usize,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if dataset.is_empty() {
        return domain_err("empty dataset");
    }
    let stats = if cfg.is_noisy() { Some(estimate_alpha_gamma(dataset)?) } else { None };
    let mut params = init_params(cfg, model, tcfg, stats.as_ref().map(|s| s.gamma_hat))?;
    let alpha = cfg.is_noisy().then_some(cfg.noise_level);
    let probe = EvalSet::new(cfg, &params, sample_batch(cfg, Sampler::Standard, tcfg.eval_size, tcfg.seed, PROBE_STREAM)?)?;
    let ood = EvalSet::new(cfg, &params, sample_ood_batch(cfg, tcfg.eval_size, tcfg.seed, OOD_STREAM)?)?;
    let names = param_names(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let per_epoch = dataset.len().div_ceil(tcfg.batch_size);
    let total = epochs * per_epoch;
    let mut records = Vec::with_capacity(total + 1);
    let mut step = 0;
    for epoch in 0..=epochs {
        let mut rng = rng_for(tcfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<Sentence> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let targets: Vec<Target> = batch.iter().map(|s| Target::Label(s.label())).collect();
            let grad = batch_grad(cfg, &params, &batch, &targets, tcfg)?;
            let e = evaluate(&probe, &params, alpha)?;
            let o = evaluate(&ood, &params, alpha)?;
            let mut rec = StepRecord {
                step,
                params: param_values(&params),
                loss_pop: e.loss,
                loss_emp: grad.loss,
                loss_ood: o.loss,
                grad_norm: grad.norm,
                cos_wstar: cosine(&params, tcfg),
                logits: e.summary,
                p_ood_y: o.p_y,
                p_ood_y_min: o.p_y_min,
                p_ood_tau: o.p_tau,
                stalled: false,
            };
            if step < total {
                rec.stalled = !apply(&mut params, &grad.update, tcfg);
            }
            records.push(rec);
            step += 1;
            if step > total {
                break;
            }
        }
        if step > total {
            break;
        }
    }
    let trajectory = TrainTrajectory { model: model.to_string(), param_names: names, records };
    Ok(TrainOutcome { trajectory, params, stats })
}

/// The unknown-noise algorithm: estimate `α̂`, `γ̂` once, then run
/// normalized gradient descent on `L_emp(λ)` over the noisy linear scheme.
/// `Optimizer::Plain` takes raw steps `λ ← λ − η L_emp'(λ)` instead.
///
/// `kind` must be linear or ReLU. The population loss is evaluated
/// exactly with the true noise level of `cfg`.
pub fn algorithm1(
    cfg: &TaskConfig,
    kind: AttentionKind,
    dataset: &[Sentence],
    tcfg: &TrainConfig,
) -> Result<(TrainOutcome, DatasetStats)> {
    cfg.validate()?;
    tcfg.validate()?;
    if kind == AttentionKind::Softmax {
        return config_err("the unknown-noise algorithm trains the linear or ReLU scheme");
    }
    let stats = estimate_alpha_gamma(dataset)?;
    let counts = qy_counts(dataset);
    let n = cfg.vocab_size;
    let scalars = Scalars { lambda: vec![tcfg.lambda0], s: None, gamma: Some(stats.gamma_hat) };
    let mut params = ModelParams::reparam(cfg, Scheme::NoisyLinear, kind, scalars)?;
    let hist = cfg.qy_count_histogram();
    let ood = EvalSet::new(cfg, &params, sample_ood_batch(cfg, tcfg.eval_size, tcfg.seed, OOD_STREAM)?)?;
    let probe_sentences = sample_batch(cfg, Sampler::Standard, tcfg.eval_size, tcfg.seed, PROBE_STREAM)?;
    let probe = EvalSet::new(cfg, &params, probe_sentences)?;
    let alpha = Some(cfg.noise_level).filter(|&a| a > 0.0);
    let mut records = Vec::with_capacity(tcfg.steps + 1);
    for t in 0..=tcfg.steps {
        let lambda = params.scalars.lambda[0];
        let loss_emp = empirical_loss(lambda, &stats, &counts, n)?;
        let d = empirical_loss_grad(lambda, &stats, &counts, n)?;
        if !(d < 0.0) {
            return domain_err(format!("empirical loss derivative {d} is not negative at step {t}"));
        }
        let loss_pop = match alpha {
            Some(a) => population_loss_noisy_linear_grad(lambda, stats.gamma_hat, a, &hist, n)?.0,
            None => f64::NAN,
        };
        let eval_now = t % tcfg.eval_every == 0 || t == tcfg.steps;
        let mut rec = StepRecord {
            step: t,
            params: param_values(&params),
            loss_pop,
            loss_emp,
            loss_ood: f64::NAN,
            grad_norm: d.abs(),
            cos_wstar: f64::NAN,
            logits: LogitSummary::default(),
            p_ood_y: f64::NAN,
            p_ood_y_min: f64::NAN,
            p_ood_tau: f64::NAN,
            stalled: false,
        };
        if eval_now {
            let o = evaluate(&ood, &params, alpha)?;
            rec.loss_ood = o.loss;
            rec.p_ood_y = o.p_y;
            rec.p_ood_y_min = o.p_y_min;
            rec.p_ood_tau = o.p_tau;
            rec.logits = evaluate(&probe, &params, alpha)?.summary;
        }
        if t < tcfg.steps {
            rec.stalled = !step_scalar(&mut params.scalars.lambda[0], d, tcfg.eta, tcfg.optimizer, tcfg.stall_threshold);
            params.rebuild();
        }
        records.push(rec);
    }
    let names = param_names(&params);
    let trajectory = TrainTrajectory { model: format!("Reparam-{kind}"), param_names: names, records };
    Ok((TrainOutcome { trajectory, params, stats: Some(stats.clone()) }, stats))
}

/// Which dense matrix a finite-difference probe perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    V,
    W,
    F,
}

/// Central difference of the mean batch loss in one matrix entry.
pub fn finite_difference(
    params: &ModelParams,
    batch: &[Embedded],
    targets: &[Target],
    block: Block,
    at: (usize, usize),
    h: f64,
) -> f64 {
    let loss = |p: &ModelParams| -> f64 {
        let fw: BatchForward = forward_batch(p, batch);
        (0..fw.len())
            .map(|i| target_loss(fw.xi(i).as_slice().expect("contiguous"), &targets[i]))
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut p = params.clone();
    let x0 = block_mut(&mut p, block)[at];
    block_mut(&mut p, block)[at] = x0 + h;
    let up = loss(&p);
    block_mut(&mut p, block)[at] = x0 - h;
    let down = loss(&p);
    (up - down) / (2.0 * h)
}

fn block_mut(p: &mut ModelParams, block: Block) -> &mut Array2<f64> {
    match block {
        Block::V => &mut p.v,
        Block::W => &mut p.w,
        Block::F => &mut p.f,
    }
}
