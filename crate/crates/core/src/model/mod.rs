//! The one-layer transformer and its parameterizations.
//!
//! ```text
//! φ   = V Σ_h σ(x_Hᵀ W x_h) x_h
//! ξ_A = U φ
//! ξ_F = U F (x_H + φ)
//! ξ   = ξ_A + ξ_F
//! ```
//!
//! The unembedding `U` stacks `E(1..K)`: `K = N` for noiseless models and
//! `K = N + 1` (the noise token included) for noisy ones.

mod closed_form;
mod dense;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{TaskConfig, Token};
use crate::embedding::{standard_basis, EmbeddingBasis, Embedded};
use crate::error::{config_err, Error, Result};

pub use closed_form::{closed_form_jacobian, closed_form_logits, LogitJacobian, ScalarPoint, SentenceCounts};
pub use dense::{attention_weights, backward_dense, forward, forward_batch, BatchForward, DenseGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Linear,
    Relu,
    Softmax,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Linear, AttentionKind::Relu, AttentionKind::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Linear => "Linear",
            AttentionKind::Relu => "ReLU",
            AttentionKind::Softmax => "Softmax",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(AttentionKind::Linear),
            "relu" => Ok(AttentionKind::Relu),
            "softmax" => Ok(AttentionKind::Softmax),
            _ => Err(Error::Parse(format!("unknown attention kind {s:?}"))),
        }
    }
}

/// The four associative-memory constructions for `(V, W, F)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// `V = I`, `W = Σ_k λ_k E(k)Ẽ(k)ᵀ`, `F = 0`.
    NoiselessLinear,
    /// `V = sI`, `W = Σ_k λ_k E(k)(Ẽ(k) − Σ_{x∈[N], x≠k} Ẽ(x))ᵀ`, `F = 0`.
    NoiselessSoftmax,
    /// `V = I`, `W = λ Σ_q E(q)(Ẽ(q) − E(τ))ᵀ`,
    /// `F = E(τ) Σ_q (γ E(q) + Ẽ(q))ᵀ`.
    NoisyLinear,
    /// `V = sI`, `W = λ Σ_q E(q)(Ẽ(q) − 2E(τ) − Σ_{x∈[N], x≠q} Ẽ(x))ᵀ`,
    /// `F` as in the noisy linear scheme.
    NoisySoftmax,
}

impl Scheme {
    pub const ALL: [Scheme; 4] =
        [Scheme::NoiselessLinear, Scheme::NoiselessSoftmax, Scheme::NoisyLinear, Scheme::NoisySoftmax];

    pub fn for_kind(kind: AttentionKind, noisy: bool) -> Scheme {
        match (kind, noisy) {
            (AttentionKind::Softmax, false) => Scheme::NoiselessSoftmax,
            (AttentionKind::Softmax, true) => Scheme::NoisySoftmax,
            (_, false) => Scheme::NoiselessLinear,
            (_, true) => Scheme::NoisyLinear,
        }
    }

    pub fn is_noisy(self) -> bool {
        matches!(self, Scheme::NoisyLinear | Scheme::NoisySoftmax)
    }

    pub fn is_softmax(self) -> bool {
        matches!(self, Scheme::NoiselessSoftmax | Scheme::NoisySoftmax)
    }

    /// Attention kinds the construction is meant for.
    pub fn kinds(self) -> &'static [AttentionKind] {
        if self.is_softmax() {
            &[AttentionKind::Softmax]
        } else {
            &[AttentionKind::Linear, AttentionKind::Relu]
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::NoiselessLinear => "noiseless-linear",
            Scheme::NoiselessSoftmax => "noiseless-softmax",
            Scheme::NoisyLinear => "noisy-linear",
            Scheme::NoisySoftmax => "noisy-softmax",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown scheme {s:?}")))
    }
}

/// Which of `V`, `W`, `F` are free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// All three matrices dense and trainable.
    Origin,
    /// Dense trainable `W`; `V` and `F` follow the construction for the
    /// attention kind (with trainable `s` for softmax).
    ReparamW,
    /// Everything determined by the scalars `λ`, `s`, `γ`.
    Reparam(Scheme),
}

/// The nine models compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelId {
    pub family: FamilyTag,
    pub kind: AttentionKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FamilyTag {
    Origin,
    ReparamW,
    Reparam,
}

impl ModelId {
    pub const GRID: [ModelId; 9] = [
        ModelId { family: FamilyTag::Origin, kind: AttentionKind::Linear },
        ModelId { family: FamilyTag::Origin, kind: AttentionKind::Relu },
        ModelId { family: FamilyTag::Origin, kind: AttentionKind::Softmax },
        ModelId { family: FamilyTag::ReparamW, kind: AttentionKind::Linear },
        ModelId { family: FamilyTag::ReparamW, kind: AttentionKind::Relu },
        ModelId { family: FamilyTag::ReparamW, kind: AttentionKind::Softmax },
        ModelId { family: FamilyTag::Reparam, kind: AttentionKind::Softmax },
        ModelId { family: FamilyTag::Reparam, kind: AttentionKind::Linear },
        ModelId { family: FamilyTag::Reparam, kind: AttentionKind::Relu },
    ];

    pub fn family_for(self, noisy: bool) -> Family {
        match self.family {
            FamilyTag::Origin => Family::Origin,
            FamilyTag::ReparamW => Family::ReparamW,
            FamilyTag::Reparam => Family::Reparam(Scheme::for_kind(self.kind, noisy)),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            FamilyTag::Origin => write!(f, "Origin-{}", self.kind),
            FamilyTag::ReparamW => write!(f, "Reparam-{}-W", self.kind),
            FamilyTag::Reparam => write!(f, "Reparam-{}", self.kind),
        }
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelId::GRID
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown model id {s:?}")))
    }
}

/// Scalar parameters. `lambda` holds one entry per trigger (in the order of
/// `TaskConfig::triggers`) for noiseless schemes and a single shared entry
/// for noisy ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scalars {
    pub lambda: Vec<f64>,
    pub s: Option<f64>,
    pub gamma: Option<f64>,
}

/// Per-sentence logits over the `K` output tokens; index `j - 1` is token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub xi_attn: Array1<f64>,
    pub xi_ff: Array1<f64>,
    pub xi: Array1<f64>,
}

impl Logits {
    pub fn new(xi_attn: Array1<f64>, xi_ff: Array1<f64>) -> Logits {
        let xi = &xi_attn + &xi_ff;
        Logits { xi_attn, xi_ff, xi }
    }

    pub fn vocab(&self) -> usize {
        self.xi.len()
    }

    /// Logit of a 1-based token.
    pub fn at(&self, token: Token) -> f64 {
        self.xi[token - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub kind: AttentionKind,
    pub family: Family,
    pub noisy: bool,
    pub v: Array2<f64>,
    pub w: Array2<f64>,
    pub f: Array2<f64>,
    pub scalars: Scalars,
    basis: EmbeddingBasis,
    triggers: Vec<Token>,
}

impl ModelParams {
    pub fn basis(&self) -> &EmbeddingBasis {
        &self.basis
    }

    pub fn triggers(&self) -> &[Token] {
        &self.triggers
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Size `K` of the output vocabulary.
    pub fn out_vocab(&self) -> usize {
        self.basis.vocab_size() + usize::from(self.noisy)
    }

    pub fn noise_token(&self) -> Token {
        self.basis.vocab_size() + 1
    }

    /// Fully reparameterized model built from the scalars of `scheme`.
    pub fn reparam(cfg: &TaskConfig, scheme: Scheme, kind: AttentionKind, scalars: Scalars) -> Result<Self> {
        let basis = standard_basis(cfg)?;
        let nq = cfg.triggers.len();
        let want = if scheme.is_noisy() { 1 } else { nq };
        if scalars.lambda.len() != want {
            return config_err(format!(
                "{scheme} needs {want} attention scalar(s), got {}",
                scalars.lambda.len()
            ));
        }
        if scheme.is_softmax() && scalars.s.is_none() {
            return config_err(format!("{scheme} needs the value scale s"));
        }
        if scheme.is_noisy() && scalars.gamma.is_none() {
            return config_err(format!("{scheme} needs the feed-forward scalar gamma"));
        }
        let d = basis.dim();
        let mut p = ModelParams {
            kind,
            family: Family::Reparam(scheme),
            noisy: scheme.is_noisy(),
            v: Array2::zeros((d, d)),
            w: Array2::zeros((d, d)),
            f: Array2::zeros((d, d)),
            scalars,
            basis,
            triggers: cfg.triggers.clone(),
        };
        p.rebuild();
        Ok(p)
    }

    /// Dense `W`; `V` and `F` follow the construction for `kind`. Softmax
    /// requires `s`, noisy models require `gamma`.
    pub fn reparam_w(
        cfg: &TaskConfig,
        kind: AttentionKind,
        noisy: bool,
        w: Array2<f64>,
        s: Option<f64>,
        gamma: Option<f64>,
    ) -> Result<Self> {
        let basis = standard_basis(cfg)?;
        let d = basis.dim();
        if w.dim() != (d, d) {
            return config_err(format!("W must be {d}×{d}"));
        }
        if kind == AttentionKind::Softmax && s.is_none() {
            return config_err("softmax attention needs the value scale s");
        }
        if noisy && gamma.is_none() {
            return config_err("noisy models need the feed-forward scalar gamma");
        }
        let mut p = ModelParams {
            kind,
            family: Family::ReparamW,
            noisy,
            v: Array2::zeros((d, d)),
            w,
            f: Array2::zeros((d, d)),
            scalars: Scalars { lambda: Vec::new(), s: s.filter(|_| kind == AttentionKind::Softmax), gamma },
            basis,
            triggers: cfg.triggers.clone(),
        };
        p.rebuild();
        Ok(p)
    }

    /// Unconstrained model with the given matrices.
    pub fn origin(
        cfg: &TaskConfig,
        kind: AttentionKind,
        noisy: bool,
        v: Array2<f64>,
        w: Array2<f64>,
        f: Array2<f64>,
    ) -> Result<Self> {
        let basis = standard_basis(cfg)?;
        let d = basis.dim();
        if v.dim() != (d, d) || w.dim() != (d, d) || f.dim() != (d, d) {
            return config_err(format!("V, W, F must be {d}×{d}"));
        }
        Ok(ModelParams {
            kind,
            family: Family::Origin,
            noisy,
            v,
            w,
            f,
            scalars: Scalars::default(),
            basis,
            triggers: cfg.triggers.clone(),
        })
    }

    /// Unconstrained model with i.i.d. `N(0, std²)` entries.
    pub fn origin_random<R: Rng + ?Sized>(
        cfg: &TaskConfig,
        kind: AttentionKind,
        noisy: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        if !(std >= 0.0 && std.is_finite()) {
            return config_err(format!("initialization scale {std} must be finite and nonnegative"));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = || Array2::from_shape_simple_fn((d, d), || normal.sample(rng));
        let (v, w, f) = (draw(), draw(), draw());
        ModelParams::origin(cfg, kind, noisy, v, w, f)
    }

    /// Re-materializes the matrices that are functions of the scalars.
    pub fn rebuild(&mut self) {
        let d = self.dim();
        let s = self.scalars.s.unwrap_or(1.0);
        let gamma = self.scalars.gamma.unwrap_or(0.0);
        match self.family {
            Family::Origin => {}
            Family::ReparamW => {
                self.v = Array2::eye(d) * if self.kind == AttentionKind::Softmax { s } else { 1.0 };
                self.f = if self.noisy { memory_f(&self.basis, &self.triggers, gamma) } else { Array2::zeros((d, d)) };
            }
            Family::Reparam(scheme) => {
                self.v = Array2::eye(d) * if scheme.is_softmax() { s } else { 1.0 };
                self.w = memory_w(&self.basis, &self.triggers, scheme, &self.scalars.lambda);
                self.f = if scheme.is_noisy() { memory_f(&self.basis, &self.triggers, gamma) } else { Array2::zeros((d, d)) };
            }
        }
    }

    /// `λ` governing sentences with trigger `q`.
    pub fn lambda_for(&self, q: Token) -> Option<f64> {
        match self.family {
            Family::Reparam(s) if s.is_noisy() => self.scalars.lambda.first().copied(),
            Family::Reparam(_) => {
                let i = self.triggers.iter().position(|&t| t == q)?;
                self.scalars.lambda.get(i).copied()
            }
            _ => None,
        }
    }
}

/// `W` of a scheme. For noiseless schemes `lambda[i]` belongs to
/// `triggers[i]`; noisy schemes use `lambda[0]` for every trigger.
pub fn memory_w(basis: &EmbeddingBasis, triggers: &[Token], scheme: Scheme, lambda: &[f64]) -> Array2<f64> {
    let d = basis.dim();
    let n = basis.vocab_size();
    let tau = n + 1;
    let mut w = Array2::zeros((d, d));
    for (i, &q) in triggers.iter().enumerate() {
        let l = if scheme.is_noisy() { lambda[0] } else { lambda[i] };
        let row = basis.e_index(q);
        w[[row, basis.e_tilde_index(q)]] += l;
        if scheme.is_softmax() {
            for x in (1..=n).filter(|&x| x != q) {
                w[[row, basis.e_tilde_index(x)]] -= l;
            }
        }
        match scheme {
            Scheme::NoisyLinear => w[[row, basis.e_index(tau)]] -= l,
            Scheme::NoisySoftmax => w[[row, basis.e_index(tau)]] -= 2.0 * l,
            _ => {}
        }
    }
    w
}

/// `F = E(τ) Σ_q (γ E(q) + Ẽ(q))ᵀ`.
pub fn memory_f(basis: &EmbeddingBasis, triggers: &[Token], gamma: f64) -> Array2<f64> {
    let d = basis.dim();
    let tau = basis.vocab_size() + 1;
    let mut f = Array2::zeros((d, d));
    let row = basis.e_index(tau);
    for &q in triggers {
        f[[row, basis.e_index(q)]] += gamma;
        f[[row, basis.e_tilde_index(q)]] += 1.0;
    }
    f
}

/// Frobenius inner product.
pub fn frobenius_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Frobenius norm.
pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    l2_norm(a.iter())
}

/// Euclidean norm, rescaled by the largest entry so that tiny or huge
/// entries neither underflow nor overflow when squared.
pub fn l2_norm<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = xs.clone().fold(0.0f64, |m, x| m.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * xs.map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

/// Embeds a batch of contexts under the model's basis.
pub fn embed_batch(params: &ModelParams, contexts: &[&[Token]]) -> Result<Vec<Embedded>> {
    contexts
        .iter()
        .map(|c| crate::embedding::embed_tokens(params.basis(), c))
        .collect()
}
