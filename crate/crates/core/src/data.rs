//! Sentence generation and validation for the in-context recall task.
//!
//! Tokens are 1-based: the vocabulary is `1..=N` and the noise token is
//! `N + 1`. A sentence stores `z_1..z_{H+1}` in a zero-based vector, so
//! `tokens[h - 1]` is `z_h`.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, domain_err, Result};

pub type Token = usize;

/// Shape of the task: vocabulary, context length, trigger and output sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub triggers: Vec<Token>,
    pub outputs: Vec<Token>,
    pub noise_level: f64,
    /// Upper bound on planted `(q, y)` bigrams; the count is drawn uniformly
    /// from `1..=max_qy_bigrams`. The experimental sampler uses 1.
    pub max_qy_bigrams: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab_size: 60,
            context_len: 256,
            embed_dim: 128,
            triggers: (1..=5).collect(),
            outputs: (6..=9).collect(),
            noise_level: 0.0,
            max_qy_bigrams: 1,
        }
    }
}

impl TaskConfig {
    pub fn with_noise(mut self, alpha: f64) -> Self {
        self.noise_level = alpha;
        self
    }

    pub fn noise_token(&self) -> Token {
        self.vocab_size + 1
    }

    pub fn is_noisy(&self) -> bool {
        self.noise_level > 0.0
    }

    /// Tokens of `[N]` that are neither triggers nor outputs.
    pub fn neutral_tokens(&self) -> Vec<Token> {
        (1..=self.vocab_size)
            .filter(|t| !self.triggers.contains(t) && !self.outputs.contains(t))
            .collect()
    }

    /// Number of bigram slots the sampler must place.
    fn planted_pairs(&self) -> usize {
        self.max_qy_bigrams + usize::from(self.is_noisy())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vocab_size;
        if n == 0 {
            return config_err("vocabulary must be nonempty");
        }
        if self.triggers.is_empty() || self.outputs.is_empty() {
            return config_err("trigger and output sets must be nonempty");
        }
        let q: BTreeSet<_> = self.triggers.iter().copied().collect();
        let o: BTreeSet<_> = self.outputs.iter().copied().collect();
        if q.len() != self.triggers.len() || o.len() != self.outputs.len() {
            return config_err("trigger and output sets must not repeat tokens");
        }
        if q.iter().chain(o.iter()).any(|&t| t == 0 || t > n) {
            return config_err(format!("triggers and outputs must lie in 1..={n}"));
        }
        if !q.is_disjoint(&o) {
            return config_err("trigger and output sets overlap");
        }
        if self.neutral_tokens().is_empty() {
            return config_err("no filler tokens left outside triggers and outputs");
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return config_err(format!("noise level {} outside [0, 1)", self.noise_level));
        }
        if 2 * (n + 1) > self.embed_dim {
            return config_err(format!(
                "embedding dimension {} below 2(N+1) = {}",
                self.embed_dim,
                2 * (n + 1)
            ));
        }
        if self.max_qy_bigrams == 0 {
            return config_err("at least one (q, y) bigram is required");
        }
        // Pairs live in positions 1..=H-2, two positions each.
        if self.context_len < 4 || 2 * self.planted_pairs() > self.context_len - 2 {
            return config_err(format!(
                "context length {} too small to place {} bigrams",
                self.context_len,
                self.planted_pairs()
            ));
        }
        Ok(())
    }

    /// Exact distribution of the planted `(q, y)` count under the sampler.
    pub fn qy_count_histogram(&self) -> Vec<(usize, f64)> {
        let k = self.max_qy_bigrams;
        (1..=k).map(|c| (c, 1.0 / k as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    /// `z_1..z_{H+1}`.
    pub tokens: Vec<Token>,
    pub trigger: Token,
    pub output: Token,
    pub label_is_noise: bool,
}

impl Sentence {
    /// Context length `H`.
    pub fn context_len(&self) -> usize {
        self.tokens.len() - 1
    }

    /// `z_1..z_H`.
    pub fn context(&self) -> &[Token] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// `z_{H+1}`.
    pub fn label(&self) -> Token {
        *self.tokens.last().expect("sentence is nonempty")
    }
}

/// Counts of the training set used by the unknown-noise algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub size: usize,
    pub noise_count: usize,
    pub alpha_hat: f64,
    pub gamma_hat: f64,
}

/// Number of `h in 2..=H` with `(z_{h-1}, z_h) = (a, b)`.
pub fn count_bigram(s: &Sentence, a: Token, b: Token) -> usize {
    s.context().windows(2).filter(|w| w[0] == a && w[1] == b).count()
}

/// Draws `k` non-overlapping bigram starts in `1..=H-3`, uniform over all
/// valid placements (whole-draw rejection).
fn place_pairs<R: Rng + ?Sized>(h: usize, k: usize, rng: &mut R) -> Vec<usize> {
    loop {
        let starts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=h - 3)).collect();
        let clash = starts
            .iter()
            .enumerate()
            .any(|(i, &a)| starts[..i].iter().any(|&b| a.abs_diff(b) <= 1));
        if !clash {
            return starts;
        }
    }
}

fn fill<R: Rng + ?Sized>(h: usize, fillers: &[Token], rng: &mut R) -> Vec<Token> {
    (0..=h).map(|_| *fillers.choose(rng).expect("fillers nonempty")).collect()
}

fn sample_with_output<R: Rng + ?Sized>(
    cfg: &TaskConfig,
    trigger: Token,
    output: Token,
    fillers: &[Token],
    rng: &mut R,
) -> Sentence {
    let h = cfg.context_len;
    let mut z = fill(h, fillers, rng);
    let n_qy = rng.gen_range(1..=cfg.max_qy_bigrams);
    let starts = place_pairs(h, n_qy + usize::from(cfg.is_noisy()), rng);
    for (i, &zeta) in starts.iter().enumerate() {
        z[zeta - 1] = trigger;
        z[zeta] = if i < n_qy { output } else { cfg.noise_token() };
    }
    z[h - 1] = trigger;
    let label_is_noise = cfg.is_noisy() && rng.gen_bool(cfg.noise_level);
    z[h] = if label_is_noise { cfg.noise_token() } else { output };
    Sentence { tokens: z, trigger, output, label_is_noise }
}

/// Draws one sentence from the experimental sampler.
pub fn sample_sentence<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<Sentence> {
    cfg.validate()?;
    let q = *cfg.triggers.choose(rng).expect("validated");
    let y = *cfg.outputs.choose(rng).expect("validated");
    Ok(sample_with_output(cfg, q, y, &cfg.neutral_tokens(), rng))
}

/// Same process as [`sample_sentence`] with the output replaced by `y_test`.
pub fn make_ood_sentence<R: Rng + ?Sized>(
    cfg: &TaskConfig,
    y_test: Token,
    rng: &mut R,
) -> Result<Sentence> {
    cfg.validate()?;
    if y_test == 0 || y_test > cfg.vocab_size {
        return domain_err(format!("test output {y_test} outside 1..={}", cfg.vocab_size));
    }
    if cfg.triggers.contains(&y_test) || cfg.outputs.contains(&y_test) {
        return domain_err(format!("test output {y_test} is a trigger or a training output"));
    }
    let q = *cfg.triggers.choose(rng).expect("validated");
    // The test output must not also show up as a filler.
    let fillers: Vec<Token> = cfg.neutral_tokens().into_iter().filter(|&t| t != y_test).collect();
    if fillers.is_empty() {
        return domain_err("no filler tokens left besides the test output");
    }
    Ok(sample_with_output(cfg, q, y_test, &fillers, rng))
}

/// OOD sentence with `y_test` drawn uniformly from the neutral tokens.
pub fn sample_ood_sentence<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<Sentence> {
    cfg.validate()?;
    let y_test = *cfg.neutral_tokens().choose(rng).expect("validated");
    make_ood_sentence(cfg, y_test, rng)
}

/// The distinguished neutral token placed at `z_{H-1}` by the single-trigger
/// variant.
pub fn single_trigger_anchor(cfg: &TaskConfig) -> Token {
    cfg.neutral_tokens()[0]
}

/// Single-trigger, two-output variant: one `(q, y)` bigram at a uniform
/// start in `1..=H-3`, fillers from the neutral set, `z_{H-1}` fixed to
/// [`single_trigger_anchor`]. Always noiseless.
pub fn sample_b4_variant<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<Sentence> {
    if cfg.triggers.len() != 1 || cfg.outputs.len() != 2 {
        return config_err("the single-trigger variant needs |Q| = 1 and |O| = 2");
    }
    let mut noiseless = cfg.clone();
    noiseless.noise_level = 0.0;
    noiseless.max_qy_bigrams = 1;
    noiseless.validate()?;
    let h = cfg.context_len;
    let neutral = cfg.neutral_tokens();
    let q = cfg.triggers[0];
    let y = *cfg.outputs.choose(rng).expect("validated");
    let mut z = fill(h, &neutral, rng);
    let zeta = rng.gen_range(1..=h - 3);
    z[zeta - 1] = q;
    z[zeta] = y;
    z[h - 2] = single_trigger_anchor(cfg);
    z[h - 1] = q;
    z[h] = y;
    Ok(Sentence { tokens: z, trigger: q, output: y, label_is_noise: false })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    WrongLength { expected: usize, found: usize },
    TokenOutOfRange { position: usize, token: Token },
    TriggerNotInQ,
    OutputNotInO,
    LastContextNotTrigger,
    BadLabel,
    LabelFlagMismatch,
    /// Condition I.
    MissingTriggerOutputBigram,
    /// Condition II: noise token in a noiseless sentence.
    NoiseWithoutNoiseLevel,
    /// Condition II: noise token not preceded by the trigger.
    NoiseNotAfterTrigger { position: usize },
    /// Condition III.
    TriggerFollowedByOther { position: usize, token: Token },
    /// Condition IV.
    OtherTriggerNotFollowedByOutput { position: usize },
    PenultimateIsTrigger,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the four data-model conditions plus the structural invariants.
/// Positions in the report are 1-based.
pub fn validate_sentence(cfg: &TaskConfig, s: &Sentence) -> ValidationReport {
    let mut v = Vec::new();
    let h = cfg.context_len;
    let tau = cfg.noise_token();
    if s.tokens.len() != h + 1 {
        v.push(Violation::WrongLength { expected: h + 1, found: s.tokens.len() });
        return ValidationReport { violations: v };
    }
    for (i, &t) in s.tokens.iter().enumerate() {
        if t == 0 || t > tau {
            v.push(Violation::TokenOutOfRange { position: i + 1, token: t });
        }
    }
    let q = s.trigger;
    let y = s.output;
    if !cfg.triggers.contains(&q) {
        v.push(Violation::TriggerNotInQ);
    }
    if !cfg.outputs.contains(&y) {
        v.push(Violation::OutputNotInO);
    }
    let z = &s.tokens;
    if z[h - 1] != q {
        v.push(Violation::LastContextNotTrigger);
    }
    let label = z[h];
    if label != y && label != tau {
        v.push(Violation::BadLabel);
    }
    if s.label_is_noise != (label == tau) {
        v.push(Violation::LabelFlagMismatch);
    }
    if label == tau && !cfg.is_noisy() {
        v.push(Violation::NoiseWithoutNoiseLevel);
    }
    if !z[..h - 1].windows(2).any(|w| w[0] == q && w[1] == y) {
        v.push(Violation::MissingTriggerOutputBigram);
    }
    let context = &z[..h];
    for (i, &t) in context.iter().enumerate() {
        if t == tau {
            if !cfg.is_noisy() {
                v.push(Violation::NoiseWithoutNoiseLevel);
            }
            if i == 0 || context[i - 1] != q {
                v.push(Violation::NoiseNotAfterTrigger { position: i + 1 });
            }
        }
        if i + 1 < h {
            let next = context[i + 1];
            if t == q && next != y && next != tau {
                v.push(Violation::TriggerFollowedByOther { position: i + 1, token: next });
            }
            if t != q && cfg.triggers.contains(&t) && !cfg.outputs.contains(&next) {
                v.push(Violation::OtherTriggerNotFollowedByOutput { position: i + 1 });
            }
        }
    }
    if h >= 2 && cfg.triggers.contains(&z[h - 2]) {
        v.push(Violation::PenultimateIsTrigger);
    }
    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TaskConfig {
        TaskConfig {
            vocab_size: 12,
            context_len: 16,
            embed_dim: 26,
            triggers: vec![1, 2],
            outputs: vec![3, 4],
            noise_level: 0.0,
            max_qy_bigrams: 1,
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.outputs = vec![2, 3];
        assert!(c.validate().is_err());
        let mut c = small();
        c.embed_dim = 25;
        assert!(c.validate().is_err());
        let mut c = small().with_noise(0.5);
        c.context_len = 5;
        assert!(c.validate().is_err());
        c.context_len = 6;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bigram_count_of_handwritten_sentence() {
        let s = Sentence {
            tokens: vec![3, 1, 6, 1, 6, 9, 1, 6],
            trigger: 1,
            output: 6,
            label_is_noise: false,
        };
        assert_eq!(count_bigram(&s, 1, 6), 2);
        assert_eq!(count_bigram(&s, 6, 1), 1);
    }

    #[test]
    fn trigger_followed_by_stranger_is_condition_three() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_sentence(&cfg, &mut rng).unwrap();
        let h = cfg.context_len;
        let pos = s.tokens[..h - 2].iter().position(|&t| t == s.trigger).unwrap();
        // Plant a second copy of q followed by a filler.
        let free = (0..h - 3)
            .find(|&i| i.abs_diff(pos) > 2 && i + 1 < h - 2)
            .unwrap();
        s.tokens[free] = s.trigger;
        s.tokens[free + 1] = 11;
        let report = validate_sentence(&cfg, &s);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::TriggerFollowedByOther { .. })));
    }

    #[test]
    fn stray_noise_token_is_condition_two() {
        let cfg = small().with_noise(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = sample_sentence(&cfg, &mut rng).unwrap();
        s.tokens[0] = cfg.noise_token();
        let report = validate_sentence(&cfg, &s);
        assert!(report.violations.contains(&Violation::NoiseNotAfterTrigger { position: 1 }));
    }

    #[test]
    fn ood_requires_unseen_output() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(make_ood_sentence(&cfg, 3, &mut rng).is_err());
        assert!(make_ood_sentence(&cfg, 1, &mut rng).is_err());
        let s = make_ood_sentence(&cfg, 9, &mut rng).unwrap();
        assert_eq!(s.label(), 9);
    }

    #[test]
    fn single_trigger_variant_requires_one_trigger() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_b4_variant(&small(), &mut rng).is_err());
        let mut c = small();
        c.triggers = vec![1];
        let s = sample_b4_variant(&c, &mut rng).unwrap();
        assert_eq!(s.tokens[c.context_len - 2], single_trigger_anchor(&c));
        assert_eq!(count_bigram(&s, 1, s.output), 1);
    }
}
